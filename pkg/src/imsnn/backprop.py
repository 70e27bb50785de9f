"""Backpropagation through time for ISI-modulated networks.

The engine works layer by layer from the output down. For a bank feeding
layer ``l`` it forms the reverse-time accumulator

    A_j(t) = sum_{k>t} beta^(k-1-t) * delta_j(k)

where ``delta_j(k)`` is the loss gradient reaching the potential of neuron
``j`` at step ``k``. Every nested time sum of the height gradient, the spike
gradient and the ISI gradient collapses onto ``A``, and the ISI-path term of
the potential derivative only ever picks up the next presynaptic spike, so
one more reverse recursion handles it. The literal nested sums live in
``imsnn.oracle`` and are used to check this module.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .dynamics import gaussian_factor


class SuppressionMode(str, Enum):
    IMSNN = "imsnn"  # drop the ISI path where the ISI gradient is >= 0
    IMSNN_C = "imsnn_c"  # drop it where the ISI gradient is < 0
    NONE = "none"  # keep everything

    @classmethod
    def for_variant(cls, variant):
        return {"imsnn": cls.IMSNN, "imsnn_c": cls.IMSNN_C, "snn": cls.NONE}[variant]


def surrogate_spike_derivative(v, theta=1.0, a=10.0):
    """Fast-sigmoid stand-in for ds/dv: 1 / (1 + a|v - theta|)^2."""
    return 1.0 / np.square(1.0 + a * np.abs(np.asarray(v, dtype=np.float64) - theta))


def dtheta_dw(mu, sigma, phi):
    return gaussian_factor(phi, mu, sigma)


def dtheta_dphi_base(w, mu, sigma, phi):
    """Unsuppressed slope of the synapse weight with respect to the ISI."""
    phi = np.asarray(phi, dtype=np.float64)
    return -(phi - mu) * w * gaussian_factor(phi, mu, sigma) / np.square(sigma)


def keep_isi_path(grad_phi, mode):
    """Whether the ISI path survives for a given ISI-gradient value."""
    mode = SuppressionMode(mode)
    grad_phi = np.asarray(grad_phi)
    if mode is SuppressionMode.IMSNN:
        return grad_phi < 0
    if mode is SuppressionMode.IMSNN_C:
        return grad_phi >= 0
    return np.ones(grad_phi.shape, dtype=bool)


def dtheta_dphi(w, mu, sigma, phi, grad_phi, mode):
    """Slope of the synapse weight w.r.t. the ISI after the suppression rule."""
    base = dtheta_dphi_base(w, mu, sigma, phi)
    return np.where(keep_isi_path(grad_phi, mode), base, 0.0)


def dphi_ds(phi_t, later_spikes):
    """d phi(m) / d s(t) for the spikes strictly between t and m.

    Unrolling the ISI recursion gives ``-phi(t) * prod(1 - s(k))`` over
    ``t < k < m``; any intervening spike cuts the dependence.
    """
    later = np.asarray(later_spikes)
    return -phi_t * np.prod(1 - later, axis=-1)


def potential_derivative(s_pre, phi_pre, grad_phi_pre, w, mu, sigma, t, k, beta,
                         mode=SuppressionMode.IMSNN, gaussian=True):
    """d v_h(k) / d s_j(t) for a single connection j -> h of one sample.

    ``s_pre``, ``phi_pre`` and ``grad_phi_pre`` are the length-T histories of
    the presynaptic neuron j (0-based step indices). With ``gaussian=False``
    the weight is the fixed height and only the direct term remains.
    """
    T = len(s_pre)
    if not 0 <= t < k < T:
        raise IndexError(f"need 0 <= t < k < T, got t={t}, k={k}, T={T}")
    if not gaussian:
        return beta ** (k - 1 - t) * w
    value = beta ** (k - 1 - t) * w * gaussian_factor(phi_pre[t], mu, sigma)
    for m in range(t + 1, k):
        if s_pre[m]:
            slope = dtheta_dphi(w, mu, sigma, phi_pre[m], grad_phi_pre[m], mode)
            value += beta ** (k - 1 - m) * slope * dphi_ds(phi_pre[t], s_pre[t + 1:m])
    return float(value)


def reverse_accumulate(delta, beta):
    """A(t) = sum_{k>t} beta^(k-1-t) delta(k) along axis 1."""
    acc = np.zeros_like(delta)
    for t in range(delta.shape[1] - 2, -1, -1):
        acc[:, t] = delta[:, t + 1] + beta * acc[:, t + 1]
    return acc


@dataclass
class BackwardResult:
    grads: list  # one array per bank, summed over the batch
    eps: list = field(default_factory=list)  # per neuron layer, None where not computed
    grad_phi: list = field(default_factory=list)
    delta: list = field(default_factory=list)
    spiking_sites: int = 0
    suppressed_sites: int = 0

    @property
    def suppressed_fraction(self):
        return self.suppressed_sites / self.spiking_sites if self.spiking_sites else 0.0


def backward(net, fwd, seed_grad, mode=SuppressionMode.IMSNN, a=10.0):
    """Height gradients for a batch.

    Args:
        net: the Network that produced ``fwd``.
        fwd: ForwardResult with full traces.
        seed_grad: dL/dv at step T for the output layer, shape (batch, n_classes).
            Rows of zeros contribute nothing.
        mode: suppression rule for the ISI path.
        a: surrogate slope.

    Returns:
        BackwardResult with gradients summed over the batch, plus the spike
        gradients, ISI gradients and potential gradients of every layer.
    """
    mode = SuppressionMode(mode)
    traces = fwd.traces
    gaussian = fwd.gaussian
    batch, T = traces[0].s.shape[:2]
    n_layers = len(traces)

    delta = [None] * n_layers
    eps = [None] * n_layers
    grad_phi = [None] * n_layers
    out_delta = np.zeros((batch, T) + net.banks[-1].out_shape)
    out_delta[:, -1] = seed_grad
    delta[-1] = out_delta

    grads = [np.zeros_like(b.w) for b in net.banks]
    spiking = suppressed = 0
    for li in range(len(net.banks) - 1, -1, -1):
        bank = net.banks[li]
        pre = traces[li]
        acc = reverse_accumulate(delta[li + 1], net.beta)
        shp = (batch, T) + bank.in_shape
        s_pre = pre.s.reshape(shp)
        phi_pre = pre.phi.reshape(shp)
        for t in range(T):
            bank.accumulate_grad(grads[li], acc[:, t], s_pre[:, t], phi_pre[:, t], gaussian)
        if li == 0:
            break

        direct = np.zeros(shp)
        slope = np.zeros(shp)
        for t in range(T):
            c = bank.transposed(acc[:, t])
            if gaussian:
                cphi = bank.conn_phi(phi_pre[:, t]).astype(np.float64)
                cg = c * gaussian_factor(cphi, bank.mu_c, bank.sigma_c)
                direct[:, t] = bank.reduce_post(cg)
                slope[:, t] = bank.reduce_post(cg * (bank.mu_c - cphi) / np.square(bank.sigma_c))
            else:
                direct[:, t] = bank.reduce_post(c)

        fired = s_pre.astype(bool)
        gphi = np.where(fired, slope, 0.0)
        keep = keep_isi_path(gphi, mode)
        spiking += int(fired.sum())
        if mode is not SuppressionMode.NONE:
            suppressed += int((fired & ~keep).sum())
        g_next = np.where(fired & keep, slope, 0.0)

        # R(t): kept ISI-path slope at the next spike after t
        nxt = np.zeros(shp)
        for t in range(T - 2, -1, -1):
            nxt[:, t] = np.where(fired[:, t + 1], g_next[:, t + 1], nxt[:, t + 1])
        e = direct - phi_pre * nxt

        layer_shape = pre.s.shape
        eps[li] = e.reshape(layer_shape)
        grad_phi[li] = gphi.reshape(layer_shape)
        delta[li] = (e * surrogate_spike_derivative(pre.v.reshape(shp), net.theta, a)).reshape(layer_shape)
        delta[li] = delta[li].reshape((batch, T) + net.banks[li - 1].out_shape)

    return BackwardResult(grads, eps, grad_phi, delta, spiking, suppressed)
