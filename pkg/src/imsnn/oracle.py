"""Independent references for the backward engine.

``direct_sum_backward`` evaluates the height, spike and ISI gradients as
literal nested time sums over an explicit connection list, with no reverse
accumulators and no convolution arithmetic. ``fd_check_last_layer`` compares
output-layer gradients with central differences of the true loss.
``demo_single_neuron`` reproduces the one-synapse comparison between a fixed
weight and Gaussian synapses.
"""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .backprop import (
    SuppressionMode,
    backward,
    dphi_ds,
    dtheta_dphi,
    dtheta_dphi_base,
    surrogate_spike_derivative,
)
from .dynamics import gaussian_factor
from .network import DenseBank, InitConfig, Network, forward_pass, init_network, parse_architecture
from .training import cross_entropy

MAX_NEURONS = 50
MAX_STEPS = 25


class OracleSizeError(ValueError):
    pass


def expand_bank(bank):
    """Explicit connection matrices (n_pre, n_post) for any bank.

    Returns ``(w, mu, sigma, mask, param)`` where ``param[j, h]`` is the flat
    index into ``bank.w`` that connection j -> h uses (-1 if unconnected).
    """
    if isinstance(bank, DenseBank):
        n_pre, n_post = bank.w.shape
        param = np.arange(bank.w.size).reshape(bank.w.shape)
        return bank.w.copy(), bank.mu.copy(), bank.sigma.copy(), np.ones((n_pre, n_post), bool), param
    ci_n, h_in, w_in = bank.in_shape
    co_n, ho, wo = bank.out_shape
    k = bank.k
    n_pre, n_post = ci_n * h_in * w_in, co_n * ho * wo
    W = np.zeros((n_pre, n_post))
    MU = np.ones((n_pre, n_post))
    SIG = np.ones((n_pre, n_post))
    mask = np.zeros((n_pre, n_post), bool)
    param = -np.ones((n_pre, n_post), dtype=np.int64)
    for co in range(co_n):
        for y in range(ho):
            for x in range(wo):
                h = (co * ho + y) * wo + x
                for ci in range(ci_n):
                    for u in range(k):
                        for v in range(k):
                            j = (ci * h_in + y + u) * w_in + x + v
                            W[j, h] = bank.w[co, ci, u, v]
                            MU[j, h] = bank.mu[co, ci]
                            SIG[j, h] = bank.sigma[co, ci]
                            mask[j, h] = True
                            param[j, h] = np.ravel_multi_index((co, ci, u, v), bank.w.shape)
    return W, MU, SIG, mask, param


@dataclass
class OracleResult:
    grads: list
    eps: list
    grad_phi: list
    delta: list


def direct_sum_backward(net, fwd, seed_grad, mode=SuppressionMode.IMSNN, a=10.0,
                        max_neurons=MAX_NEURONS, max_steps=MAX_STEPS):
    """Literal nested-sum backward pass for a single sample.

    ``seed_grad`` is dL/dv of the output layer at the final step. Gradients,
    spike gradients and ISI gradients come back in the same layout as
    ``backprop.backward`` for a batch of one. The cost is cubic in T, hence
    the size guard.
    """
    mode = SuppressionMode(mode)
    traces = fwd.traces
    if traces[0].s.shape[0] != 1:
        raise ValueError("direct_sum_backward handles one sample at a time")
    T = traces[0].T
    n_neurons = sum(int(np.prod(tr.s.shape[2:])) for tr in traces)
    if n_neurons > max_neurons or T > max_steps:
        raise OracleSizeError(f"network too large for the oracle ({n_neurons} neurons, T={T})")

    beta = net.beta
    gaussian = fwd.gaussian
    flat = lambda arr: arr[0].reshape(T, -1)
    n_layers = len(traces)

    delta = [None] * n_layers
    eps = [None] * n_layers
    grad_phi = [None] * n_layers
    n_out = int(np.prod(traces[-1].v.shape[2:]))
    delta[-1] = np.zeros((T, n_out))
    delta[-1][T - 1] = np.asarray(seed_grad, dtype=np.float64).ravel()

    grads = []
    for li in range(len(net.banks) - 1, -1, -1):
        bank = net.banks[li]
        W, MU, SIG, mask, param = expand_bank(bank)
        s = flat(traces[li].s).astype(np.float64)
        phi = flat(traces[li].phi).astype(np.float64)
        d_post = delta[li + 1]
        n_pre, n_post = W.shape

        if gaussian:
            dwt = [np.where(mask, gaussian_factor(phi[t][:, None], MU, SIG), 0.0) for t in range(T)]
        else:
            dwt = [mask.astype(np.float64) for _ in range(T)]
        theta = [W * g for g in dwt]

        # height gradient: sum_t delta_h(t) sum_{k<t} beta^(t-1-k) s_j(k) dtheta/dw(k)
        gw = np.zeros((n_pre, n_post))
        for t in range(T):
            trace = np.zeros((n_pre, n_post))
            for k in range(t):
                trace += beta ** (t - 1 - k) * s[k][:, None] * dwt[k]
            gw += d_post[t][None, :] * trace
        gbank = np.zeros(bank.w.size)
        np.add.at(gbank, param[mask], gw[mask])
        grads.insert(0, gbank.reshape(bank.w.shape))
        if li == 0:
            continue

        if gaussian:
            base = [np.where(mask, dtheta_dphi_base(W, MU, SIG, phi[t][:, None]), 0.0) for t in range(T)]
        else:
            base = [np.zeros((n_pre, n_post)) for _ in range(T)]

        # ISI gradient: sum_h sum_{k>t} delta_h(k) beta^(k-1-t) s_j(t) dtheta/dphi(t)
        gphi = np.zeros((T, n_pre))
        for t in range(T):
            for k in range(t + 1, T):
                gphi[t] += (d_post[k][None, :] * beta ** (k - 1 - t) * s[t][:, None] * base[t]).sum(axis=1)

        # spike gradient: sum_h sum_{k>t} delta_h(k) dv_h(k)/ds_j(t)
        e = np.zeros((T, n_pre))
        for t in range(T):
            for k in range(t + 1, T):
                pd = beta ** (k - 1 - t) * theta[t]
                for m in range(t + 1, k):
                    if gaussian:
                        slope = dtheta_dphi(W, MU, SIG, phi[m][:, None], gphi[m][:, None], mode)
                        slope = np.where(mask, slope, 0.0)
                    else:
                        slope = np.zeros((n_pre, n_post))
                    chain = dphi_ds(phi[t], s[t + 1:m].T)
                    pd = pd + beta ** (k - 1 - m) * s[m][:, None] * slope * chain[:, None]
                e[t] += (d_post[k][None, :] * pd).sum(axis=1)

        v = flat(traces[li].v)
        shape = traces[li].s.shape
        eps[li] = e.reshape(shape)
        grad_phi[li] = gphi.reshape(shape)
        delta[li] = e * surrogate_spike_derivative(v, net.theta, a)

    delta_out = [None if d is None else d.reshape(tr.s.shape) for d, tr in zip(delta, traces)]
    return OracleResult(grads, eps, grad_phi, delta_out)


def conventional_backward(net, fwd, seed_grad, a=10.0):
    """Fixed-weight reference: spike gradients use beta^(k-1-t) * w only."""
    traces = fwd.traces
    T = traces[0].T
    flat = lambda arr: arr[0].reshape(T, -1)
    beta = net.beta
    n_out = int(np.prod(traces[-1].v.shape[2:]))
    d_post = np.zeros((T, n_out))
    d_post[T - 1] = np.asarray(seed_grad, dtype=np.float64).ravel()
    grads = []
    for li in range(len(net.banks) - 1, -1, -1):
        W, _, _, mask, param = expand_bank(net.banks[li])
        s = flat(traces[li].s).astype(np.float64)
        gw = np.zeros(W.shape)
        for t in range(T):
            for k in range(t):
                gw += d_post[t][None, :] * beta ** (t - 1 - k) * s[k][:, None] * mask
        gbank = np.zeros(net.banks[li].w.size)
        np.add.at(gbank, param[mask], gw[mask])
        grads.insert(0, gbank.reshape(net.banks[li].w.shape))
        if li == 0:
            break
        e = np.zeros((T, W.shape[0]))
        for t in range(T):
            for k in range(t + 1, T):
                e[t] += (d_post[k][None, :] * beta ** (k - 1 - t) * W).sum(axis=1)
        d_post = e * surrogate_spike_derivative(flat(traces[li].v), net.theta, a)
    return grads


@dataclass
class GradCheckReport:
    coords: list
    analytic: list
    numeric: list
    abs_err: list
    rel_err: list
    step: float
    tolerance: float
    valid: bool = True
    invalid_reason: str = ""
    truncation_dominated: bool = False
    noise_floor: float = 0.0  # gradients below this are compared in absolute terms
    passed: list = field(default_factory=list)

    @property
    def max_rel_err(self):
        return max(self.rel_err, default=0.0)

    @property
    def ok(self):
        return self.valid and all(self.passed)

    def to_json(self):
        doc = asdict(self)
        doc["coords"] = [list(map(int, c)) for c in self.coords]
        doc["max_rel_err"] = self.max_rel_err
        doc["ok"] = self.ok
        return json.dumps(doc, indent=2)


def random_check_case(arch="10-5-3", T=20, seed=0, height_std=1.0, rate=0.4, variant="imsnn",
                      beta=0.99, theta=1.0, max_tries=100):
    """A seeded random network, input raster and label for gradient checks.

    Heights are drawn wider than the training init so hidden neurons fire
    within a short run. Draws are repeated until some hidden neuron spikes
    and the loss is defined and not vanishingly small.
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        net = init_network(arch, seed=int(rng.integers(2**31)), init_cfg=InitConfig(height_std=height_std),
                           variant=variant, beta=beta, theta=theta)
        n_in = int(np.prod(net.banks[0].in_shape))
        raster = (rng.random((T, n_in)) < rate).astype(np.int8)
        label = int(rng.integers(net.banks[-1].out_shape[0]))
        fwd = forward_pass(net, raster, variant)
        if not np.any(fwd.output > 0) or fwd.spike_counts().sum() == 0:
            continue
        if cross_entropy(fwd.output[0], label)[0] > 1e-3:
            return net, raster, label
    raise RuntimeError(f"no usable instance for {arch} after {max_tries} draws")


def _rel(a, b, floor=0.0):
    scale = max(abs(a), abs(b), floor)
    return abs(a - b) / scale if scale > 0 else 0.0


def _loss(net, raster, label, variant):
    fwd = forward_pass(net, raster, variant)
    return cross_entropy(fwd.output[0], label)[0], fwd


def fd_check_last_layer(net, raster, label, step=1e-6, n_coords=50, seed=0,
                        tolerance=1e-6, variant=None, mode=None):
    """Central-difference check of the output-bank height gradient.

    Perturbing output heights cannot change any spike raster, so the loss is
    smooth in them. A raster change between the two probes invalidates the
    check instead of failing it.
    """
    if not 1e-7 <= step <= 1e-2:
        raise ValueError("step must lie in [1e-7, 1e-2]")
    variant = variant or net.variant
    mode = mode or SuppressionMode.for_variant(variant)
    loss, fwd = _loss(net, raster, label, variant)
    _, seed_grad = cross_entropy(fwd.output[0], label)
    analytic = backward(net, fwd, seed_grad[None], mode).grads[-1]

    bank = net.banks[-1]
    rng = np.random.default_rng(seed)
    n = min(n_coords, bank.w.size)
    flat_idx = rng.choice(bank.w.size, size=n, replace=False)
    coords = [np.unravel_index(i, bank.w.shape) for i in flat_idx]

    def probe(idx, h):
        work = net.copy()
        work.banks[-1].w[idx] += h
        return _loss(work, raster, label, variant)

    # central differences cannot resolve slopes below the rounding noise of the loss
    floor = float(100 * np.finfo(float).eps * max(1.0, abs(loss)) / step)
    rep = GradCheckReport([], [], [], [], [], step, tolerance, noise_floor=floor)
    ref_spikes = [tr.s for tr in fwd.traces[:-1]]
    for idx in coords:
        (lp, fp), (lm, fm) = probe(idx, step), probe(idx, -step)
        for tr_p, tr_m, ref in zip(fp.traces[:-1], fm.traces[:-1], ref_spikes):
            if not (np.array_equal(tr_p.s, ref) and np.array_equal(tr_m.s, ref)):
                rep.valid = False
                rep.invalid_reason = f"spike raster changed when perturbing {tuple(map(int, idx))}"
        numeric = (lp - lm) / (2 * step)
        a_val = float(analytic[idx])
        rep.coords.append(idx)
        rep.analytic.append(a_val)
        rep.numeric.append(numeric)
        rep.abs_err.append(abs(a_val - numeric))
        rep.rel_err.append(_rel(a_val, numeric, floor))
        rep.passed.append(bool(rep.rel_err[-1] < tolerance))

    # Richardson-style probe: halving the step should not move a clean estimate
    worst = int(np.argmax(rep.abs_err)) if rep.abs_err else None
    if worst is not None:
        idx = rep.coords[worst]
        lp, _ = probe(idx, step / 2)
        lm, _ = probe(idx, -step / 2)
        half = (lp - lm) / step
        rep.truncation_dominated = bool(_rel(half, rep.numeric[worst], floor) > tolerance)
    return rep


@dataclass
class DemoResult:
    rasters: dict
    inflow_per_spike: dict
    verdict: bool

    @property
    def counts(self):
        return {k: int(v.sum()) for k, v in self.rasters.items()}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["network", "timestep", "neuron", "spike"])
            for name, raster in self.rasters.items():
                for t in np.flatnonzero(raster):
                    out.writerow([name, int(t) + 1, 0, 1])


def periodic_raster(T=100, period=10):
    """One input neuron spiking at steps period, 2*period, ... (1-based)."""
    raster = np.zeros((T, 1), dtype=np.int8)
    raster[period - 1::period] = 1
    return raster


def _single_neuron(height, mu, sigma, variant):
    specs = parse_architecture("1-1-1")
    bank = DenseBank([[height]], [[mu]], [[sigma]])
    readout = DenseBank([[1.0]], [[1.0]], [[1.0]])
    return Network("1-1-1", specs, [bank, readout], variant=variant)


def demo_single_neuron(T=100, period=10, height=0.6, sigma=5.0, beta=0.99):
    """Drive one LIF neuron through (a) a fixed weight, (b) a Gaussian synapse
    tuned to the input interval and (c) one tuned 5 steps too long."""
    raster = periodic_raster(T, period)
    configs = {
        "conventional": (float(period), "snn"),
        f"gaussian_mu{period}": (float(period), "imsnn"),
        f"gaussian_mu{period + 5}": (float(period + 5), "imsnn"),
    }
    rasters, inflow = {}, {}
    for name, (mu, variant) in configs.items():
        net = _single_neuron(height, mu, sigma, variant)
        net.beta = beta
        fwd = forward_pass(net, raster)
        rasters[name] = fwd.traces[1].s[0, :, 0].copy()
        in_phi = fwd.traces[0].phi[0, :, 0]
        spikes = np.flatnonzero(raster[:, 0])
        if variant == "snn":
            inflow[name] = float(height)
        else:
            # every spike after the first sees the full period
            inflow[name] = float(height * gaussian_factor(in_phi[spikes[-1]], mu, sigma))
    a, b, c = rasters.values()
    verdict = bool(np.array_equal(a, b) and b.sum() >= c.sum())
    return DemoResult(rasters, inflow, verdict)
