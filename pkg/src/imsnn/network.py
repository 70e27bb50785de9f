"""Layered spiking networks built from ISI-modulated synapse banks.

Time runs over steps ``t = 1..T``; arrays store step ``t`` at index ``t - 1``.
A spike emitted at step ``t`` reaches the next layer's membrane at ``t + 1``,
weighted by the synapse value for the presynaptic ISI at ``t``.
"""

import json
import math
import re
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dynamics import gaussian_factor, isi_update

FORMAT_VERSION = 1
VARIANTS = ("imsnn", "snn", "imsnn_c")

_CONV_TOKEN = re.compile(r"^(\d+)c(\d+)$")
_DENSE_TOKEN = re.compile(r"^\d+$")


class ArchitectureError(ValueError):
    def __init__(self, message, index=None):
        self.index = index
        if index is not None:
            message = f"token {index}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv | flatten | output
    fan_in: int
    fan_out: int
    in_shape: tuple
    out_shape: tuple
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | None = None
    stride: int = 1
    padding: int = 0

    def __str__(self):
        if self.kind == "conv":
            return f"Conv {self.in_channels}->{self.out_channels} k{self.kernel}"
        if self.kind == "flatten":
            return "Flatten"
        return f"{self.kind.capitalize()} {self.fan_in}->{self.fan_out}"


def parse_architecture(spec):
    """Parse a dash-separated architecture string such as ``784-48c5-8c5-500-10``.

    The first token is the input size, the last the number of classes. A
    square input size is also treated as a one-channel image so convolution
    tokens (``<channels>c<kernel>``) may follow it. Convolutions are stride 1
    without padding; a dense token after a convolution inserts a flatten.
    """
    tokens = spec.strip().split("-")
    if len(tokens) < 2:
        raise ArchitectureError(f"need at least an input and an output size, got {spec!r}")
    if not _DENSE_TOKEN.match(tokens[0]) or int(tokens[0]) <= 0:
        raise ArchitectureError(f"input size must be a positive integer, got {tokens[0]!r}", 0)

    n_in = int(tokens[0])
    side = math.isqrt(n_in)
    shape = (1, side, side) if side * side == n_in else (n_in,)

    layers = []
    last = len(tokens) - 1
    for idx in range(1, len(tokens)):
        tok = tokens[idx]
        conv = _CONV_TOKEN.match(tok)
        if conv:
            if idx == last:
                raise ArchitectureError("the output layer must be dense", idx)
            if len(shape) != 3:
                raise ArchitectureError(f"convolution {tok!r} needs a 2-D input map", idx)
            co, k = int(conv.group(1)), int(conv.group(2))
            ci, h, w = shape
            if co <= 0 or k <= 0:
                raise ArchitectureError(f"bad convolution {tok!r}", idx)
            if k > h or k > w:
                raise ArchitectureError(f"kernel {k} larger than input map {h}x{w}", idx)
            out = (co, h - k + 1, w - k + 1)
            layers.append(LayerSpec("conv", ci * h * w, int(np.prod(out)), shape, out,
                                    in_channels=ci, out_channels=co, kernel=k))
            shape = out
        elif _DENSE_TOKEN.match(tok):
            width = int(tok)
            if width <= 0:
                raise ArchitectureError("layer width must be positive", idx)
            if len(shape) == 3 and layers and layers[-1].kind == "conv":
                flat = (int(np.prod(shape)),)
                layers.append(LayerSpec("flatten", flat[0], flat[0], shape, flat))
            fan_in = int(np.prod(shape))
            kind = "output" if idx == last else "dense"
            layers.append(LayerSpec(kind, fan_in, width, (fan_in,), (width,)))
            shape = (width,)
        else:
            raise ArchitectureError(f"malformed token {tok!r}", idx)
    return layers


class DenseBank:
    """Fully connected Gaussian synapses, arrays of shape (fan_in, fan_out)."""

    kind = "dense"

    def __init__(self, w, mu, sigma):
        self.w = np.asarray(w, dtype=np.float64)
        self.mu = np.asarray(mu, dtype=np.float64)
        self.sigma = np.asarray(sigma, dtype=np.float64)
        if not (self.w.shape == self.mu.shape == self.sigma.shape) or self.w.ndim != 2:
            raise ValueError("w, mu and sigma must share one 2-D shape")
        if np.any(self.sigma <= 0):
            raise ValueError("all widths must be positive")
        self._table = None

    @property
    def in_shape(self):
        return (self.w.shape[0],)

    @property
    def out_shape(self):
        return (self.w.shape[1],)

    # connection layout is (..., n_in, n_out)
    @property
    def mu_c(self):
        return self.mu

    @property
    def sigma_c(self):
        return self.sigma

    def conn_phi(self, phi):
        return phi[..., :, None]

    def reduce_post(self, x):
        return x.sum(axis=-1)

    def transposed(self, a):
        """Spread postsynaptic values onto connections, weighted by height."""
        return a[:, None, :] * self.w

    def _rows(self, phi_vals, idx):
        """Gaussian factors for presynaptic neurons ``idx`` at ISIs ``phi_vals``."""
        pmax = int(phi_vals.max())
        if self._table is None or self._table.shape[0] <= pmax:
            n = self.w.size * (pmax + 1)
            if n > 40_000_000:
                return gaussian_factor(phi_vals[:, None], self.mu[idx], self.sigma[idx])
            p = np.arange(max(pmax + 1, 128), dtype=np.float64)
            self._table = gaussian_factor(p[:, None, None], self.mu, self.sigma)
        return self._table[phi_vals, idx]

    def inflow(self, s, phi, gaussian=True):
        batch = s.shape[0]
        if not gaussian:
            return s.astype(np.float64) @ self.w
        out = np.zeros((batch, self.w.shape[1]))
        b, i = np.nonzero(s)
        if b.size == 0:
            return out
        contrib = self.w[i] * self._rows(phi[b, i], i)
        starts = np.flatnonzero(np.r_[True, b[1:] != b[:-1]])
        out[b[starts]] = np.add.reduceat(contrib, starts, axis=0)
        return out

    def accumulate_grad(self, grad, a, s, phi, gaussian=True):
        """Add sum over batch of s_i * dtheta/dw * a_j for one time step."""
        if not gaussian:
            grad += s.astype(np.float64).T @ a
            return
        b, i = np.nonzero(s)
        if b.size == 0:
            return
        contrib = self._rows(phi[b, i], i) * a[b]
        order = np.argsort(i, kind="stable")
        i_sorted = i[order]
        starts = np.flatnonzero(np.r_[True, i_sorted[1:] != i_sorted[:-1]])
        grad[i_sorted[starts]] += np.add.reduceat(contrib[order], starts, axis=0)

    def to_dict(self):
        return {"kind": "dense", "shape": list(self.w.shape),
                "w": self.w.ravel().tolist(), "mu": self.mu.ravel().tolist(),
                "sigma": self.sigma.ravel().tolist()}


class ConvBank:
    """Valid, stride-1 convolution of Gaussian synapses.

    Heights have shape (out_ch, in_ch, k, k). Mean and width have shape
    (out_ch, in_ch): every tap of a kernel shares them.
    """

    kind = "conv"

    def __init__(self, w, mu, sigma, in_shape):
        self.w = np.asarray(w, dtype=np.float64)
        self.mu = np.asarray(mu, dtype=np.float64)
        self.sigma = np.asarray(sigma, dtype=np.float64)
        co, ci, k, k2 = self.w.shape
        if k != k2 or self.mu.shape != (co, ci) or self.sigma.shape != (co, ci):
            raise ValueError("conv bank shapes are inconsistent")
        if np.any(self.sigma <= 0):
            raise ValueError("all widths must be positive")
        self._in_shape = tuple(int(x) for x in in_shape)
        if self._in_shape[0] != ci:
            raise ValueError("input channels do not match kernel")

    @property
    def k(self):
        return self.w.shape[2]

    @property
    def in_shape(self):
        return self._in_shape

    @property
    def out_shape(self):
        _, h, w = self._in_shape
        return (self.w.shape[0], h - self.k + 1, w - self.k + 1)

    # connection layout is (batch, out_ch, in_ch, H, W)
    @property
    def mu_c(self):
        return self.mu[:, :, None, None]

    @property
    def sigma_c(self):
        return self.sigma[:, :, None, None]

    def conn_phi(self, phi):
        return phi[:, None]

    def reduce_post(self, x):
        return x.sum(axis=1)

    def transposed(self, a):
        """Full correlation of postsynaptic maps with the flipped kernels."""
        p = self.k - 1
        ap = np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(ap, (self.k, self.k), axis=(2, 3))
        return np.einsum("boyxuv,ocuv->bocyx", win, self.w[:, :, ::-1, ::-1], optimize=True)

    def _drive(self, s, phi, gaussian):
        s = s.astype(np.float64)
        if not gaussian:
            return np.broadcast_to(s[:, None], (s.shape[0], self.w.shape[0]) + s.shape[1:])
        return s[:, None] * gaussian_factor(phi[:, None], self.mu_c, self.sigma_c)

    def inflow(self, s, phi, gaussian=True):
        drive = self._drive(s, phi, gaussian)
        win = sliding_window_view(drive, (self.k, self.k), axis=(3, 4))
        return np.einsum("bocyxuv,ocuv->boyx", win, self.w, optimize=True)

    def accumulate_grad(self, grad, a, s, phi, gaussian=True):
        if not s.any():
            return
        drive = self._drive(s, phi, gaussian)
        win = sliding_window_view(drive, (self.k, self.k), axis=(3, 4))
        grad += np.einsum("boyx,bocyxuv->ocuv", a, win, optimize=True)

    def to_dict(self):
        return {"kind": "conv", "shape": list(self.w.shape), "in_shape": list(self._in_shape),
                "w": self.w.ravel().tolist(), "mu": self.mu.ravel().tolist(),
                "sigma": self.sigma.ravel().tolist()}


@dataclass
class InitConfig:
    mu_range: tuple = (5.0, 10.0)
    sigma_range: tuple = (10.0, 50.0)
    height_std: float = 0.05


@dataclass
class Network:
    architecture: str
    specs: list
    banks: list
    variant: str = "imsnn"
    beta: float = 0.99
    theta: float = 1.0

    @property
    def layer_shapes(self):
        """Neuron-layer shapes from input to output."""
        return [self.banks[0].in_shape] + [b.out_shape for b in self.banks]

    @property
    def hidden_sizes(self):
        return [int(np.prod(b.out_shape)) for b in self.banks[:-1]]

    def heights(self):
        return [b.w for b in self.banks]

    def copy(self):
        return network_from_dict(network_to_dict(self))


def _make_bank(spec, w, mu, sigma):
    if spec.kind == "conv":
        return ConvBank(w, mu, sigma, spec.in_shape)
    return DenseBank(w, mu, sigma)


def init_network(specs, seed=0, init_cfg=None, architecture="", variant="imsnn",
                 beta=0.99, theta=1.0):
    """Draw heights from Normal(0, height_std) and means/widths uniformly.

    One generator seeded by ``seed`` is consumed bank by bank in the order
    heights, means, widths, so the result is fully determined by the seed.
    """
    if isinstance(specs, str):
        architecture, specs = specs, parse_architecture(specs)
    cfg = init_cfg or InitConfig()
    rng = np.random.default_rng(seed)
    banks = []
    for spec in specs:
        if spec.kind == "flatten":
            continue
        if spec.kind == "conv":
            wshape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
            pshape = (spec.out_channels, spec.in_channels)
        else:
            wshape = pshape = (spec.fan_in, spec.fan_out)
        w = rng.normal(0.0, cfg.height_std, size=wshape)
        mu = rng.uniform(*cfg.mu_range, size=pshape)
        sigma = rng.uniform(*cfg.sigma_range, size=pshape)
        banks.append(_make_bank(spec, w, mu, sigma))
    return Network(architecture, list(specs), banks, variant=variant, beta=beta, theta=theta)


@dataclass
class LayerTrace:
    """Per-step record of one neuron layer for a batch.

    ``s`` and ``phi`` have shape (batch, T, *layer_shape). ``v`` holds the
    membrane potential before any reset (None for the input layer).
    """

    s: np.ndarray
    phi: np.ndarray
    v: np.ndarray | None = None

    @property
    def T(self):
        return self.s.shape[1]


@dataclass
class ForwardResult:
    output: np.ndarray  # (batch, n_classes), output potentials at step T
    traces: list = field(default_factory=list)
    gaussian: bool = True

    def spike_counts(self):
        """Total spikes per sample for each hidden layer, shape (batch, n_hidden)."""
        hidden = self.traces[1:-1]
        if not hidden:
            return np.zeros((self.output.shape[0], 0), dtype=np.int64)
        return np.stack([tr.s.reshape(tr.s.shape[0], -1).sum(axis=1, dtype=np.int64)
                         for tr in hidden], axis=1)


def isi_trace(s):
    """ISI at every step for a spike array shaped (batch, T, ...)."""
    phi = np.empty(s.shape, dtype=np.int32)
    prev_phi = np.zeros(s.shape[:1] + s.shape[2:], dtype=np.int32)
    prev_s = np.zeros_like(prev_phi)
    for t in range(s.shape[1]):
        prev_phi = isi_update(prev_phi, prev_s)
        phi[:, t] = prev_phi
        prev_s = s[:, t]
    return phi


def forward_pass(net, raster, variant=None):
    """Simulate ``net`` on input spikes and record every layer.

    Args:
        net: the Network.
        raster: binary array (T, n_in) for one sample or (batch, T, n_in).
        variant: ``imsnn``/``imsnn_c`` use Gaussian synapses, ``snn`` uses the
            heights as fixed weights. Defaults to ``net.variant``.

    Returns:
        ForwardResult with output potentials at step T and one LayerTrace per
        neuron layer (input first, output last).
    """
    variant = variant or net.variant
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    gaussian = variant != "snn"

    x = np.asarray(raster)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError("raster must be (T, n) or (batch, T, n)")
    if not np.isin(x, (0, 1)).all():
        raise ValueError("raster must be binary")
    in_shape = net.banks[0].in_shape
    if x.shape[2] != int(np.prod(in_shape)):
        raise ValueError(f"raster has {x.shape[2]} inputs, network expects {int(np.prod(in_shape))}")
    batch, T = x.shape[:2]
    if T < 1:
        raise ValueError("need at least one time step")

    s_in = x.astype(np.int8).reshape((batch, T) + in_shape)
    traces = [LayerTrace(s_in, isi_trace(s_in))]
    n_banks = len(net.banks)
    for li, bank in enumerate(net.banks):
        shape = (batch, T) + bank.out_shape
        spiking = li < n_banks - 1
        traces.append(LayerTrace(np.zeros(shape, dtype=np.int8),
                                 np.zeros(shape, dtype=np.int32) if spiking else None,
                                 np.zeros(shape)))

    state = [np.zeros((batch,) + b.out_shape) for b in net.banks]
    phi_state = [np.zeros((batch,) + b.out_shape, dtype=np.int32) for b in net.banks]
    for t in range(T):
        for li, bank in enumerate(net.banks):
            pre, post = traces[li], traces[li + 1]
            if t == 0:
                inflow = 0.0
            else:
                s_prev = pre.s[:, t - 1].reshape((batch,) + bank.in_shape)
                phi_prev = pre.phi[:, t - 1].reshape((batch,) + bank.in_shape)
                inflow = bank.inflow(s_prev, phi_prev, gaussian)
            v = net.beta * state[li] + inflow
            post.v[:, t] = v
            if post.phi is None:
                state[li] = v
                continue
            prev_s = post.s[:, t - 1] if t else 0
            phi_state[li] = isi_update(phi_state[li], prev_s)
            post.phi[:, t] = phi_state[li]
            fired = v >= net.theta
            post.s[:, t] = fired
            state[li] = np.where(fired, 0.0, v)
    return ForwardResult(traces[-1].v[:, -1].copy(), traces, gaussian)


def network_to_dict(net):
    return {"format_version": FORMAT_VERSION, "architecture": net.architecture,
            "variant": net.variant, "beta": net.beta, "theta": net.theta,
            "layers": [b.to_dict() for b in net.banks]}


def network_from_dict(doc):
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {doc.get('format_version')!r}")
    specs = parse_architecture(doc["architecture"])
    bank_specs = [s for s in specs if s.kind != "flatten"]
    if len(bank_specs) != len(doc["layers"]):
        raise ValueError("layer count does not match architecture")
    banks = []
    for spec, layer in zip(bank_specs, doc["layers"]):
        shape = tuple(layer["shape"])
        pshape = shape[:2]
        arr = lambda key, shp: np.array(layer[key], dtype=np.float64).reshape(shp)
        banks.append(_make_bank(spec, arr("w", shape), arr("mu", pshape), arr("sigma", pshape)))
    return Network(doc["architecture"], specs, banks, variant=doc.get("variant", "imsnn"),
                   beta=doc.get("beta", 0.99), theta=doc.get("theta", 1.0))


def save_network(net, path):
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh)


def load_network(path):
    with open(path) as fh:
        return network_from_dict(json.load(fh))
