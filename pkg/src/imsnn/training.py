"""Loss, optimizer, metrics and the training loop."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import EPS_GUARD, DegenerateOutputError, output_probabilities

log = logging.getLogger(__name__)


def cross_entropy(potentials, label, guard=EPS_GUARD):
    """Negative log of the normalized output potential of ``label``.

    Returns ``(loss, grad)`` where ``grad`` is dL/dv for the raw potentials.
    Components below ``guard`` are floored before normalizing; the floor is
    constant there, so those components get a zero derivative.
    """
    v = np.asarray(potentials, dtype=np.float64)
    p = output_probabilities(v, guard)
    vc = np.maximum(v, guard)
    total = vc.sum()
    loss = -math.log(p[label])
    grad = np.full(v.shape, 1.0 / total)
    grad[label] -= 1.0 / vc[label]
    grad[v < guard] = 0.0
    return loss, grad


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place on ``params``."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 20
    batch_size: int = 128
    beta: float = 0.99
    theta: float = 1.0
    T: int = 100
    variant: str = "imsnn"
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    surrogate_a: float = 10.0
    loss_guard: float = EPS_GUARD  # floor on output potentials inside the loss

    def __post_init__(self):
        if self.variant not in ("imsnn", "snn", "imsnn_c"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1 or self.T < 1:
            raise ValueError("lr, epochs, batch_size and T must be positive")
        if not self.loss_guard > 0:
            raise ValueError("loss_guard must be positive")


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    kappa_a: float
    kappa_n_layers: list
    kappa_n: float
    loss: float
    suppressed_fraction: float | None = None
    degenerate: int = 0
    samples: int = 0


@dataclass
class _Tally:
    n_hidden: list
    guard: float = EPS_GUARD
    correct: int = 0
    total: int = 0
    degenerate: int = 0
    spikes: np.ndarray = None
    losses: dict = field(default_factory=dict)
    sites: int = 0
    suppressed: int = 0

    def __post_init__(self):
        self.spikes = np.zeros(len(self.n_hidden), dtype=np.int64)

    def add(self, idx, fwd, labels):
        """Score a batch.

        Returns per-sample seed gradients (zero rows for degenerate samples)
        and a mask of the samples that entered the loss.
        """
        seeds = np.zeros_like(fwd.output)
        valid = np.zeros(len(seeds), dtype=bool)
        self.spikes += fwd.spike_counts().sum(axis=0)
        for row, (i, y) in enumerate(zip(idx, labels)):
            self.total += 1
            try:
                loss, seeds[row] = cross_entropy(fwd.output[row], y, self.guard)
            except DegenerateOutputError:
                self.degenerate += 1
                continue
            valid[row] = True
            self.losses[int(i)] = loss
            self.correct += int(np.argmax(fwd.output[row]) == y)
        return seeds, valid

    def record(self, epoch, split, with_suppression=False):
        if self.total == 0:
            raise ValueError("empty dataset")
        layers = [float(c / (n * self.total)) for c, n in zip(self.spikes, self.n_hidden)]
        # reduce losses in sample order so shuffling cannot change the sum
        loss = math.fsum(self.losses[k] for k in sorted(self.losses)) / max(len(self.losses), 1)
        frac = None
        if with_suppression:
            frac = self.suppressed / self.sites if self.sites else 0.0
        return MetricsRecord(epoch, split, 100.0 * self.correct / self.total, layers,
                             float(sum(layers)), loss, frac, self.degenerate, self.total)


def _batches(n, size):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def evaluate(net, dataset, cfg=None, encoder=None, epoch=0, split="test", batch_size=None):
    """Accuracy, per-layer spikes per neuron and mean loss over a dataset."""
    from .encoding import EncoderConfig, encode
    from .network import forward_pass

    cfg = cfg or TrainConfig(variant=net.variant)
    encoder = encoder or EncoderConfig(T=cfg.T)
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    tally = _Tally(net.hidden_sizes, cfg.loss_guard)
    images = dataset.images.reshape(len(dataset), -1)
    for sl in _batches(len(dataset), batch_size or cfg.batch_size):
        fwd = forward_pass(net, encode(images[sl], encoder), cfg.variant)
        tally.add(range(sl.start, sl.stop), fwd, dataset.labels[sl])
    return tally.record(epoch, split)


class CsvSink:
    """Append-only CSV of metrics records, one row per epoch and split."""

    def __init__(self, path, n_hidden):
        self.path = path
        self.n_hidden = n_hidden
        self._header = (["epoch", "split", "kappa_a"]
                        + [f"kappa_n_l{i + 1}" for i in range(n_hidden)]
                        + ["kappa_n", "loss", "suppressed_fraction", "degenerate"])
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(self._header)

    def __call__(self, rec):
        frac = "" if rec.suppressed_fraction is None else repr(rec.suppressed_fraction)
        row = ([rec.epoch, rec.split, repr(rec.kappa_a)]
               + [repr(k) for k in rec.kappa_n_layers]
               + [repr(rec.kappa_n), repr(rec.loss), frac, rec.degenerate])
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(row)


def train(net, train_set, cfg, test_set=None, sink=None, encoder=None):
    """Train the heights of ``net`` in place.

    Each epoch shuffles with a generator seeded by ``(cfg.seed, epoch)``,
    runs forward and backward per batch with the variant's suppression rule
    and takes one Adam step on the mean gradient over non-degenerate samples.
    Train metrics are tallied on the fly from the training forward passes;
    test metrics are computed after the epoch.

    Returns:
        ``(net, records)`` with one train and (if given) one test record per epoch.
    """
    from .backprop import SuppressionMode, backward
    from .encoding import EncoderConfig, encode
    from .network import forward_pass

    encoder = encoder or EncoderConfig(T=cfg.T)
    net.beta, net.theta, net.variant = cfg.beta, cfg.theta, cfg.variant
    mode = SuppressionMode.for_variant(cfg.variant)
    state = AdamState.zeros_like(net.heights())
    images = train_set.images.reshape(len(train_set), -1)
    records = []
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        tally = _Tally(net.hidden_sizes, cfg.loss_guard)
        for sl in _batches(len(order), cfg.batch_size):
            idx = order[sl]
            labels = train_set.labels[idx]
            fwd = forward_pass(net, encode(images[idx], encoder), cfg.variant)
            seeds, valid = tally.add(idx, fwd, labels)
            n_valid = int(valid.sum())
            if n_valid == 0:
                continue
            res = backward(net, fwd, seeds, mode, cfg.surrogate_a)
            tally.sites += res.spiking_sites
            tally.suppressed += res.suppressed_sites
            grads = [g / n_valid for g in res.grads]
            adam_step(net.heights(), grads, state, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        rec = tally.record(epoch, "train", with_suppression=True)
        records.append(rec)
        log.info("epoch %d train acc %.2f kappa_n %.4f loss %.4f suppressed %.3f",
                 epoch, rec.kappa_a, rec.kappa_n, rec.loss, rec.suppressed_fraction)
        if sink:
            sink(rec)
        if test_set is not None:
            rec = evaluate(net, test_set, cfg, encoder, epoch=epoch, split="test")
            records.append(rec)
            log.info("epoch %d test acc %.2f kappa_n %.4f", epoch, rec.kappa_a, rec.kappa_n)
            if sink:
                sink(rec)
    return net, records
