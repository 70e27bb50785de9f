"""Neuron and synapse primitives.

Everything here is a pure function of its arguments and works elementwise on
scalars or numpy arrays. Interspike intervals are integer step counts and are
only promoted to float inside the Gaussian.
"""

from dataclasses import dataclass

import numpy as np

#: Per-component floor applied to output potentials before normalizing.
EPS_GUARD = 1e-12


class DegenerateOutputError(ValueError):
    """All output potentials are nonpositive, so class probabilities are undefined."""


@dataclass(frozen=True)
class GaussianSynapse:
    """A single ISI-modulated connection.

    ``height`` is the learnable amplitude; ``mean`` and ``width`` (in time
    steps) fix the presynaptic interval that passes the full height.
    """

    height: float
    mean: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"synapse width must be positive, got {self.width}")
        if not self.mean > 0:
            raise ValueError(f"synapse mean must be positive, got {self.mean}")

    def weight(self, phi):
        return synapse_weight(self.height, self.mean, self.width, phi)


def isi_update(phi, spike):
    """Advance the interspike-interval counter by one step.

    Returns 1 right after a spike and ``phi + 1`` otherwise.
    """
    return 1 + phi * (1 - spike)


def gaussian_factor(phi, mu, sigma):
    """exp(-(phi - mu)^2 / (2 sigma^2)), the height-free part of the synapse."""
    d = np.asarray(phi, dtype=np.float64) - mu
    return np.exp(-(d * d) / (2.0 * np.square(sigma)))


def synapse_weight(w, mu, sigma, phi):
    """Effective weight of a Gaussian synapse for presynaptic ISI ``phi``."""
    return w * gaussian_factor(phi, mu, sigma)


def membrane_step(v, beta, inflow, theta=1.0, spiking=True):
    """One leaky-integrate step followed by threshold and hard reset.

    With ``spiking=False`` (output accumulators) the candidate potential is
    returned unchanged and no spike is emitted.

    Returns:
        ``(v_next, spike)``; ``spike`` is an int (or int array) in {0, 1}.
    """
    candidate = beta * v + inflow
    if not spiking:
        return candidate, np.zeros_like(candidate, dtype=np.int8) if np.ndim(candidate) else 0
    fired = candidate >= theta
    if np.ndim(candidate):
        return np.where(fired, 0.0, candidate), fired.astype(np.int8)
    return (0.0, 1) if fired else (candidate, 0)


def output_probabilities(potentials, guard=EPS_GUARD):
    """Class probabilities as the ratio of each output potential to their sum.

    Each potential is floored at ``guard`` before normalizing. Raises
    DegenerateOutputError when no potential is positive.
    """
    v = np.asarray(potentials, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty potential vector")
    if not np.any(v > 0):
        raise DegenerateOutputError("all output potentials are nonpositive")
    vc = np.maximum(v, guard)
    return vc / vc.sum()
