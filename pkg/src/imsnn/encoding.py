"""Rate coding of normalized pixel intensities into spike rasters."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EncoderConfig:
    T: int = 100
    dt: float = 1.0  # ms
    rate_min: float = 28.5  # Hz
    rate_max: float = 100.0  # Hz
    scheme: str = "deterministic"  # or "poisson"
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if not 0 < self.rate_min <= self.rate_max:
            raise ValueError("need 0 < rate_min <= rate_max")
        if self.rate_max * self.dt / 1000.0 > 1.0:
            raise ValueError("rate_max * dt exceeds one spike per step")
        if self.scheme not in ("deterministic", "poisson"):
            raise ValueError(f"unknown scheme {self.scheme!r}")


def rates(pixels, cfg):
    """Firing rate in Hz for each pixel, linear between rate_min and rate_max."""
    return cfg.rate_min + np.asarray(pixels, dtype=np.float64) * (cfg.rate_max - cfg.rate_min)


def encode(pixels, cfg=EncoderConfig(), rng=None):
    """Encode pixels in [0, 1] as a binary raster.

    A single image of N pixels gives (T, N); a batch (B, N) gives (B, T, N).
    The deterministic scheme fires at step t (1-based) whenever the phase
    ``t * rate * dt / 1000`` crosses an integer, so a pixel fires exactly
    ``floor(T * rate * dt / 1000)`` times. The Poisson scheme draws an
    independent Bernoulli(rate * dt / 1000) per step from ``rng``, or from a
    generator seeded with ``cfg.seed`` when ``rng`` is None.
    """
    x = np.asarray(pixels, dtype=np.float64)
    if np.any(x < 0) or np.any(x > 1) or np.any(np.isnan(x)):
        raise ValueError("pixel values must lie in [0, 1]")
    single = x.ndim == 1
    x = x.reshape(1, -1) if single else x.reshape(x.shape[0], -1)
    r = rates(x, cfg) * cfg.dt  # spikes per 1000 steps
    if cfg.scheme == "deterministic":
        t = np.arange(cfg.T + 1, dtype=np.float64)[None, :, None]
        # multiply before dividing so integer crossings land exactly
        phase = np.floor(r[:, None, :] * t / 1000.0)
        out = (np.diff(phase, axis=1) > 0).astype(np.int8)
    else:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        p = r / 1000.0
        out = (rng.random((x.shape[0], cfg.T, x.shape[1])) < p[:, None, :]).astype(np.int8)
    return out[0] if single else out
