"""Dense-array numerics shared by every other module.

Images, velocities and log-density grids are plain float64 ``ndarray``s laid
out row-major as (height, width, channels). Masks are boolean (height, width)
arrays. Random draws come from counter-based Philox streams derived from a
single run seed, one independent stream per (purpose, *keys).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# stream ids; each purpose gets a disjoint SeedSequence spawn key
STREAMS = {"init": 0, "rollout": 1, "env": 2, "fm": 3, "features": 4, "eval": 5}


class EmptyRegionError(ValueError):
    """Raised when a reduction is asked to average over an empty mask."""


@dataclass(frozen=True)
class RngState:
    """A seed plus a stream position.

    Two equal states always produce the same draws. ``position`` is folded
    into the spawn key, so advancing it gives a fresh, independent stream.
    """

    seed: int
    position: int = 0

    def generator(self, purpose: str = "init", *keys: int) -> np.random.Generator:
        key = (STREAMS[purpose], *[int(k) for k in keys], self.position)
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=key)
        return np.random.Generator(np.random.Philox(ss))

    def advance(self, n: int = 1) -> "RngState":
        return RngState(self.seed, self.position + n)


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Shorthand for ``RngState(seed).generator(purpose, *keys)``."""
    return RngState(seed).generator(purpose, *keys)


def seeded_gaussian(rng: np.random.Generator | RngState, shape) -> np.ndarray:
    """I.i.d. standard-normal grid. A ``Generator`` advances in place."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ValueError(f"empty shape {shape}")
    if isinstance(rng, RngState):
        rng = rng.generator("init")
    return rng.standard_normal(shape)


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, std: float) -> np.ndarray:
    """Elementwise log N(x; mean, std^2)."""
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if x.shape != mean.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {mean.shape}")
    z = (x - mean) / std
    return -LOG_SQRT_2PI - math.log(std) - 0.5 * z * z


def _pixel_weights(g: np.ndarray, m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=bool)
    if m.shape != g.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match grid {g.shape}")
    if not m.any():
        raise EmptyRegionError("mask selects no pixels")
    return m


def masked_mean(g: np.ndarray, m: np.ndarray) -> float:
    """Mean of ``g`` over the true pixels of ``m`` (all channels)."""
    g = np.asarray(g, dtype=np.float64)
    m = _pixel_weights(g, m)
    return float(g[m].mean())


def l1_mean(a: np.ndarray, b: np.ndarray, m: np.ndarray) -> float:
    """Mean absolute difference over masked pixels and channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    m = _pixel_weights(a, m)
    return float(np.abs(a[m] - b[m]).mean())
