"""Vector primitives, box projection and seeded random streams.

Parameter vectors are plain 1-D ``float64`` numpy arrays. Randomness comes
from numpy's PCG64 bit generator; every consumer derives its own stream from
a root seed plus integer keys (trial, round, client, purpose) so that results
do not depend on call order across clients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BOUND = 10.0


def as_param_vector(values) -> np.ndarray:
    """Copy ``values`` into a finite 1-D float64 array."""
    vec = np.array(values, dtype=np.float64).reshape(-1)
    if vec.size == 0:
        raise ValueError("parameter vector must have dim >= 1")
    if not np.all(np.isfinite(vec)):
        raise ValueError("parameter vector contains NaN or Inf")
    return vec


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def euclidean_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_dims(a, b)
    return float(np.linalg.norm(a - b))


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix of the rows of ``points``.

    Differences are formed explicitly (no Gram-matrix shortcut) so the
    diagonal is exactly zero and identical rows are at distance exactly 0.
    """
    points = np.asarray(points, dtype=np.float64)
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned feasible set; ``lo``/``hi`` may be scalars or arrays."""

    lo: float | np.ndarray = -DEFAULT_BOUND
    hi: float | np.ndarray = DEFAULT_BOUND

    def __post_init__(self):
        if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise ValueError("BoxDomain requires lo <= hi coordinate-wise")

    @classmethod
    def symmetric(cls, bound: float = DEFAULT_BOUND) -> "BoxDomain":
        return cls(-float(bound), float(bound))

    def contains(self, v: np.ndarray) -> bool:
        return bool(np.all(v >= self.lo) and np.all(v <= self.hi))


def project_box(v, dom: BoxDomain) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    for bound in (dom.lo, dom.hi):
        b = np.asarray(bound)
        if b.ndim and b.shape != v.shape:
            raise ValueError(f"dimension mismatch: {v.shape} vs bound {b.shape}")
    return np.clip(v, dom.lo, dom.hi)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *keys)``.

    Uses SeedSequence spawn keys, so streams for different key tuples are
    statistically independent and stable across platforms.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *keys: int) -> int:
    """64-bit integer seed for ``(seed, *keys)``, itself usable with ``substream``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0])


def clipped_gaussian_direction(dim: int, sigma: float, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Return ``eps * n / ||n||`` with ``n ~ N(0, sigma^2 I)``."""
    if dim < 1 or sigma <= 0 or eps <= 0:
        raise ValueError("need dim >= 1, sigma > 0, eps > 0")
    while True:
        n = rng.normal(0.0, sigma, size=dim)
        norm = np.linalg.norm(n)
        if norm > 0:
            # unit vector first, so a 1-D draw lands exactly on +-eps
            return (n / norm) * eps
