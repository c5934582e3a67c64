"""Slow, obviously-correct reference implementations used for cross-checks.

Everything here loops in plain Python over small instances, independent of
the vectorised code paths it checks.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def _dist(a, b) -> float:
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def krum_select_bruteforce(points, ids, m: int) -> int:
    """Client id Krum picks, by enumerating every neighbour subset.

    A point's score is the smallest summed distance over all subsets of
    ``U - m - 2`` other points; the lowest score wins, ties to the lowest id.
    """
    points = [list(p) for p in points]
    n = len(points)
    k = n - m - 2
    if k < 1:
        raise ValueError("need U - m - 2 >= 1")
    best = None
    for i in range(n):
        others = [j for j in range(n) if j != i]
        score = min(
            sum(sorted(_dist(points[i], points[j]) for j in sub)) for sub in itertools.combinations(others, k)
        )
        key = (score, ids[i])
        if best is None or key < best:
            best = key
    return int(best[1])


def trimmed_mean_bruteforce(points, k: int) -> list[float]:
    """Per coordinate: sort, drop ``k`` from each end, sum the rest in order, divide."""
    n = len(points)
    if 2 * k >= n:
        raise ValueError("need 2k < U")
    out = []
    for c in range(len(points[0])):
        column = sorted(float(p[c]) for p in points)[k:n - k]
        total = column[0]
        for v in column[1:]:
            total += v
        out.append(total / (n - 2 * k))
    return out


def min_benign_score_bruteforce(points, M: int, U: int) -> float:
    """Benign-only Krum score minimum, by subset enumeration."""
    k = U - M - 2
    n = len(points)
    if k < 1 or k > n - 1:
        raise ValueError("need 1 <= U - M - 2 <= B - 1")
    best = math.inf
    for i in range(n):
        others = [j for j in range(n) if j != i]
        for sub in itertools.combinations(others, k):
            best = min(best, sum(_dist(points[i], points[j]) for j in sub))
    return best


def random_instance(rng: np.random.Generator, max_clients: int = 8, max_dim: int = 5, ties: bool = True):
    """Random small point set; with ``ties`` some coordinates come from a coarse
    grid so exact score ties are exercised."""
    n = int(rng.integers(4, max_clients + 1))
    d = int(rng.integers(1, max_dim + 1))
    if ties and rng.random() < 0.3:
        pts = rng.integers(-2, 3, size=(n, d)).astype(np.float64)
    else:
        pts = rng.normal(0.0, 1.0, size=(n, d))
    m = int(rng.integers(0, n - 2))
    return pts, m
