"""Server-side aggregation rules: weighted mean, Krum and trimmed mean.

Every rule is a pure function of the round's uploads. Ties are always broken
toward the lowest client id.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .numkit import pairwise_distances

WEIGHT_TOL = 1e-12
RULES = ("mean", "krum", "trimmed-mean")


class KrumGuaranteeWarning(UserWarning):
    pass


@dataclass
class ClientUpdate:
    client_id: int
    params: np.ndarray
    weight: float = 1.0


@dataclass
class AggregationOutcome:
    global_params: np.ndarray
    selected_id: int | None = None
    scores: dict[int, float] | None = None


@dataclass(frozen=True)
class AggregationRule:
    """Rule name plus the server's assumed compromised count ``m`` (Krum) or
    trim count ``k`` (trimmed mean)."""

    name: str = "mean"
    m: int | None = None
    k: int | None = None

    def __post_init__(self):
        if self.name not in RULES:
            raise ValueError(f"unknown aggregation rule {self.name!r}; expected one of {RULES}")


def _stack(updates: list[ClientUpdate]) -> np.ndarray:
    if not updates:
        raise ValueError("no updates to aggregate")
    dims = {u.params.shape for u in updates}
    if len(dims) != 1:
        raise ValueError(f"updates disagree on dimension: {sorted(dims)}")
    return np.stack([np.asarray(u.params, dtype=np.float64) for u in updates])


def aggregate_mean(updates: list[ClientUpdate]) -> AggregationOutcome:
    """``sum_i p_i theta_i`` accumulated in list order."""
    _stack(updates)
    total = sum(u.weight for u in updates)
    if abs(total - 1.0) > WEIGHT_TOL:
        raise ValueError(f"weights sum to {total!r}, expected 1")
    out = np.zeros_like(updates[0].params, dtype=np.float64)
    for u in updates:
        out = out + u.weight * u.params
    return AggregationOutcome(out)


def _neighbour_count(num_updates: int, m: int) -> int:
    k = num_updates - m - 2
    if k < 1:
        raise ValueError(f"Krum needs U - m - 2 >= 1 (U={num_updates}, m={m})")
    return k


def krum_scores(updates: list[ClientUpdate] | np.ndarray, m: int) -> np.ndarray:
    """Score of every update: summed distance to its ``U - m - 2`` nearest others.

    Accepts either client updates or an already stacked ``U x d`` matrix.
    """
    points = updates if isinstance(updates, np.ndarray) else _stack(updates)
    k = _neighbour_count(points.shape[0], m)
    dist = pairwise_distances(points)
    np.fill_diagonal(dist, np.inf)
    # sequential sum in ascending order, so tied scores compare equal bit for bit
    return np.cumsum(np.sort(dist, axis=1)[:, :k], axis=1)[:, -1]


def krum_score(i: int, updates: list[ClientUpdate], m: int) -> float:
    """Krum score of the update whose ``client_id`` is ``i``."""
    for pos, u in enumerate(updates):
        if u.client_id == i:
            return float(krum_scores(updates, m)[pos])
    raise KeyError(f"no update from client {i}")


def aggregate_krum(updates: list[ClientUpdate], m: int) -> AggregationOutcome:
    scores = krum_scores(updates, m)
    n = len(updates)
    if m >= (n - 2) / 2:
        warnings.warn(
            f"Krum with m={m} of U={n} clients is outside its guarantee (m < (U-2)/2)",
            KrumGuaranteeWarning,
            stacklevel=2,
        )
    ids = np.array([u.client_id for u in updates])
    best = scores.min()
    winner = int(ids[scores == best].min())
    chosen = next(u for u in updates if u.client_id == winner)
    return AggregationOutcome(
        np.array(chosen.params, dtype=np.float64, copy=True),
        selected_id=winner,
        scores={int(i): float(s) for i, s in zip(ids, scores)},
    )


def aggregate_trimmed_mean(updates: list[ClientUpdate], k: int) -> AggregationOutcome:
    """Coordinate-wise mean after dropping the ``k`` largest and ``k`` smallest values."""
    points = _stack(updates)
    n = points.shape[0]
    if k < 0 or 2 * k >= n:
        raise ValueError(f"trimmed mean needs 0 <= 2k < U (k={k}, U={n})")
    kept = np.sort(points, axis=0)[k:n - k]
    total = kept[0].copy()
    for row in kept[1:]:
        total += row
    return AggregationOutcome(total / (n - 2 * k))


def aggregate(rule: AggregationRule, updates: list[ClientUpdate]) -> AggregationOutcome:
    if rule.name == "mean":
        return aggregate_mean(updates)
    if rule.name == "krum":
        return aggregate_krum(updates, rule.m if rule.m is not None else 0)
    return aggregate_trimmed_mean(updates, rule.k if rule.k is not None else 0)
