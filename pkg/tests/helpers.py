"""Shared fixtures-free helpers for the test suite."""

from __future__ import annotations

import numpy as np

from cmpfl.models import Dataset, ModelSpec, init_params, loss, loss_gradient


def random_model_instance(kind: str, rng: np.random.Generator, n: int = 12):
    """Random spec, parameters and data for one model kind."""
    d = int(rng.integers(1, 6))
    if kind == "linear-regression":
        spec = ModelSpec(kind, d, target_variance=float(rng.uniform(0.5, 2.0)))
        labels = rng.normal(size=n)
    elif kind == "linear-svm":
        spec = ModelSpec(kind, d, num_classes=2)
        labels = rng.integers(0, 2, size=n)
    else:
        c = int(rng.integers(2, 5))
        spec = ModelSpec(kind, d, num_classes=c, hidden_dim=int(rng.integers(1, 6)))
        labels = rng.integers(0, c, size=n)
    params = init_params(spec, rng) + rng.normal(0.0, 0.5, size=spec.num_params)
    data = Dataset(rng.uniform(0.0, 1.0, size=(n, d)), labels)
    return spec, params, data


def finite_difference_error(spec: ModelSpec, params: np.ndarray, data: Dataset, h: float = 1e-5) -> float:
    """Relative error between the analytic gradient and central differences."""
    analytic = loss_gradient(spec, params, data)
    numeric = np.empty_like(params)
    for j in range(params.size):
        step = np.zeros_like(params)
        step[j] = h
        numeric[j] = (loss(spec, params + step, data) - loss(spec, params - step, data)) / (2 * h)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def full_context(benign: np.ndarray, M: int, target, global_model=None, rule=None, honest=None):
    """Full-knowledge context with compromised ids ``0..M-1`` and equal weights."""
    from cmpfl.aggregation import AggregationRule, ClientUpdate
    from cmpfl.attacks import AttackContext, KnowledgeLevel

    benign = np.atleast_2d(np.asarray(benign, dtype=np.float64))
    U = benign.shape[0] + M
    w = 1.0 / U
    honest = benign[:1].repeat(M, axis=0) if honest is None else np.atleast_2d(honest)
    ups = [ClientUpdate(i, honest[i].copy(), w) for i in range(M)]
    ups += [ClientUpdate(M + j, benign[j].copy(), w) for j in range(benign.shape[0])]
    return AttackContext(
        KnowledgeLevel.FULL,
        tuple(range(M)),
        np.asarray(global_model if global_model is not None else benign.mean(axis=0), dtype=np.float64),
        U,
        visible_updates=ups,
        weights={i: w for i in range(U)},
        target=np.asarray(target, dtype=np.float64),
        aggregation_known=rule or AggregationRule("krum", m=M),
    )


def krum_instance(rng: np.random.Generator, U: int = 20, M: int = 4, max_dim: int = 100):
    """Clustered benign models, a target off the cluster and a broadcast model at its centre."""
    d = int(rng.integers(1, max_dim + 1))
    centre = rng.normal(0.0, 1.0, size=d)
    benign = centre + rng.normal(0.0, 0.1, size=(U - M, d))
    target = centre + rng.normal(0.0, 2.0, size=d)
    return full_context(benign, M, target, global_model=centre)
