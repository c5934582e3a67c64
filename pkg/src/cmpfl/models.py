"""Flat-parameter models trained by the clients.

Three predictors share one calling convention: a ``ModelSpec`` describes the
architecture and every function takes the parameters as one flat float64
vector. Layouts:

* ``linear-regression`` / ``linear-svm``: ``[w (d), b]``
* ``mlp``: ``[W1 (d*h, row-major d x h), b1 (h), W2 (h*C, row-major), b2 (C)]``

Gradients are analytic. The hinge and ReLU kinks use subgradient 0. Loss
values are summed with ``math.fsum`` so they do not depend on row order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numkit import BoxDomain, project_box

KINDS = ("linear-regression", "linear-svm", "mlp")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int = 1
    hidden_dim: int = 0
    # label variance used to normalise the regression cost
    target_variance: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.kind == "linear-regression" and self.num_classes != 1:
            raise ValueError("linear-regression uses num_classes=1")
        if self.kind == "linear-svm" and self.num_classes != 2:
            raise ValueError("linear-svm uses num_classes=2")
        if self.kind == "mlp" and (self.hidden_dim < 1 or self.num_classes < 2):
            raise ValueError("mlp needs hidden_dim >= 1 and num_classes >= 2")
        if self.target_variance <= 0:
            raise ValueError("target_variance must be positive")

    @property
    def is_classifier(self) -> bool:
        return self.kind != "linear-regression"

    @property
    def num_params(self) -> int:
        d = self.input_dim
        if self.kind == "mlp":
            h, c = self.hidden_dim, self.num_classes
            return d * h + h + h * c + c
        return d + 1


@dataclass
class Dataset:
    """Feature matrix in [0, 1] plus integer class ids or real targets."""

    features: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be an n x d matrix")
        labels = np.asarray(self.labels)
        if labels.dtype.kind in "iub":
            labels = labels.astype(np.int64)
        else:
            labels = labels.astype(np.float64)
        self.labels = labels.reshape(-1)
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("features and labels disagree on the number of rows")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def is_classification(self) -> bool:
        return self.labels.dtype.kind == "i"

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], dict(self.meta))

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        return Dataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )


@dataclass(frozen=True)
class TrainParams:
    epochs: int = 1
    lr: float = 0.1
    batch: int = 16


def _check(spec: ModelSpec, params: np.ndarray, features: np.ndarray) -> None:
    if params.shape != (spec.num_params,):
        raise ValueError(f"expected {spec.num_params} parameters for {spec.kind}, got {params.shape}")
    if features.shape[1] != spec.input_dim:
        raise ValueError(f"expected input_dim {spec.input_dim}, got {features.shape[1]}")


def _unpack_mlp(spec: ModelSpec, params: np.ndarray):
    d, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    i = 0
    w1 = params[i:i + d * h].reshape(d, h)
    i += d * h
    b1 = params[i:i + h]
    i += h
    w2 = params[i:i + h * c].reshape(h, c)
    i += h * c
    b2 = params[i:i + c]
    return w1, b1, w2, b2


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Zeros for the linear models; fan-in uniform weights for the MLP."""
    if spec.kind != "mlp":
        return np.zeros(spec.num_params)
    d, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    w1 = rng.uniform(-1 / np.sqrt(d), 1 / np.sqrt(d), size=d * h)
    w2 = rng.uniform(-1 / np.sqrt(h), 1 / np.sqrt(h), size=h * c)
    return np.concatenate([w1, np.zeros(h), w2, np.zeros(c)])


def _svm_targets(labels: np.ndarray) -> np.ndarray:
    return np.where(labels > 0, 1.0, -1.0)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def decision_function(spec: ModelSpec, params, features) -> np.ndarray:
    """Raw model output: real score for linear models, logits for the MLP."""
    params = np.asarray(params, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    _check(spec, params, features)
    if spec.kind == "mlp":
        w1, b1, w2, b2 = _unpack_mlp(spec, params)
        hidden = np.maximum(features @ w1 + b1, 0.0)
        return hidden @ w2 + b2
    return features @ params[:-1] + params[-1]


def loss(spec: ModelSpec, params, data: Dataset) -> float:
    value, _ = _loss_and_grad(spec, params, data, need_grad=False)
    return value


def loss_gradient(spec: ModelSpec, params, data: Dataset) -> np.ndarray:
    _, grad = _loss_and_grad(spec, params, data, need_grad=True)
    return grad


def _loss_and_grad(spec: ModelSpec, params, data: Dataset, need_grad: bool):
    params = np.asarray(params, dtype=np.float64)
    x, y = data.features, data.labels
    _check(spec, params, x)
    n = x.shape[0]

    if spec.kind == "linear-regression":
        resid = x @ params[:-1] + params[-1] - y
        value = math.fsum(resid * resid) / (n * spec.target_variance)
        if not need_grad:
            return value, None
        g = (2.0 / (n * spec.target_variance)) * resid
        return value, np.concatenate([x.T @ g, [g.sum()]])

    if spec.kind == "linear-svm":
        t = _svm_targets(y)
        margin = t * (x @ params[:-1] + params[-1])
        value = math.fsum(np.maximum(0.0, 1.0 - margin)) / n
        if not need_grad:
            return value, None
        active = margin < 1.0
        g = np.where(active, -t, 0.0) / n
        return value, np.concatenate([x.T @ g, [g.sum()]])

    w1, b1, w2, b2 = _unpack_mlp(spec, params)
    pre = x @ w1 + b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ w2 + b2
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    value = math.fsum(log_norm - shifted[rows, y]) / n
    if not need_grad:
        return value, None
    dlogits = _softmax(logits)
    dlogits[rows, y] -= 1.0
    dlogits /= n
    gw2 = hidden.T @ dlogits
    gb2 = dlogits.sum(axis=0)
    dpre = (dlogits @ w2.T) * (pre > 0.0)
    gw1 = x.T @ dpre
    gb1 = dpre.sum(axis=0)
    return value, np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


def predict(spec: ModelSpec, params, features) -> np.ndarray:
    """Class ids for classifiers (argmax, ties to the lower id; SVM score 0 -> class 1)."""
    out = decision_function(spec, params, features)
    if spec.kind == "linear-regression":
        return out
    if spec.kind == "linear-svm":
        return (out >= 0.0).astype(np.int64)
    return np.argmax(out, axis=1).astype(np.int64)


def local_train(
    spec: ModelSpec,
    start,
    data: Dataset,
    train: TrainParams,
    rng: np.random.Generator,
    domain: BoxDomain | None = None,
) -> np.ndarray:
    """Mini-batch SGD from ``start``, projecting into ``domain`` after every step."""
    domain = domain or BoxDomain()
    params = np.array(start, dtype=np.float64)
    n = len(data)
    if train.epochs <= 0 or train.lr == 0 or n == 0:
        return params
    batch = max(1, min(train.batch, n))
    for _ in range(train.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            part = Dataset.__new__(Dataset)
            part.features, part.labels, part.meta = data.features[idx], data.labels[idx], {}
            params = project_box(params - train.lr * loss_gradient(spec, params, part), domain)
    return params
