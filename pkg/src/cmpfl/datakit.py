"""Datasets for the simulator: synthesis, IDX/CSV ingestion, client partitioning
and label transforms."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Dataset

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Malformed IDX file; ``path`` and byte ``offset`` locate the problem."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path} @ byte {offset}: {message}")


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass(frozen=True)
class LabelMap:
    """Total map on class ids ``0 .. len(mapping)-1``."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        c = len(self.mapping)
        if c == 0 or any(not 0 <= m < c for m in self.mapping):
            raise ValueError("label map must send [0, C) into [0, C)")

    @property
    def num_classes(self) -> int:
        return len(self.mapping)

    @classmethod
    def identity(cls, num_classes: int) -> "LabelMap":
        return cls(tuple(range(num_classes)))

    def apply(self, labels) -> np.ndarray:
        return np.asarray(self.mapping, dtype=np.int64)[np.asarray(labels, dtype=np.int64)]

    @property
    def is_bijection(self) -> bool:
        return sorted(self.mapping) == list(range(len(self.mapping)))

    def inverse(self) -> "LabelMap":
        if not self.is_bijection:
            raise ValueError("label map is not invertible")
        inv = [0] * len(self.mapping)
        for src, dst in enumerate(self.mapping):
            inv[dst] = src
        return LabelMap(tuple(inv))


def cyclic_target_map(num_classes: int) -> LabelMap:
    """Attacker-desired relabelling ``l -> (l - 1) mod C`` (0->9, 1->0, ... for digits)."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    return LabelMap(tuple((l - 1) % num_classes for l in range(num_classes)))


def flip_labels(data: Dataset, label_map: LabelMap) -> Dataset:
    if not data.is_classification:
        raise ValueError("label flipping needs class labels")
    return Dataset(data.features, label_map.apply(data.labels), dict(data.meta))


def parity_labels(data: Dataset) -> Dataset:
    """Binary even(0)/odd(1) relabelling used by the SVM task."""
    return Dataset(data.features, data.labels % 2, dict(data.meta))


def _minmax(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    span[span == 0] = 1.0
    return (x - lo) / span


def gen_regression(n: int, d: int, noise_sigma: float, rng: np.random.Generator) -> Dataset:
    """Uniform features in [0, 1] and ``y = w.x + b + noise``; (w, b) kept in ``meta``."""
    if n < 1 or d < 1:
        raise ValueError("need n >= 1 and d >= 1")
    w = rng.normal(0.0, 1.0, size=d)
    b = float(rng.normal(0.0, 1.0))
    x = rng.uniform(0.0, 1.0, size=(n, d))
    y = x @ w + b
    if noise_sigma > 0:
        y = y + rng.normal(0.0, noise_sigma, size=n)
    return Dataset(x, y.astype(np.float64), {"w": w, "b": b})


def gen_classification(
    n: int, d: int, num_classes: int, separation: float, rng: np.random.Generator
) -> Dataset:
    """Unit-variance Gaussian blobs, one per class.

    Centres are random directions rescaled so the closest pair sits exactly
    ``separation`` apart. Labels cycle through the classes before shuffling,
    so every class count is within one of ``n / num_classes``. Features are
    min-max scaled to [0, 1] afterwards.
    """
    if num_classes < 1 or n < num_classes:
        raise ValueError("need n >= num_classes >= 1")
    labels = rng.permutation(np.arange(n) % num_classes)
    centres = rng.normal(0.0, 1.0, size=(num_classes, d))
    if num_classes > 1:
        diff = centres[:, None, :] - centres[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        closest = dist[~np.eye(num_classes, dtype=bool)].min()
        centres *= separation / closest
    else:
        centres[:] = 0.0
    x = centres[labels] + rng.normal(0.0, 1.0, size=(n, d))
    return Dataset(_minmax(x), labels.astype(np.int64))


def split(data: Dataset, n_test: int, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    order = rng.permutation(len(data))
    return data.subset(order[n_test:]), data.subset(order[:n_test])


# -- IDX ------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(path, expected_magic: int) -> tuple[tuple[int, ...], np.ndarray]:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxTruncatedError(path, len(raw), "file shorter than the 4-byte magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(path, 0, f"magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(path, len(raw), f"header needs {header} bytes")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) < header + size:
        raise IdxTruncatedError(path, len(raw), f"payload needs {header + size} bytes")
    body = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header)
    return dims, body


def load_idx(images_path, labels_path) -> Dataset:
    """Read an MNIST-style image/label IDX pair; pixels scaled to [0, 1]."""
    img_dims, pixels = _parse_idx(images_path, IDX_IMAGES_MAGIC)
    (n_labels,), labels = _parse_idx(labels_path, IDX_LABELS_MAGIC)
    if img_dims[0] != n_labels:
        raise IdxCountMismatchError(
            labels_path, 4, f"{n_labels} labels but {images_path} holds {img_dims[0]} images"
        )
    features = pixels.reshape(img_dims[0], -1).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 ``images`` (n x rows x cols) and ``labels`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(">3I", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_csv(path, target: str | int = -1, normalize: bool = True) -> Dataset:
    """Numeric CSV with a header row; ``target`` names or indexes the label column."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: need a header and at least one data row")
    header = rows[0]
    col = header.index(target) if isinstance(target, str) else target % len(header)
    try:
        table = np.array([[float(v) for v in row] for row in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric cell ({exc})") from None
    y = table[:, col]
    x = np.delete(table, col, axis=1)
    return Dataset(_minmax(x) if normalize else x, y)


# -- partitioning -----------------------------------------------------------

@dataclass
class Partition:
    assignments: list[np.ndarray]
    weights: np.ndarray

    @property
    def num_clients(self) -> int:
        return len(self.assignments)


def regression_strata(data: Dataset, bins: int) -> np.ndarray:
    """Quantile bin ids of real targets, so regression data can be skewed too."""
    edges = np.quantile(data.labels, np.linspace(0, 1, bins + 1)[1:-1])
    return np.searchsorted(edges, data.labels, side="right").astype(np.int64)


def partition_noniid(
    labels, num_clients: int, p: float, rng: np.random.Generator, num_classes: int | None = None
) -> Partition:
    """Home-group label skew.

    Client ``k`` belongs to group ``k mod C``. An example of class ``l`` goes
    to a uniformly chosen client of group ``l`` with probability ``p`` and to
    a uniformly chosen client overall otherwise.
    """
    if isinstance(labels, Dataset):
        if not labels.is_classification:
            raise ValueError("partition_noniid needs class labels; use regression_strata")
        labels = labels.labels
    labels = np.asarray(labels, dtype=np.int64)
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    c = int(num_classes if num_classes is not None else labels.max() + 1)
    if c > num_clients:
        raise ValueError(f"{c} class groups cannot be spread over {num_clients} clients")
    n = labels.shape[0]
    sizes = np.array([len(range(g, num_clients, c)) for g in range(c)])

    home = rng.random(n) < p
    slot = np.floor(rng.random(n) * sizes[labels]).astype(np.int64)
    anywhere = rng.integers(0, num_clients, size=n)
    # the slot-th member of group l is client l + slot * c
    owner = np.where(home, labels + slot * c, anywhere)

    assignments = [np.flatnonzero(owner == k) for k in range(num_clients)]
    weights = np.array([len(a) for a in assignments], dtype=np.float64) / n
    return Partition(assignments, weights)
