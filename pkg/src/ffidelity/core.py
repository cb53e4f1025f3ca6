"""Tensor, mask and dataset data model shared by the rest of the package.

Inputs are ``t x d`` float arrays. Batches of inputs are stacked along a
leading axis, ``(n, t, d)``. Removed entries are set to 0.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "Dataset",
    "LabeledSample",
    "Mask",
    "RngStream",
    "as_sample",
    "as_scores",
    "count_for",
    "load_dataset",
    "mask_apply",
    "mask_complement_apply",
    "save_dataset",
    "topk_indices",
    "topk_mask",
]

# slack for floor() of products like 0.29 * 100 that land just below an integer
_FLOOR_EPS = 1e-9


def floor_count(x: float) -> int:
    return int(math.floor(x + _FLOOR_EPS))


def count_for(rho: float, td: int) -> int:
    """Convert a sparsity fraction into an element count, rounding halves up."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"sparsity fraction must lie in [0, 1], got {rho}")
    return min(td, int(math.floor(rho * td + 0.5 + _FLOOR_EPS)))


def as_sample(x) -> np.ndarray:
    """Validate a single ``t x d`` input and return it as a float array."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"expected a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("sample contains non-finite entries")
    return arr


def as_scores(s) -> np.ndarray:
    """Validate a score map (single or batched): finite and non-negative."""
    arr = np.asarray(s, dtype=float)
    if arr.ndim < 2:
        raise ValueError(f"score map must be at least 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("score map contains non-finite entries")
    if np.any(arr < 0):
        raise ValueError("score map contains negative entries")
    return arr


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary ``t x d`` selector. ``size`` is the number of ones."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        if not np.all((bits == 0) | (bits == 1)):
            raise ValueError("mask entries must be 0 or 1")
        bits = bits.astype(bool)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def size(self) -> int:
        return int(self.bits.sum())

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @classmethod
    def zeros(cls, t: int, d: int) -> "Mask":
        return cls(np.zeros((t, d), dtype=bool))

    @classmethod
    def ones(cls, t: int, d: int) -> "Mask":
        return cls(np.ones((t, d), dtype=bool))

    @classmethod
    def from_indices(cls, t: int, d: int, indices: Sequence[tuple[int, int]]) -> "Mask":
        bits = np.zeros((t, d), dtype=bool)
        for i, j in indices:
            bits[i, j] = True
        return cls(bits)

    def complement(self) -> "Mask":
        return Mask(~self.bits)

    def __eq__(self, other):
        return isinstance(other, Mask) and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return f"Mask(shape={self.shape}, size={self.size})"


def _bits(m) -> np.ndarray:
    return m.bits if isinstance(m, Mask) else np.asarray(m, dtype=bool)


def mask_apply(x, m) -> np.ndarray:
    """Keep the masked entries of ``x`` and zero the rest (``x * m``)."""
    x = np.asarray(x, dtype=float)
    bits = _bits(m)
    if x.shape[-2:] != bits.shape[-2:]:
        raise ValueError(f"shape mismatch: input {x.shape} vs mask {bits.shape}")
    return x * bits


def mask_complement_apply(x, m) -> np.ndarray:
    """Remove the masked entries of ``x`` (``x - x * m``)."""
    x = np.asarray(x, dtype=float)
    bits = _bits(m)
    if x.shape[-2:] != bits.shape[-2:]:
        raise ValueError(f"shape mismatch: input {x.shape} vs mask {bits.shape}")
    return x * ~bits


def rank_order(flat_scores: np.ndarray) -> np.ndarray:
    """Positions sorted by descending score along the last axis.

    The stable sort keeps tied scores in ascending row-major order.
    """
    return np.argsort(-np.asarray(flat_scores, dtype=float), axis=-1, kind="stable")


def topk_indices(s, k: int) -> list[tuple[int, int]]:
    """Indices of the ``k`` largest scores, ties broken by row-major position.

    >>> topk_indices([[0.9, 0.5], [0.3, 0.1]], 2)
    [(0, 0), (0, 1)]
    """
    scores = as_scores(s)
    if scores.ndim != 2:
        raise ValueError("topk_indices expects a single t x d score map")
    t, d = scores.shape
    if not 0 <= k <= t * d:
        raise ValueError(f"k={k} out of range [0, {t * d}]")
    order = rank_order(scores.ravel())[:k]
    return [(int(f // d), int(f % d)) for f in order]


def topk_mask(scores, k) -> np.ndarray:
    """Boolean top-``k`` selector for a single map or a batch ``(n, t, d)``.

    ``k`` may be a scalar or one count per batch entry.
    """
    scores = np.asarray(scores, dtype=float)
    shape = scores.shape
    flat = scores.reshape(-1, shape[-2] * shape[-1])
    td = flat.shape[1]
    ks = np.broadcast_to(np.asarray(k, dtype=int), (flat.shape[0],))
    if np.any(ks < 0) or np.any(ks > td):
        raise ValueError(f"k out of range [0, {td}]")
    ranks = np.empty_like(flat, dtype=int)
    np.put_along_axis(ranks, rank_order(flat), np.arange(td)[None, :], axis=1)
    return (ranks < ks[:, None]).reshape(shape)


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream keyed by ``(seed, stream)``.

    ``tag`` separates otherwise identical stream ids that must stay
    independent (e.g. the two removal sides of a metric).
    """

    seed: int
    stream: int = 0
    tag: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.tag, self.stream])
        )


@dataclass(frozen=True)
class LabeledSample:
    input: np.ndarray
    label: int


@dataclass
class Dataset:
    """Stacked inputs ``(n, t, d)`` with integer labels."""

    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.inputs.ndim != 3 or self.inputs.shape[0] == 0:
            raise ValueError(f"inputs must have shape (n, t, d) with n > 0, got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels must be one per sample")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if np.any(self.labels < 0) or np.any(self.labels >= self.class_count):
            raise ValueError("label outside [0, class_count)")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain non-finite entries")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.inputs.shape[1], self.inputs.shape[2]

    @property
    def td(self) -> int:
        return self.inputs.shape[1] * self.inputs.shape[2]

    @property
    def samples(self) -> Iterator[LabeledSample]:
        for x, y in zip(self.inputs, self.labels):
            yield LabeledSample(x, int(y))

    def subset(self, idx) -> "Dataset":
        """Rows ``idx``; per-sample arrays in ``meta`` are sliced alongside."""
        idx = np.asarray(idx)
        n = len(self.labels)
        meta = {k: v[idx] if isinstance(v, np.ndarray) and v.ndim and v.shape[0] == n else v
                for k, v in self.meta.items()}
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count, self.split, meta)


def save_dataset(data: Dataset, csv_path) -> None:
    """Write ``data`` as CSV plus a ``.json`` sidecar holding ``{t, d, class_count}``."""
    csv_path = Path(csv_path)
    t, d = data.shape
    header = ["label"] + [f"v_{i}_{j}" for i in range(t) for j in range(d)]
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, y in zip(data.inputs, data.labels):
            w.writerow([int(y)] + [repr(float(v)) for v in x.ravel()])
    sidecar = {"t": t, "d": d, "class_count": data.class_count}
    csv_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_dataset(csv_path, split: str = "eval") -> Dataset:
    csv_path = Path(csv_path)
    meta = json.loads(csv_path.with_suffix(".json").read_text())
    t, d, k = int(meta["t"]), int(meta["d"]), int(meta["class_count"])
    with csv_path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if len(header) != 1 + t * d or header[0] != "label":
        raise ValueError(f"{csv_path}: header does not match t={t}, d={d}")
    labels = np.array([int(r[0]) for r in body])
    inputs = np.array([[float(v) for v in r[1:]] for r in body]).reshape(-1, t, d)
    return Dataset(inputs, labels, k, split)
