"""Shared types, seeded random streams and small geometric helpers."""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(ValueError):
    """A configuration value is outside its allowed domain."""


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

RngStream = np.random.Generator


def _label_key(label: str | int) -> int:
    if isinstance(label, int):
        return label
    return zlib.crc32(label.encode("utf-8"))


def rng_stream(seed: int, *labels: str | int) -> RngStream:
    """Counter-based (Philox) generator for ``seed`` and an optional label path.

    Streams with different labels are statistically independent; identical
    seed and labels replay bit-exactly.
    """
    key = tuple(_label_key(lab) for lab in labels)
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------


@dataclass
class PointCloud:
    points: np.ndarray
    class_label: Optional[int] = None
    point_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise InvalidInputError(f"points must be N x 3 with N >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point coordinates must be finite")
        self.points = pts
        if self.class_label is not None:
            self.class_label = int(self.class_label)
        if self.point_labels is not None:
            lab = np.asarray(self.point_labels, dtype=np.int64)
            if lab.shape != (pts.shape[0],):
                raise InvalidInputError(
                    f"point_labels length {lab.shape} does not match N={pts.shape[0]}")
            self.point_labels = lab

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def copy(self) -> "PointCloud":
        return PointCloud(self.points.copy(), self.class_label,
                          None if self.point_labels is None else self.point_labels.copy())


@dataclass
class Batch:
    clouds: list
    purpose: str = "train"

    def __post_init__(self):
        if len(self.clouds) < 1:
            raise InvalidInputError("a batch needs at least one cloud")
        n = self.clouds[0].n
        if any(c.n != n for c in self.clouds):
            raise InvalidInputError("all clouds in a batch must share N")

    def __len__(self):
        return len(self.clouds)

    def points(self) -> np.ndarray:
        return np.stack([c.points for c in self.clouds])

    def class_labels(self) -> np.ndarray:
        return np.array([c.class_label for c in self.clouds], dtype=np.int64)

    def point_labels(self) -> np.ndarray:
        return np.stack([c.point_labels for c in self.clouds])


@dataclass
class FeatureBatch:
    values: np.ndarray
    layer_id: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] < 1:
            raise InvalidInputError(f"feature batch must be B x N x d, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("features must be finite")
        self.values = v


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center the cloud on its centroid and scale the farthest point to norm 1."""
    pts = np.asarray(cloud.points, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("non-finite coordinates")
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt((centered ** 2).sum(axis=1)).max()
    if radius > 0:
        centered = centered / radius
    else:
        centered = np.zeros_like(centered)
    return PointCloud(centered, cloud.class_label,
                      None if cloud.point_labels is None else cloud.point_labels.copy())


def one_hot(label: int, num_classes: int) -> np.ndarray:
    if not 0 <= label < num_classes:
        raise InvalidInputError(f"label {label} outside [0, {num_classes})")
    v = np.zeros(num_classes)
    v[label] = 1.0
    return v


def pairwise_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between the rows of ``a`` (M x d) and ``b`` (K x d).

    Uses explicit differences rather than the ``|a|^2 - 2ab + |b|^2`` expansion so
    the result is exact for coincident rows (zero diagonal) and never negative.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def batched_sq_dist(x: np.ndarray) -> np.ndarray:
    """Self distances for every item of a B x N x d array (B x N x N)."""
    sq = (x * x).sum(-1)
    d = sq[:, :, None] + sq[:, None, :] - 2.0 * np.matmul(x, x.transpose(0, 2, 1))
    np.maximum(d, 0.0, out=d)
    return d


def knn_indices(dist: np.ndarray, k: int, exclude_self: bool = True) -> np.ndarray:
    """Indices of the ``k`` smallest entries per row of ``dist`` (..., N, N).

    Ties go to the lowest index (stable sort).
    """
    d = np.array(dist, dtype=np.float64, copy=True)
    n = d.shape[-1]
    if exclude_self:
        idx = np.arange(n)
        d[..., idx, idx] = np.inf
    if k >= n:
        return np.argsort(d, axis=-1, kind="stable")[..., :k]
    # partial selection reproducing stable_argsort(d)[..., :k] exactly
    kth = np.partition(d, k - 1, axis=-1)[..., k - 1:k]
    less = d < kth
    tied = d == kth
    room = k - less.sum(axis=-1, keepdims=True)
    chosen = less | (tied & (np.cumsum(tied, axis=-1) <= room))
    cand = np.argsort(~chosen, axis=-1, kind="stable")[..., :k]
    order = np.argsort(np.take_along_axis(d, cand, -1), axis=-1, kind="stable")
    return np.take_along_axis(cand, order, -1)


def stack_clouds(clouds: Sequence[PointCloud]) -> np.ndarray:
    return np.stack([c.points for c in clouds])
