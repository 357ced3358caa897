"""Synthetic labelled shapes, datasets and the PCB1 / text point-cloud formats."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import ConfigError, InvalidInputError, PointCloud, RngStream, normalize_unit_sphere, rng_stream

FAMILIES = ("sphere", "cube", "cylinder", "torus")
PARTS_PER_FAMILY = {"sphere": 2, "cube": 3, "cylinder": 2, "torus": 2}


@dataclass
class ShapeSpec:
    """Generator parameters for one shape family.

    ``size_jitter`` is the relative spread of the family's proportions (0
    gives the canonical shape); ``rotation_jitter`` is the largest random
    rotation in degrees, about a uniformly random axis.
    """

    family: str
    n_points: int = 256
    size_jitter: float = 0.2
    rotation_jitter: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidInputError(f"unknown shape family {self.family!r}; choose from {FAMILIES}")
        if self.n_points < 8:
            raise InvalidInputError("a shape needs at least 8 points")
        if not (math.isfinite(self.size_jitter) and math.isfinite(self.rotation_jitter)):
            raise InvalidInputError("jitter ranges must be finite")
        if not 0 <= self.size_jitter < 1:
            raise InvalidInputError("size_jitter must lie in [0, 1)")


def _jitter(rng: RngStream, base: float, spread: float) -> float:
    return base * (1.0 + rng.uniform(-spread, spread)) if spread > 0 else base


def _sample_sphere(n, rng, spread):
    r = _jitter(rng, 1.0, spread)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pts = r * v
    return pts, (pts[:, 2] < 0).astype(np.int64)


def _sample_box(n, rng, spread):
    half = np.array([_jitter(rng, 1.0, spread) for _ in range(3)])
    # face areas: pair of faces normal to axis a has area 2 * (4 * h_b * h_c)
    area = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=area / area.sum())
    sign = rng.choice((-1.0, 1.0), size=n)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    pts[np.arange(n), axis] = sign * half[axis]
    return pts, axis.astype(np.int64)


def _sample_cylinder(n, rng, spread):
    radius = _jitter(rng, 0.6, spread)
    half_h = _jitter(rng, 0.8, spread)
    side_area = 2 * math.pi * radius * (2 * half_h)
    cap_area = 2 * math.pi * radius ** 2
    on_cap = rng.random(n) < cap_area / (side_area + cap_area)
    theta = rng.uniform(0, 2 * math.pi, size=n)
    rr = np.where(on_cap, radius * np.sqrt(rng.random(n)), radius)
    z = np.where(on_cap, rng.choice((-half_h, half_h), size=n), rng.uniform(-half_h, half_h, size=n))
    pts = np.stack([rr * np.cos(theta), rr * np.sin(theta), z], axis=1)
    return pts, on_cap.astype(np.int64)


def _sample_torus(n, rng, spread):
    major = _jitter(rng, 1.0, spread)
    minor = _jitter(rng, 0.35, spread)
    # surface density is proportional to (R + r cos(phi)); rejection sample phi
    phi = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.uniform(0, 2 * math.pi, size=2 * (n - filled))
        accept = rng.random(cand.size) < (major + minor * np.cos(cand)) / (major + minor)
        got = cand[accept][: n - filled]
        phi[filled:filled + got.size] = got
        filled += got.size
    theta = rng.uniform(0, 2 * math.pi, size=n)
    ring = major + minor * np.cos(phi)
    pts = np.stack([ring * np.cos(theta), ring * np.sin(theta), minor * np.sin(phi)], axis=1)
    # part 0: outer ring, part 1: inner ring (closer to the axis than the tube centre)
    return pts, (np.cos(phi) < 0).astype(np.int64)


_SAMPLERS = {"sphere": _sample_sphere, "cube": _sample_box,
             "cylinder": _sample_cylinder, "torus": _sample_torus}


def random_rotation(rng: RngStream, max_degrees: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(-max_degrees, max_degrees))
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def gen_shape(spec: ShapeSpec, rng: RngStream, normalize: bool = True) -> PointCloud:
    """Sample ``spec.n_points`` points uniformly on a shape surface.

    ``class_label`` is the family's index in :data:`FAMILIES`; part labels are
    family-local (sphere: z<0 hemisphere is 1; cube: axis of the face; cylinder:
    caps are 1; torus: inner ring is 1).
    """
    pts, parts = _SAMPLERS[spec.family](spec.n_points, rng, spec.size_jitter)
    if spec.rotation_jitter > 0:
        pts = pts @ random_rotation(rng, spec.rotation_jitter).T
    cloud = PointCloud(pts, FAMILIES.index(spec.family), parts)
    return normalize_unit_sphere(cloud) if normalize else cloud


@dataclass
class Dataset:
    name: str
    clouds: list
    num_classes: int
    num_part_classes: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    parts_by_class: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        both = np.concatenate([self.train_idx, self.test_idx])
        if len(np.unique(both)) != len(both) or set(both.tolist()) != set(range(len(self.clouds))):
            raise InvalidInputError("train/test splits must be disjoint and cover every cloud")
        for c in self.clouds:
            if c.class_label is not None and not 0 <= c.class_label < self.num_classes:
                raise InvalidInputError(f"class label {c.class_label} out of range")
            if c.point_labels is not None and (c.point_labels.min() < 0
                                               or c.point_labels.max() >= self.num_part_classes):
                raise InvalidInputError("part label out of range")

    def __len__(self):
        return len(self.clouds)

    def train_clouds(self) -> list:
        return [self.clouds[i] for i in self.train_idx]

    def test_clouds(self) -> list:
        return [self.clouds[i] for i in self.test_idx]

    def train_arrays(self):
        return clouds_to_arrays(self.train_clouds())

    def test_arrays(self):
        return clouds_to_arrays(self.test_clouds())


def clouds_to_arrays(clouds: Sequence[PointCloud]):
    """(B x N x 3 points, B class labels, B x N part labels or None)."""
    pts = np.stack([c.points for c in clouds])
    labels = np.array([-1 if c.class_label is None else c.class_label for c in clouds], dtype=np.int64)
    parts = None
    if all(c.point_labels is not None for c in clouds):
        parts = np.stack([c.point_labels for c in clouds])
    return pts, labels, parts


def part_layout(families: Sequence[str]) -> dict:
    """Class index -> list of global part ids, parts numbered family by family."""
    out, off = {}, 0
    for ci, fam in enumerate(families):
        k = PARTS_PER_FAMILY[fam]
        out[ci] = list(range(off, off + k))
        off += k
    return out


def build_dataset(families: Sequence[str] = FAMILIES, per_class: int = 250, n_points: int = 256,
                  split_fraction: float = 0.8, seed: int = 0, size_jitter: float = 0.2,
                  rotation_jitter: float = 0.0, name: str = "synthetic") -> Dataset:
    """Generate a stratified synthetic dataset.

    Class ids follow the order of ``families``; part ids are made global by
    offsetting each family's local labels (see :func:`part_layout`).
    """
    if not 0.0 < split_fraction < 1.0:
        raise ConfigError(f"split fraction must lie in (0, 1), got {split_fraction}")
    if per_class < 2:
        raise ConfigError("need at least 2 samples per class")
    for fam in families:
        if fam not in FAMILIES:
            raise ConfigError(f"unknown shape family {fam!r}; choose from {FAMILIES}")
    layout = part_layout(families)
    split_rng = rng_stream(seed, "data", "split")
    clouds, train_idx, test_idx = [], [], []
    n_train = int(round(split_fraction * per_class))
    n_train = min(max(n_train, 1), per_class - 1)
    for ci, fam in enumerate(families):
        rng = rng_stream(seed, "data", fam)
        spec = ShapeSpec(fam, n_points, size_jitter, rotation_jitter)
        start = len(clouds)
        for _ in range(per_class):
            c = gen_shape(spec, rng)
            clouds.append(PointCloud(c.points, ci, c.point_labels + layout[ci][0]))
        order = start + split_rng.permutation(per_class)
        train_idx.extend(sorted(order[:n_train].tolist()))
        test_idx.extend(sorted(order[n_train:].tolist()))
    return Dataset(name, clouds, len(families), sum(PARTS_PER_FAMILY[f] for f in families),
                   np.array(train_idx), np.array(test_idx), layout)


# ---------------------------------------------------------------------------
# PCB1 binary container
# ---------------------------------------------------------------------------

PCB_MAGIC = b"PCB1"
PCB_VERSION = 1
_HEADER = struct.Struct("<4sHIIII")
_ABSENT = 0xFFFF


class PCBFormatError(ValueError):
    pass


class BadMagicError(PCBFormatError):
    pass


class TruncatedError(PCBFormatError):
    pass


class VersionMismatchError(PCBFormatError):
    pass


def write_pcb(path, clouds: Sequence[PointCloud], num_classes: int, num_part_classes: int) -> None:
    """Write clouds sharing one N. Absent labels are stored as 0xFFFF."""
    clouds = list(clouds)
    if not clouds:
        raise InvalidInputError("nothing to write")
    n = clouds[0].n
    if any(c.n != n for c in clouds):
        raise InvalidInputError("PCB1 clouds must share N")
    parts = [_HEADER.pack(PCB_MAGIC, PCB_VERSION, len(clouds), n, num_classes, num_part_classes)]
    for c in clouds:
        parts.append(struct.pack("<H", _ABSENT if c.class_label is None else c.class_label))
        lab = np.full(n, _ABSENT) if c.point_labels is None else c.point_labels
        parts.append(np.asarray(lab, dtype="<u2").tobytes())
        parts.append(np.ascontiguousarray(c.points, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_pcb(path):
    """Return ``(clouds, num_classes, num_part_classes)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != PCB_MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {PCB_MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"truncated header: expected {_HEADER.size} bytes, got {len(raw)}")
    _, version, b, n, c1, c2 = _HEADER.unpack_from(raw)
    if version != PCB_VERSION:
        raise VersionMismatchError(f"unsupported PCB version {version} (reader supports {PCB_VERSION})")
    per = 2 + 2 * n + 24 * n
    expected = _HEADER.size + b * per
    if len(raw) < expected:
        raise TruncatedError(f"truncated payload: expected {expected} bytes, got {len(raw)}")
    clouds = []
    off = _HEADER.size
    for _ in range(b):
        (cl,) = struct.unpack_from("<H", raw, off)
        lab = np.frombuffer(raw, dtype="<u2", count=n, offset=off + 2).astype(np.int64)
        pts = np.frombuffer(raw, dtype="<f8", count=3 * n, offset=off + 2 + 2 * n).reshape(n, 3)
        clouds.append(PointCloud(pts.astype(np.float64), None if cl == _ABSENT else cl,
                                 None if np.all(lab == _ABSENT) else lab))
        off += per
    return clouds, c1, c2


def write_dataset(directory, dataset: Dataset) -> tuple:
    """Write ``train.pcb`` and ``test.pcb`` plus a small ``dataset.txt`` layout file."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_pcb(d / "train.pcb", dataset.train_clouds(), dataset.num_classes, dataset.num_part_classes)
    write_pcb(d / "test.pcb", dataset.test_clouds(), dataset.num_classes, dataset.num_part_classes)
    layout = ";".join(f"{k}:{','.join(map(str, v))}" for k, v in sorted(dataset.parts_by_class.items()))
    (d / "dataset.txt").write_text(f"name={dataset.name}\nparts={layout}\n")
    return d / "train.pcb", d / "test.pcb"


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    if not (d / "train.pcb").exists() or not (d / "test.pcb").exists():
        raise FileNotFoundError(f"{d} does not contain train.pcb and test.pcb")
    train, c1, c2 = read_pcb(d / "train.pcb")
    test, _, _ = read_pcb(d / "test.pcb")
    name, layout = d.name, {}
    meta = d / "dataset.txt"
    if meta.exists():
        for line in meta.read_text().splitlines():
            key, _, val = line.partition("=")
            if key == "name":
                name = val
            elif key == "parts" and val:
                for item in val.split(";"):
                    k, _, ids = item.partition(":")
                    layout[int(k)] = [int(x) for x in ids.split(",")]
    if not layout:
        layout = {c: list(range(c2)) for c in range(c1)}
    clouds = train + test
    return Dataset(name, clouds, c1, c2, np.arange(len(train)),
                   np.arange(len(train), len(clouds)), layout)


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------


def write_pct(path, cloud: PointCloud, extra_header: Optional[dict] = None) -> None:
    """One point per line ``x y z [part]``, preceded by ``#class <id>``."""
    lines = []
    if cloud.class_label is not None:
        lines.append(f"#class {cloud.class_label}")
    for key, val in (extra_header or {}).items():
        lines.append(f"#{key} {val}")
    labels = cloud.point_labels
    for i, p in enumerate(cloud.points):
        row = " ".join(repr(float(v)) for v in p)
        if labels is not None:
            row += f" {int(labels[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_pct(path) -> PointCloud:
    cls, pts, labels = None, [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, val = line[1:].partition(" ")
            if key == "class":
                cls = int(val)
            continue
        fields = line.split()
        if len(fields) not in (3, 4):
            raise PCBFormatError(f"malformed point line: {line!r}")
        try:
            pts.append([float(v) for v in fields[:3]])
            if len(fields) == 4:
                labels.append(int(fields[3]))
        except ValueError as exc:
            raise PCBFormatError(f"malformed point line: {line!r}") from exc
    if labels and len(labels) != len(pts):
        raise PCBFormatError("part labels present on some lines only")
    return PointCloud(np.array(pts), cls, np.array(labels) if labels else None)
