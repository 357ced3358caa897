"""Test-time attacks (point drop, noise, scaling, rotation) and accuracy / mIoU metrics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import InvalidInputError, PointCloud, RngStream

ATTACK_KINDS = ("point-drop", "gaussian-noise", "scale", "rotate")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    value: float
    axis: Optional[str] = None  # rotate only

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise InvalidInputError(f"unknown attack {self.kind!r}")
        if self.kind == "point-drop" and not 0.0 <= self.value < 1.0:
            raise InvalidInputError("drop ratio must lie in [0, 1)")
        if self.kind == "gaussian-noise" and not self.value > 0:
            raise InvalidInputError("noise variance must be positive")
        if self.kind == "scale" and not self.value > 0:
            raise InvalidInputError("scale factor must be positive")
        if self.kind == "rotate" and (self.axis or "").upper() not in ("X", "Y", "Z"):
            raise InvalidInputError("rotation axis must be X, Y or Z")

    @property
    def label(self) -> str:
        if self.kind == "rotate":
            return f"{self.axis.upper()}-rotation({self.value:g})"
        return {"point-drop": "PointDrop", "gaussian-noise": "Noise var",
                "scale": "Scale"}[self.kind] + f"({self.value:g})"

    @classmethod
    def parse(cls, text: str) -> "AttackSpec":
        """``drop:0.2``, ``noise:0.002``, ``scale:1.2`` or ``rotate:x:30``."""
        bits = text.strip().split(":")
        alias = {"drop": "point-drop", "noise": "gaussian-noise"}
        kind = alias.get(bits[0], bits[0])
        try:
            if kind == "rotate":
                return cls(kind, float(bits[2]), bits[1].upper())
            return cls(kind, float(bits[1]))
        except (IndexError, ValueError) as exc:
            raise InvalidInputError(f"cannot parse attack {text!r}") from exc


def attack_point_drop(cloud: PointCloud, p: float, rng: RngStream) -> PointCloud:
    """Remove floor(p N) uniformly chosen points (and their labels), keeping order."""
    if not 0.0 <= p < 1.0:
        raise InvalidInputError("drop ratio must lie in [0, 1)")
    n = cloud.n
    drop = int(math.floor(p * n))
    if n - drop < 1:
        raise InvalidInputError("point drop would leave an empty cloud")
    keep = np.ones(n, dtype=bool)
    keep[rng.choice(n, size=drop, replace=False)] = False
    return PointCloud(cloud.points[keep], cloud.class_label,
                      None if cloud.point_labels is None else cloud.point_labels[keep])


def attack_gaussian_noise(cloud: PointCloud, var: float, rng: RngStream) -> PointCloud:
    if not var > 0:
        raise InvalidInputError("noise variance must be positive")
    noisy = cloud.points + rng.normal(0.0, math.sqrt(var), size=cloud.points.shape)
    return PointCloud(noisy, cloud.class_label,
                      None if cloud.point_labels is None else cloud.point_labels.copy())


def attack_scale(cloud: PointCloud, s: float) -> PointCloud:
    if not s > 0:
        raise InvalidInputError("scale factor must be positive")
    return PointCloud(cloud.points * s, cloud.class_label,
                      None if cloud.point_labels is None else cloud.point_labels.copy())


def rotation_matrix(axis: str, degrees: float) -> np.ndarray:
    """Right-handed rotation about a coordinate axis."""
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    axis = axis.upper()
    if axis == "X":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "Y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == "Z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise InvalidInputError(f"unknown axis {axis!r}")


def attack_rotate(cloud: PointCloud, axis: str, degrees: float) -> PointCloud:
    r = rotation_matrix(axis, degrees)
    return PointCloud(cloud.points @ r.T, cloud.class_label,
                      None if cloud.point_labels is None else cloud.point_labels.copy())


def apply_attack(cloud: PointCloud, spec: AttackSpec, rng: RngStream) -> PointCloud:
    if spec.kind == "point-drop":
        return attack_point_drop(cloud, spec.value, rng)
    if spec.kind == "gaussian-noise":
        return attack_gaussian_noise(cloud, spec.value, rng)
    if spec.kind == "scale":
        return attack_scale(cloud, spec.value)
    return attack_rotate(cloud, spec.axis, spec.value)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    overall_accuracy: Optional[float] = None
    mean_class_accuracy: Optional[float] = None
    miou: Optional[float] = None
    per_class: dict = field(default_factory=dict)


def classification_metrics(y_true, y_pred, num_classes: Optional[int] = None) -> EvalResult:
    """OA = correct / total; MA = unweighted mean accuracy over classes present."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise InvalidInputError("cannot evaluate an empty split")
    if y_true.shape != y_pred.shape:
        raise InvalidInputError("prediction and label counts differ")
    correct = y_true == y_pred
    per = {}
    for c in np.unique(y_true):
        sel = y_true == c
        per[int(c)] = int(correct[sel].sum()) / int(sel.sum())
    return EvalResult(int(correct.sum()) / y_true.size, float(np.mean(list(per.values()))), None, per)


def shape_iou(pred: np.ndarray, target: np.ndarray, parts: Sequence[int]) -> float:
    """Mean IoU over a category's parts; a part absent from both counts as 1."""
    ious = []
    for part in parts:
        p = pred == part
        t = target == part
        union = np.logical_or(p, t).sum()
        ious.append(1.0 if union == 0 else np.logical_and(p, t).sum() / union)
    return float(np.mean(ious))


def segmentation_miou(preds, targets, categories, parts_by_class: dict) -> EvalResult:
    """Shape-averaged mIoU with a per-category breakdown."""
    if len(preds) == 0:
        raise InvalidInputError("cannot evaluate an empty split")
    by_cat: dict = {}
    all_ious = []
    for pred, tgt, cat in zip(preds, targets, categories):
        cat = int(cat)
        if cat not in parts_by_class:
            raise InvalidInputError(f"unknown category {cat}")
        iou = shape_iou(np.asarray(pred), np.asarray(tgt), parts_by_class[cat])
        all_ious.append(iou)
        by_cat.setdefault(cat, []).append(iou)
    return EvalResult(miou=float(np.mean(all_ious)),
                      per_class={c: float(np.mean(v)) for c, v in sorted(by_cat.items())})


def _group_by_n(clouds):
    groups: dict = {}
    for i, c in enumerate(clouds):
        groups.setdefault(c.n, []).append(i)
    return groups


def evaluate_classification(model, clouds: Sequence[PointCloud], num_classes: Optional[int] = None,
                            batch_size: int = 64) -> EvalResult:
    if len(clouds) == 0:
        raise InvalidInputError("cannot evaluate an empty split")
    preds = np.empty(len(clouds), dtype=np.int64)
    for _, idx in _group_by_n(clouds).items():
        pts = np.stack([clouds[i].points for i in idx])
        preds[idx] = model.predict(pts, batch_size=batch_size)
    labels = np.array([c.class_label for c in clouds])
    return classification_metrics(labels, preds, num_classes)


def evaluate_segmentation_miou(model, clouds: Sequence[PointCloud], parts_by_class: dict,
                               batch_size: int = 64) -> EvalResult:
    if len(clouds) == 0:
        raise InvalidInputError("cannot evaluate an empty split")
    preds: list = [None] * len(clouds)
    for _, idx in _group_by_n(clouds).items():
        pts = np.stack([clouds[i].points for i in idx])
        cats = np.zeros((len(idx), model.num_classes))
        cats[np.arange(len(idx)), [clouds[i].class_label for i in idx]] = 1.0
        out = model.predict(pts, category=cats, batch_size=batch_size)
        for j, i in enumerate(idx):
            preds[i] = out[j]
    return segmentation_miou(preds, [c.point_labels for c in clouds],
                             [c.class_label for c in clouds], parts_by_class)


def attack_sweep(model, clouds: Sequence[PointCloud], attacks: Sequence[AttackSpec], rng: RngStream,
                 parts_by_class: Optional[dict] = None) -> list:
    """Evaluate ``model`` on each attacked copy of ``clouds``; rows are (attack, EvalResult)."""
    rows = []
    for spec in attacks:
        attacked = [apply_attack(c, spec, rng) for c in clouds]
        if model.task == "cls":
            rows.append((spec, evaluate_classification(model, attacked)))
        else:
            rows.append((spec, evaluate_segmentation_miou(model, attacked, parts_by_class)))
    return rows


def sweep_table(rows, task: str = "cls") -> str:
    """Comma-separated ``attack, parameter, OA, MA`` (or ``mIoU``) table."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["attack", "parameter", "OA", "MA"] if task == "cls" else ["attack", "parameter", "mIoU"])
    for spec, res in rows:
        param = f"{spec.axis}:{spec.value:g}" if spec.kind == "rotate" else f"{spec.value:g}"
        if task == "cls":
            w.writerow([spec.kind, param, f"{res.overall_accuracy:.6f}", f"{res.mean_class_accuracy:.6f}"])
        else:
            w.writerow([spec.kind, param, f"{res.miou:.6f}"])
    return buf.getvalue()
