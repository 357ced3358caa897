"""Losses, optimizers, the gated training loop and a finite-difference checker."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, BatchMixer, gate
from .autodiff import Tensor
from .core import ConfigError, InvalidInputError, RngStream, rng_stream
from .network import HookPoint, PointModel


class NumericalError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits, target) -> float:
    """-sum(target * log_softmax(logits)) for a single logit vector and soft target."""
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape or logits.ndim != 1:
        raise InvalidInputError(f"shape mismatch: {logits.shape} vs {target.shape}")
    if np.any(target < 0) or abs(target.sum() - 1.0) > 1e-9:
        raise InvalidInputError("target must be a probability vector")
    shifted = logits - logits.max()
    logp = shifted - np.log(np.exp(shifted).sum())
    return float(-(target * logp).sum())


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of (..., C) logits against soft targets of the same shape."""
    logp = ad.log_softmax(logits, axis=-1)
    per = (logp * np.asarray(targets, dtype=np.float64)).sum(axis=-1)
    return -per.mean()


def hard_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (..., C) logits against integer labels (...)."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = ad.log_softmax(logits, axis=-1)
    c = logits.shape[-1]
    flat = logp.reshape(-1, c)
    picked = flat[np.arange(flat.shape[0]), labels.ravel()]
    return -picked.mean()


def mixed_objective(logits: Tensor, own_target, partner_target, lambda_realized: float,
                    tnet_reg=None, reg_weight: float = 0.0, task: str = "cls",
                    swap_weights: bool = False) -> Tensor:
    """lambda * L(own) + (1 - lambda) * L(partner) + reg_weight * L_reg.

    Targets are integer labels. For segmentation ``own_target`` already holds
    the mixed per-point labels and ``partner_target`` is ignored: the point
    labels are a hard selection, so there is a single loss term.
    """
    if not 0.0 <= lambda_realized <= 1.0:
        raise InvalidInputError("lambda must lie in [0, 1]")
    if task == "seg":
        loss = hard_cross_entropy(logits, own_target)
    else:
        w_own = 1.0 - lambda_realized if swap_weights else lambda_realized
        loss = (hard_cross_entropy(logits, own_target) * w_own
                + hard_cross_entropy(logits, partner_target) * (1.0 - w_own))
    if tnet_reg is not None and reg_weight:
        loss = loss + ad.as_tensor(tnet_reg) * reg_weight
    return loss


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def cosine_lr(epoch: float, total: int, lr_initial: float, lr_floor: float) -> float:
    """Cosine annealing from ``lr_initial`` at epoch 0 to ``lr_floor`` at ``total``."""
    return lr_floor + 0.5 * (lr_initial - lr_floor) * (1.0 + math.cos(math.pi * epoch / total))


def _check_finite(names, grads):
    for name, g in zip(names, grads):
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise NumericalError(f"non-finite gradient in {name}: {bad} of {g.size} entries")


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 halve_every: Optional[int] = None):
        self.params = list(params)
        self.lr_initial = lr
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.halve_every = halve_every
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def set_epoch(self, epoch: int):
        if self.halve_every:
            self.lr = self.lr_initial * 0.5 ** (epoch // self.halve_every)

    def step(self, grads):
        _check_finite([p.name for p in self.params], grads)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGDCosine:
    """SGD with momentum and a per-epoch cosine-annealed learning rate."""

    def __init__(self, params, lr_initial: float = 0.1, lr_floor: float = 1e-3,
                 total_epochs: int = 1, momentum: float = 0.9):
        self.params = list(params)
        self.lr_initial = lr_initial
        self.lr_floor = lr_floor
        self.total = total_epochs
        self.momentum = momentum
        self.lr = lr_initial
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def set_epoch(self, epoch: int):
        self.lr = cosine_lr(epoch, self.total, self.lr_initial, self.lr_floor)

    def step(self, grads):
        _check_finite([p.name for p in self.params], grads)
        for p, g, b in zip(self.params, grads, self.buf):
            b *= self.momentum
            b += g
            p.data = p.data - self.lr * b


def make_optimizer(params, config: "TrainConfig"):
    if config.optimizer == "adam":
        return Adam(params, lr=config.lr_initial, halve_every=config.lr_halve_every)
    return SGDCosine(params, config.lr_initial, config.lr_floor, config.epochs)


def optimizer_step(optimizer, grads, epoch: Optional[int] = None):
    if epoch is not None:
        optimizer.set_epoch(epoch)
    optimizer.step(grads)


# ---------------------------------------------------------------------------
# config and report
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    optimizer: str = "adam"  # adam | sgd-cosine
    lr_initial: float = 1e-3
    lr_floor: float = 1e-3
    lr_halve_every: Optional[int] = None
    augment: Optional[AugmentConfig] = None  # None disables the augmentation entirely
    tnet_reg_weight: float = 1e-3
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd-cosine"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr_initial > 0:
            raise ConfigError("lr_initial must be positive")
        if self.augment is not None and self.augment.rho > 0 and self.batch_size < 2:
            raise ConfigError("mixing needs batch_size >= 2 when rho > 0")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    metrics: dict
    wall_ms: float
    batch_losses: list = field(default_factory=list)
    mixed_batches: int = 0
    lambdas: list = field(default_factory=list)
    layers: list = field(default_factory=list)


@dataclass
class TrainReport:
    task: str
    epochs: list = field(default_factory=list)

    @property
    def final_metrics(self) -> dict:
        return self.epochs[-1].metrics if self.epochs else {}

    def metric_names(self) -> list:
        return ["oa", "ma"] if self.task == "cls" else ["miou"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = self.metric_names()
        w.writerow(["epoch", "loss"] + names + ["lr", "wall_ms"])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.loss)] + [repr(e.metrics.get(n, float("nan"))) for n in names]
                       + [repr(e.lr), f"{e.wall_ms:.1f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"task {self.task}"]
        for e in self.epochs:
            ms = " ".join(f"{k}={v!r}" for k, v in e.metrics.items())
            lines.append(f"epoch {e.epoch} loss={e.loss!r} lr={e.lr!r} mixed={e.mixed_batches} "
                         f"{ms} wall_ms={e.wall_ms:.1f}")
        fm = " ".join(f"{k}={v!r}" for k, v in self.final_metrics.items())
        lines.append(f"final {fm}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# batch objective and training loop
# ---------------------------------------------------------------------------


def _one_hot_rows(labels: np.ndarray, c: int) -> np.ndarray:
    out = np.zeros((len(labels), c))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def batch_objective(model: PointModel, points: np.ndarray, class_labels: np.ndarray,
                    point_labels: Optional[np.ndarray] = None, mixer: Optional[BatchMixer] = None,
                    hook: Optional[int] = None, reg_weight: float = 0.0, swap_weights: bool = False,
                    knn_cache: Optional[dict] = None):
    """Forward pass plus loss for one batch; ``mixer=None`` gives the plain loss."""
    class_labels = np.asarray(class_labels, dtype=np.int64)
    category = None
    if model.task == "seg":
        own_cat = _one_hot_rows(class_labels, model.num_classes)
        category = own_cat
        if mixer is not None:
            lam = mixer.lambda_realized
            category = lam * own_cat + (1.0 - lam) * own_cat[mixer.perm]
    logits, reg = model.forward(points, hook=hook if mixer is not None else None, mixer=mixer,
                                category=category, knn_cache=knn_cache)
    if mixer is None:
        target = class_labels if model.task == "cls" else point_labels
        loss = hard_cross_entropy(logits, target)
        if reg is not None and reg_weight:
            loss = loss + reg * reg_weight
        return loss
    if model.task == "cls":
        return mixed_objective(logits, class_labels, class_labels[mixer.perm], mixer.lambda_realized,
                               reg, reg_weight, "cls", swap_weights)
    mixed_pts = np.where(mixer.keep, point_labels, point_labels[mixer.perm])
    return mixed_objective(logits, mixed_pts, None, mixer.lambda_realized, reg, reg_weight, "seg")


def _batches(order: np.ndarray, batch_size: int):
    for s in range(0, len(order), batch_size):
        chunk = order[s:s + batch_size]
        if len(chunk) >= 2 or batch_size == 1:
            yield chunk


class Trainer:
    """Runs the gated training procedure over a :class:`pmcut.data.Dataset`.

    Randomness is split into labelled streams derived from ``config.seed``:
    ``shuffle`` (data order) and ``mask`` (gate, layer, lambda, partner
    permutation and masks). The gate draws therefore never disturb the data
    order, and a run with ``rho = 0`` reproduces a run with the augmentation
    disabled exactly.
    """

    def __init__(self, model: PointModel, dataset, config: TrainConfig, evaluate=True):
        self.model = model
        self.dataset = dataset
        self.config = config
        self.evaluate = evaluate
        self.optimizer = make_optimizer(list(model.params), config)
        self.shuffle_rng = rng_stream(config.seed, "shuffle")
        self.mask_rng = rng_stream(config.seed, "mask")
        aug = config.augment
        self.hook = HookPoint(aug.layer) if aug is not None else None
        if aug is not None and aug.layer != "random":
            self.hook.resolve(model.eligible_layers)
        train = dataset.train_arrays()
        self.points, self.labels, self.parts = train
        self.report = TrainReport(model.task)

    def train_epoch(self, epoch: int) -> EpochRecord:
        cfg = self.config
        aug = cfg.augment
        t0 = time.perf_counter()
        self.optimizer.set_epoch(epoch)
        order = self.shuffle_rng.permutation(len(self.points))
        losses, lambdas, layers = [], [], []
        mixed = 0
        for idx in _batches(order, cfg.batch_size):
            pts, lab = self.points[idx], self.labels[idx]
            parts = None if self.parts is None else self.parts[idx]
            mixer, hook = None, None
            if aug is not None and gate(aug.rho, self.mask_rng):
                hook = self.hook.resolve(self.model.eligible_layers, self.mask_rng)
                mixer = BatchMixer(len(idx), pts.shape[1], aug, self.mask_rng)
                mixed += 1
                lambdas.append(mixer.lambda_realized)
                layers.append(hook)
            self.model.params.zero_grad()
            loss = batch_objective(self.model, pts, lab, parts, mixer, hook,
                                   cfg.tnet_reg_weight, aug.swap_weights if aug else False)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {len(losses)}")
            loss.backward()
            self.optimizer.step(ad.parameters_grad(self.model.params))
            losses.append(value)
        metrics = {}
        if self.evaluate and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            metrics = self.test_metrics()
        rec = EpochRecord(epoch, float(np.mean(losses)), self.optimizer.lr, metrics,
                          1000.0 * (time.perf_counter() - t0), losses, mixed, lambdas, layers)
        self.report.epochs.append(rec)
        return rec

    def test_metrics(self, clouds=None) -> dict:
        from .robustness import evaluate_classification, evaluate_segmentation_miou

        clouds = self.dataset.test_clouds() if clouds is None else clouds
        if self.model.task == "cls":
            r = evaluate_classification(self.model, clouds, self.dataset.num_classes)
            return {"oa": r.overall_accuracy, "ma": r.mean_class_accuracy}
        r = evaluate_segmentation_miou(self.model, clouds, self.dataset.parts_by_class)
        return {"miou": r.miou}

    def fit(self) -> TrainReport:
        for epoch in range(self.config.epochs):
            self.train_epoch(epoch)
        return self.report


def train(model: PointModel, dataset, config: TrainConfig, evaluate=True) -> TrainReport:
    return Trainer(model, dataset, config, evaluate).fit()


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst_param: str
    rel_errors: np.ndarray


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dominating."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradient_check(model: PointModel, points: np.ndarray, class_labels: np.ndarray,
                   point_labels: Optional[np.ndarray] = None, mixer: Optional[BatchMixer] = None,
                   hook: Optional[int] = None, reg_weight: float = 1e-3, n_params: int = 200,
                   step: float = 1e-5, rng: Optional[RngStream] = None) -> GradCheckReport:
    """Compare backprop against central differences on a random parameter subset.

    The kNN graphs and the mixing plan are frozen after the first pass.
    Perturbations whose +/- evaluations take different ReLU or max-pool
    branches straddle a kink where the central difference is meaningless;
    they are counted in ``skipped_kinks`` instead of the error statistic.
    """
    rng = rng if rng is not None else rng_stream(0, "gradcheck")
    knn_cache: dict = {}

    def objective():
        return batch_objective(model, points, class_labels, point_labels, mixer, hook,
                               reg_weight, knn_cache=knn_cache)

    model.params.zero_grad()
    loss = objective()
    loss.backward()
    analytic = model.params.flat_grad()
    theta = model.params.flat()
    picks = rng.choice(theta.size, size=min(n_params, theta.size), replace=False)
    errs, names, kinks = [], [], 0
    for i in picks:
        vals, logs = [], []
        for sign in (1.0, -1.0):
            t = theta.copy()
            t[i] += sign * step
            model.params.set_flat(t)
            with ad.record_branches() as log:
                vals.append(float(objective().data))
            logs.append(log)
        model.params.set_flat(theta)
        if any(not np.array_equal(x, y) for x, y in zip(*logs)):
            kinks += 1
            continue
        numeric = (vals[0] - vals[1]) / (2 * step)
        errs.append(float(rel_error(analytic[i], numeric)))
        names.append(model.params.locate(int(i))[0])
    errs_a = np.array(errs)
    worst = int(np.argmax(errs_a)) if errs else 0
    return GradCheckReport(float(errs_a.max()) if errs else 0.0, len(errs), kinks,
                           names[worst] if names else "", errs_a)
