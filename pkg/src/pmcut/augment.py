"""Point swapping between paired samples in a network's embedded space.

A mixed sample keeps the rows selected by a boolean mask from the first
cloud and takes every other row, at the same index, from its partner. Masks
come either from a uniformly random index set (``pmc-r``) or from a random
center and its nearest neighbours in the partner's feature space (``pmc-k``).
Applied to raw coordinates (layer 0) this reduces to coordinate-space point
cutting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .core import ConfigError, FeatureBatch, InvalidInputError, RngStream, one_hot

MODES = ("pmc-r", "pmc-k")
MIN_BETA = 1e-3


@dataclass
class ReplacementMask:
    """``keep[i]`` is True when point i comes from the first sample."""

    keep: np.ndarray
    lambda_realized: float
    center: Optional[int] = None

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        if self.keep.ndim != 1:
            raise InvalidInputError("mask must be a 1-d boolean vector")

    @property
    def n(self) -> int:
        return self.keep.shape[0]

    @property
    def kept(self) -> int:
        return int(self.keep.sum())


@dataclass
class MixedTargets:
    class_target: Optional[np.ndarray]
    point_targets: Optional[np.ndarray]


@dataclass
class AugmentConfig:
    rho: float = 0.5
    beta: float = 1.0
    mode: str = "pmc-r"
    # an int picks a fixed layer; "random" draws one eligible layer per batch
    layer: Union[int, str] = "random"
    # forces lambda instead of drawing it (sweeps and degenerate-mask checks)
    fixed_lambda: Optional[float] = None
    # put the lambda weight on the partner's target instead of the kept sample's
    swap_weights: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (self.layer == "random" or isinstance(self.layer, (int, np.integer))):
            raise ConfigError(f"layer must be an integer or 'random', got {self.layer!r}")
        if self.fixed_lambda is not None and not 0.0 <= self.fixed_lambda <= 1.0:
            raise ConfigError("fixed_lambda must lie in [0, 1]")


# ---------------------------------------------------------------------------
# stochastic pieces
# ---------------------------------------------------------------------------


def _log_gamma_sample(shape: float, rng: RngStream) -> float:
    # Gamma(a) = Gamma(a + 1) * U**(1/a); stays finite in log space for tiny a.
    if shape >= 1.0:
        return math.log(rng.standard_gamma(shape))
    g = rng.standard_gamma(shape + 1.0)
    u = rng.random()
    return math.log(g) + math.log(u) / shape


def sample_lambda(beta: float, rng: RngStream) -> float:
    """Draw from Beta(beta, beta) as a ratio of two Gamma(beta, 1) variates."""
    if not beta > 0:
        raise InvalidInputError(f"beta must be positive, got {beta}")
    if beta < MIN_BETA:
        raise InvalidInputError(f"beta below {MIN_BETA} is not supported")
    lg1 = _log_gamma_sample(beta, rng)
    lg2 = _log_gamma_sample(beta, rng)
    # g1 / (g1 + g2) evaluated without overflow
    diff = lg2 - lg1
    if diff > 0:
        e = math.exp(-diff)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(diff))


def gate(rho: float, rng: RngStream) -> bool:
    """True (apply the augmentation to this batch) with probability ``rho``."""
    if not 0.0 <= rho <= 1.0:
        raise InvalidInputError(f"rho must lie in [0, 1], got {rho}")
    return bool(rng.random() < rho)


def kept_count(n: int, lam: float) -> int:
    return int(math.floor(lam * n))


def build_mask_random(n: int, lam: float, rng: RngStream) -> ReplacementMask:
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError(f"lambda must lie in [0, 1], got {lam}")
    k = kept_count(n, lam)
    keep = np.zeros(n, dtype=bool)
    keep[rng.permutation(n)[:k]] = True
    return ReplacementMask(keep, k / n)


def knn_replacement_set(features: np.ndarray, center: int, r: int) -> np.ndarray:
    """The center plus its ``r - 1`` nearest rows; ties go to the lowest index."""
    diff = features - features[center]
    dist = np.einsum("ij,ij->i", diff, diff)
    dist[center] = -1.0
    return np.argsort(dist, kind="stable")[:r]


def build_mask_knn(features_second: np.ndarray, lam: float, rng: RngStream,
                   center: Optional[int] = None) -> ReplacementMask:
    """Mask whose replaced rows are a kNN neighbourhood in the partner's features.

    ``r = N - floor(lam * N)`` rows are replaced. ``center`` is drawn uniformly
    unless given.
    """
    feats = np.asarray(features_second, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise InvalidInputError(f"features must be N x d, got {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise InvalidInputError("features must be finite")
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError(f"lambda must lie in [0, 1], got {lam}")
    n = feats.shape[0]
    k = kept_count(n, lam)
    r = n - k
    keep = np.ones(n, dtype=bool)
    if r == 0:
        return ReplacementMask(keep, 1.0, center)
    if center is None:
        center = int(rng.integers(n))
    keep[knn_replacement_set(feats, center, r)] = False
    return ReplacementMask(keep, k / n, center)


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------


def apply_pmc(feat_a, feat_b, mask):
    """Row-select between two N x d feature sets.

    Works on numpy arrays and on :class:`~pmcut.autodiff.Tensor` inputs; with
    tensors the gradient reaches ``feat_a`` only on kept rows and ``feat_b``
    only on replaced rows. ``mask`` may be a ReplacementMask or a boolean array
    broadcastable against the leading axes.
    """
    keep = mask.keep if isinstance(mask, ReplacementMask) else np.asarray(mask, dtype=bool)
    if feat_a.shape != feat_b.shape:
        raise InvalidInputError(f"shape mismatch: {feat_a.shape} vs {feat_b.shape}")
    if keep.shape != feat_a.shape[:keep.ndim] or keep.ndim >= len(feat_a.shape):
        raise InvalidInputError(f"mask shape {keep.shape} does not fit features {feat_a.shape}")
    cond = keep.reshape(keep.shape + (1,) * (len(feat_a.shape) - keep.ndim))
    if isinstance(feat_a, ad.Tensor) or isinstance(feat_b, ad.Tensor):
        return ad.where(cond, feat_a, feat_b)
    return np.where(cond, feat_a, feat_b)


def mix_class_targets(c1: int, c2: int, lambda_realized: float, num_classes: int) -> np.ndarray:
    if not 0.0 <= lambda_realized <= 1.0:
        raise InvalidInputError("lambda must lie in [0, 1]")
    return lambda_realized * one_hot(c1, num_classes) + (1.0 - lambda_realized) * one_hot(c2, num_classes)


def mix_point_targets(s1, s2, mask) -> np.ndarray:
    s1 = np.asarray(s1)
    s2 = np.asarray(s2)
    keep = mask.keep if isinstance(mask, ReplacementMask) else np.asarray(mask, dtype=bool)
    if s1.shape != s2.shape or s1.shape != keep.shape:
        raise InvalidInputError(f"length mismatch: {s1.shape}, {s2.shape}, mask {keep.shape}")
    return np.where(keep, s1, s2)


# ---------------------------------------------------------------------------
# batch level
# ---------------------------------------------------------------------------


class BatchMixer:
    """One batch's mixing plan: a partner permutation, lambda and masks.

    The plan is drawn once; the masks are frozen on first use so the same
    callable can be re-run (finite differences, skip connections) and always
    produces the same mixture. For ``pmc-r`` a single mask is shared by the
    whole batch. ``pmc-k`` masks depend on each partner's features, so each
    pair gets its own neighbourhood while sharing lambda and hence the count.
    """

    def __init__(self, batch_size: int, n_points: int, config: AugmentConfig, rng: RngStream):
        if batch_size < 1:
            raise InvalidInputError("batch must not be empty")
        self.config = config
        self.rng = rng
        if config.fixed_lambda is not None:
            self.lambda_drawn = float(config.fixed_lambda)
        else:
            self.lambda_drawn = sample_lambda(config.beta, rng)
        self.perm = rng.permutation(batch_size)
        self.n = n_points
        self.keep: Optional[np.ndarray] = None
        self.centers: Optional[np.ndarray] = None
        if config.mode == "pmc-r":
            m = build_mask_random(n_points, self.lambda_drawn, rng)
            self.keep = np.broadcast_to(m.keep, (batch_size, n_points)).copy()

    @property
    def lambda_realized(self) -> float:
        return kept_count(self.n, self.lambda_drawn) / self.n

    def _ensure_mask(self, values: np.ndarray):
        if self.keep is not None:
            return
        partner = values[self.perm]
        keep, centers = [], []
        for b in range(values.shape[0]):
            m = build_mask_knn(partner[b], self.lambda_drawn, self.rng)
            keep.append(m.keep)
            centers.append(-1 if m.center is None else m.center)
        self.keep = np.stack(keep)
        self.centers = np.array(centers)

    def __call__(self, feats):
        """Mix a B x N x d array or tensor with its permuted partner."""
        values = feats.data if isinstance(feats, ad.Tensor) else np.asarray(feats)
        if values.shape[:2] != (len(self.perm), self.n):
            raise InvalidInputError(f"features {values.shape} do not match the plan")
        self._ensure_mask(values)
        partner = ad.getitem(feats, self.perm) if isinstance(feats, ad.Tensor) else values[self.perm]
        return apply_pmc(feats, partner, self.keep)

    def masks(self) -> list:
        if self.keep is None:
            raise RuntimeError("pmc-k masks are only known after the features were seen")
        return [ReplacementMask(k, self.lambda_realized,
                                None if self.centers is None else int(self.centers[i]))
                for i, k in enumerate(self.keep)]

    def targets(self, class_labels=None, point_labels=None, num_classes: Optional[int] = None) -> list:
        out = []
        for i, m in enumerate(self.masks()):
            j = self.perm[i]
            ct = None
            if class_labels is not None and num_classes is not None:
                ct = mix_class_targets(int(class_labels[i]), int(class_labels[j]),
                                       m.lambda_realized, num_classes)
            pt = None
            if point_labels is not None:
                pt = mix_point_targets(point_labels[i], point_labels[j], m)
            out.append(MixedTargets(ct, pt))
        return out


def pmc_batch(feats: FeatureBatch, config: AugmentConfig, rng: RngStream,
              class_labels: Optional[Sequence[int]] = None,
              point_labels: Optional[np.ndarray] = None,
              num_classes: Optional[int] = None):
    """Mix every element of a feature batch with a shuffled partner.

    Returns the mixed :class:`FeatureBatch`, one :class:`MixedTargets` per
    element, and the partner permutation.
    """
    values = feats.values
    if values.shape[0] < 1:
        raise InvalidInputError("batch must not be empty")
    mixer = BatchMixer(values.shape[0], values.shape[1], config, rng)
    mixed = mixer(values)
    targets = mixer.targets(class_labels, point_labels, num_classes)
    return FeatureBatch(mixed, feats.layer_id), targets, mixer.perm
