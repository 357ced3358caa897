import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmcut import autodiff as ad
from pmcut.augment import AugmentConfig, BatchMixer, mix_class_targets
from pmcut.core import ConfigError, InvalidInputError, rng_stream
from pmcut.data import build_dataset
from pmcut.network import PointModel, tnet_regularizer
from pmcut.training import (Adam, NumericalError, SGDCosine, TrainConfig, Trainer, batch_objective,
                            cosine_lr, cross_entropy, gradient_check, hard_cross_entropy,
                            mixed_objective, soft_cross_entropy, train)


@pytest.fixture(scope="module")
def tiny_cls():
    return build_dataset(("sphere", "cube"), per_class=6, n_points=16, seed=3)


@pytest.fixture(scope="module")
def tiny_seg():
    return build_dataset(("cylinder", "sphere"), per_class=5, n_points=16, seed=4)


# -- cross entropy ---------------------------------------------------------------

def test_ce_uniform_logits():
    assert abs(cross_entropy(np.zeros(4), [0, 0, 1, 0]) - math.log(4)) <= 1e-12
    assert round(cross_entropy(np.zeros(4), [0, 0, 1, 0]), 6) == 1.386294


def test_ce_self_target_is_entropy():
    logits = rng_stream(0).normal(size=6)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    assert abs(cross_entropy(logits, p) - float(-(p * np.log(p)).sum())) <= 1e-12


def test_ce_stable_for_large_logits():
    assert cross_entropy(np.array([1000.0, 0.0]), [1, 0]) == 0.0
    assert abs(cross_entropy(np.array([1000.0, 0.0]), [0, 1]) - 1000.0) <= 1e-9


def test_ce_rejects_bad_target():
    with pytest.raises(InvalidInputError):
        cross_entropy(np.zeros(3), [0.5, 0.5, 0.1])
    with pytest.raises(InvalidInputError):
        cross_entropy(np.zeros(3), [1.5, -0.5, 0.0])


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.integers(0, 4), st.integers(0, 4), st.integers(0, 2**31))
def test_ce_linear_in_target(lam, c1, c2, seed):
    logits = rng_stream(seed).normal(size=5) * 3
    soft = mix_class_targets(c1, c2, lam, 5)
    split = lam * cross_entropy(logits, np.eye(5)[c1]) + (1 - lam) * cross_entropy(logits, np.eye(5)[c2])
    assert abs(cross_entropy(logits, soft) - split) <= 1e-12
    assert cross_entropy(logits, soft) >= 0


# -- mixed objective ---------------------------------------------------------------

def test_mixed_objective_boundaries():
    rng = rng_stream(1)
    logits = ad.Tensor(rng.normal(size=(4, 3)))
    own, partner = np.array([0, 1, 2, 0]), np.array([2, 2, 1, 1])
    plain = float(hard_cross_entropy(logits, own).data)
    assert float(mixed_objective(logits, own, partner, 1.0).data) == plain
    assert abs(float(mixed_objective(logits, own, own, 0.5).data) - plain) <= 1e-15


def test_mixed_objective_regularizer_increment():
    logits = ad.Tensor(rng_stream(2).normal(size=(3, 4)))
    own, partner = np.array([0, 1, 2]), np.array([1, 1, 0])
    reg = tnet_regularizer(2 * np.eye(2))
    base = float(mixed_objective(logits, own, partner, 0.3).data)
    with_reg = float(mixed_objective(logits, own, partner, 0.3, reg, 0.001).data)
    assert abs(with_reg - base - 0.018) <= 1e-12


def test_mixed_objective_matches_soft_target():
    rng = rng_stream(3)
    for _ in range(200):
        b, c = 5, 4
        logits = ad.Tensor(rng.normal(size=(b, c)) * 2)
        own, partner = rng.integers(0, c, b), rng.integers(0, c, b)
        lam = float(rng.random())
        soft = np.stack([mix_class_targets(o, p, lam, c) for o, p in zip(own, partner)])
        a = float(mixed_objective(logits, own, partner, lam).data)
        assert abs(a - float(soft_cross_entropy(logits, soft).data)) <= 1e-9


def test_mixed_objective_swapped_weights():
    logits = ad.Tensor(rng_stream(4).normal(size=(3, 4)))
    own, partner = np.array([0, 1, 2]), np.array([3, 3, 3])
    swapped = float(mixed_objective(logits, own, partner, 0.2, swap_weights=True).data)
    normal = float(mixed_objective(logits, partner, own, 0.2).data)
    assert abs(swapped - normal) <= 1e-14


def test_mixed_objective_rejects_lambda():
    with pytest.raises(InvalidInputError):
        mixed_objective(ad.Tensor(np.zeros((1, 2))), [0], [1], 1.5)


def test_seg_objective_is_single_term():
    logits = ad.Tensor(rng_stream(5).normal(size=(2, 6, 3)))
    labels = rng_stream(6).integers(0, 3, size=(2, 6))
    got = float(mixed_objective(logits, labels, None, 0.4, task="seg").data)
    assert got == float(hard_cross_entropy(logits, labels).data)


# -- optimizers ----------------------------------------------------------------------

def test_cosine_schedule():
    assert abs(cosine_lr(25, 50, 0.1, 0.001) - 0.0505) <= 1e-12
    assert cosine_lr(0, 50, 0.1, 0.001) == 0.1
    assert abs(cosine_lr(50, 50, 0.1, 0.001) - 0.001) <= 1e-12
    lrs = [cosine_lr(e, 50, 0.1, 0.001) for e in range(51)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_adam_first_step():
    p = ad.Tensor(np.array([0.5]), requires_grad=True)
    opt = Adam([p], lr=0.001)
    opt.step([np.array([1.0])])
    # bias-corrected moments at t=1 are g and g^2, so the step is lr * g / (|g| + eps)
    assert abs((0.5 - p.data[0]) - 0.001 / (1 + 1e-8)) <= 1e-15


def test_adam_halving():
    p = ad.Tensor(np.zeros(1), requires_grad=True)
    opt = Adam([p], lr=0.01, halve_every=20)
    opt.set_epoch(45)
    assert opt.lr == 0.0025


def test_sgd_zero_gradient_fixed_point():
    p = ad.Tensor(rng_stream(0).normal(size=(3, 2)), requires_grad=True)
    before = p.data.copy()
    opt = SGDCosine([p], 0.1, 0.001, 10)
    for e in range(3):
        opt.set_epoch(e)
        opt.step([np.zeros((3, 2))])
    assert np.array_equal(p.data, before)


def test_sgd_momentum():
    p = ad.Tensor(np.zeros(1), requires_grad=True)
    opt = SGDCosine([p], 0.1, 0.1, 10)
    opt.step([np.ones(1)])
    opt.step([np.ones(1)])
    assert abs(p.data[0] + 0.1 * (1 + 1.9)) <= 1e-15


def test_non_finite_gradient_aborts():
    p = ad.Tensor(np.zeros(2), requires_grad=True, name="w")
    with pytest.raises(NumericalError, match="w"):
        Adam([p]).step([np.array([np.nan, 0.0])])


def test_small_steps_decrease_loss():
    model = PointModel("pointnet-mini", num_classes=3, seed=2)
    rng = rng_stream(8)
    pts, labels = rng.normal(size=(6, 16, 3)), rng.integers(0, 3, 6)
    opt = Adam(list(model.params), lr=1e-4)
    losses = []
    for _ in range(10):
        model.params.zero_grad()
        loss = batch_objective(model, pts, labels, reg_weight=1e-3)
        loss.backward()
        losses.append(float(loss.data))
        opt.step(ad.parameters_grad(model.params))
    assert losses[-1] < losses[0]


# -- config -------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_initial=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1, augment=AugmentConfig(rho=0.5))
    TrainConfig(batch_size=1, augment=AugmentConfig(rho=0.0))


# -- training loop ---------------------------------------------------------------------

def run(dataset, augment, seed=0, epochs=2, arch="pointnet-mini", task="cls"):
    model = PointModel(arch, dataset.num_classes, dataset.num_part_classes, task, seed=seed)
    cfg = TrainConfig(epochs=epochs, batch_size=4, augment=augment, seed=seed)
    return train(model, dataset, cfg), model


def batch_losses(report):
    return [l for e in report.epochs for l in e.batch_losses]


def test_rho_zero_equals_disabled(tiny_cls):
    off, m_off = run(tiny_cls, None)
    zero, m_zero = run(tiny_cls, AugmentConfig(rho=0.0))
    assert batch_losses(off) == batch_losses(zero)
    assert np.array_equal(m_off.params.flat(), m_zero.params.flat())
    assert all(e.mixed_batches == 0 for e in zero.epochs)


def test_rho_one_mixes_every_batch(tiny_cls):
    rep, _ = run(tiny_cls, AugmentConfig(rho=1.0))
    n_batches = len(rep.epochs[0].batch_losses)
    assert all(e.mixed_batches == n_batches for e in rep.epochs)
    assert all(0.0 <= lam <= 1.0 for e in rep.epochs for lam in e.lambdas)


@pytest.mark.parametrize("task", ["cls", "seg"])
def test_forced_full_keep_equals_plain(tiny_cls, tiny_seg, task):
    data = tiny_cls if task == "cls" else tiny_seg
    plain, _ = run(data, None, task=task)
    kept, _ = run(data, AugmentConfig(rho=1.0, fixed_lambda=1.0), task=task)
    assert batch_losses(plain) == batch_losses(kept)


@pytest.mark.parametrize("arch,task", [("pointnet-mini", "cls"), ("edgeconv-mini", "seg")])
def test_same_seed_bit_identical(tiny_cls, tiny_seg, arch, task):
    data = tiny_cls if task == "cls" else tiny_seg
    aug = AugmentConfig(rho=0.5, mode="pmc-k")
    a, ma = run(data, aug, seed=5, arch=arch, task=task)
    b, mb = run(data, aug, seed=5, arch=arch, task=task)
    assert batch_losses(a) == batch_losses(b)
    assert np.array_equal(ma.params.flat(), mb.params.flat())
    assert [e.metrics for e in a.epochs] == [e.metrics for e in b.epochs]


def test_report_serialization(tiny_cls):
    rep, _ = run(tiny_cls, AugmentConfig(), epochs=2)
    rows = rep.to_csv().strip().splitlines()
    assert rows[0] == "epoch,loss,oa,ma,lr,wall_ms"
    assert len(rows) == 3
    text = rep.to_text()
    assert text.startswith("task cls") and "final oa=" in text
    assert len(rep.epochs) == 2


def test_seg_report_columns(tiny_seg):
    rep, _ = run(tiny_seg, AugmentConfig(), epochs=1, arch="edgeconv-mini", task="seg")
    assert rep.to_csv().splitlines()[0] == "epoch,loss,miou,lr,wall_ms"
    assert 0.0 <= rep.final_metrics["miou"] <= 1.0


def test_sgd_cosine_loop_schedule(tiny_cls):
    model = PointModel(num_classes=2, seed=0)
    cfg = TrainConfig(epochs=4, batch_size=4, optimizer="sgd-cosine", lr_initial=0.01, lr_floor=0.001)
    rep = Trainer(model, tiny_cls, cfg, evaluate=False).fit()
    assert [e.lr for e in rep.epochs] == [cosine_lr(e, 4, 0.01, 0.001) for e in range(4)]


def test_nan_loss_aborts(tiny_cls):
    model = PointModel(num_classes=2, seed=0)
    model.params["fc2.w"].data[:] = np.nan
    with pytest.raises(NumericalError):
        Trainer(model, tiny_cls, TrainConfig(epochs=1, batch_size=4), evaluate=False).fit()


# -- gradient check ---------------------------------------------------------------------

@pytest.mark.parametrize("arch", ["pointnet-mini", "edgeconv-mini"])
@pytest.mark.parametrize("mode", ["pmc-r", "pmc-k"])
def test_gradient_check_through_hook(arch, mode):
    model = PointModel(arch, num_classes=3, k_neighbors=4, seed=1)
    rng = rng_stream(9, arch, mode)
    pts, labels = rng.normal(size=(4, 16, 3)), rng.integers(0, 3, 4)
    for hook in model.eligible_layers:
        mixer = BatchMixer(4, 16, AugmentConfig(mode=mode, fixed_lambda=0.5), rng)
        rep = gradient_check(model, pts, labels, mixer=mixer, hook=hook, n_params=200)
        assert rep.checked + rep.skipped_kinks == 200
        assert rep.checked >= 150
        assert rep.max_rel_error < 1e-4, (hook, rep.worst_param)


def test_gradient_check_seg():
    model = PointModel("edgeconv-mini", num_classes=2, num_parts=4, task="seg", k_neighbors=4, seed=2)
    rng = rng_stream(10)
    pts, labels = rng.normal(size=(3, 16, 3)), rng.integers(0, 2, 3)
    parts = rng.integers(0, 4, size=(3, 16))
    mixer = BatchMixer(3, 16, AugmentConfig(fixed_lambda=0.4), rng)
    rep = gradient_check(model, pts, labels, parts, mixer=mixer, hook=1)
    assert rep.max_rel_error < 1e-4


def test_replaced_rows_receive_no_gradient():
    model = PointModel("pointnet-mini", num_classes=3, tnet="off", seed=3)
    rng = rng_stream(11)
    pts = ad.Tensor(rng.normal(size=(4, 16, 3)), requires_grad=True)
    mixer = BatchMixer(4, 16, AugmentConfig(fixed_lambda=0.5), rng)
    logits, _ = model.forward(pts, hook=0, mixer=mixer)
    mixed_objective(logits, np.arange(4) % 3, (np.arange(4) + 1) % 3, mixer.lambda_realized).backward()
    # a row replaced in cloud b only receives gradient as a donor to the cloud that drew b
    donors = np.zeros((4, 16), bool)
    donors[mixer.perm] = ~mixer.keep
    silent = ~mixer.keep & ~donors
    assert np.all(pts.grad[silent] == 0.0)
