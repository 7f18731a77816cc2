import math

import numpy as np
import pytest

from latticenet.autodiff import Tensor
from latticenet.datasets import make_dataset
from latticenet.lattice import PointCloud
from latticenet.network import LatticeNet, LayerSpec
from latticenet.training import (
    AugmentConfig,
    Metrics,
    NonFiniteGradientError,
    OptimState,
    PlateauScheduler,
    TrainConfig,
    adam_step,
    augment,
    compute_metrics,
    evaluate,
    fit,
    format_record,
    mirror_cloud,
    plateau_schedule,
    train_step,
)

from conftest import random_cloud

SMALL = LayerSpec(channels=(8, 16), groups=4, pointnet_hidden=(8,), pointnet_width=8, encoder_blocks=1)


# ---------------------------------------------------------------- adam


def test_adam_scalar_reference_step():
    p = Tensor(np.array([0.5]), requires_grad=True)
    p.grad = np.array([1.0])
    adam_step({"p": p}, OptimState(lr=1e-3, weight_decay=0.0))
    # m = 0.1, v = 0.001; bias corrected both are 1
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    assert p.data[0] == pytest.approx(0.5 - 1e-3 * m_hat / (math.sqrt(v_hat) + 1e-8), abs=1e-15)


def test_adam_two_steps_against_recurrence():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = OptimState(lr=0.01, weight_decay=0.1)
    grads = [0.3, -0.7]
    ref, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        p.grad = np.array([g])
        adam_step({"p": p}, state)
        geff = g + 0.1 * ref
        m = 0.9 * m + 0.1 * geff
        v = 0.999 * v + 0.001 * geff**2
        ref -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert p.data[0] == pytest.approx(ref, abs=1e-14)


def test_adam_zero_grad_no_decay_is_noop(rng):
    p = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    before = p.data.copy()
    p.grad = np.zeros((3, 2))
    adam_step({"p": p}, OptimState(weight_decay=0.0))
    assert np.array_equal(p.data, before)


def test_adam_identical_params_stay_identical(rng):
    a = Tensor(np.ones(4), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    state = OptimState()
    for _ in range(5):
        g = rng.normal(size=4)
        a.grad, b.grad = g.copy(), g.copy()
        adam_step({"a": a, "b": b}, state)
    assert np.array_equal(a.data, b.data)


def test_adam_decoupled_decay_shrinks_without_grad_signal():
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.array([0.0])
    adam_step({"p": p}, OptimState(lr=0.1, weight_decay=0.5, decoupled=True))
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adam_strict_rejects_nan():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([np.nan])
    with pytest.raises(NonFiniteGradientError):
        adam_step({"p": p}, OptimState(), strict=True)


# ---------------------------------------------------------------- scheduler


def test_decreasing_loss_keeps_lr():
    lrs = plateau_schedule(np.linspace(1.0, 0.1, 50), initial_lr=1e-3)
    assert set(lrs) == {1e-3}


def test_flat_loss_reduces_once_after_patience():
    lrs = plateau_schedule([1.0] * 12, initial_lr=1e-3, patience=10)
    assert lrs[:11] == [1e-3] * 11
    assert lrs[11] == pytest.approx(1e-4)


def _replay(losses, lr0, patience, threshold, factor, min_lr):
    """Direct simulation of the plateau rule, written independently of the class."""
    best, bad, k, out = float("inf"), 0, 0, []
    for x in losses:
        if best == float("inf") or x < best - best * threshold:
            best, bad = x, 0
        else:
            bad += 1
        if bad == patience + 1:
            bad = 0
            if lr0 * factor**-k > min_lr:
                k += 1
        out.append(max(lr0 * factor**-k, min_lr))
    return out


def test_scheduler_matches_replay(rng):
    for trial in range(20):
        n = 300
        trend = np.exp(-np.linspace(0, rng.uniform(0.5, 3), n))
        losses = trend + rng.normal(scale=rng.uniform(0, 0.05), size=n) + 0.3
        kw = dict(patience=int(rng.integers(0, 15)), threshold=float(rng.choice([0.0, 1e-3, 1e-2])), factor=10.0, min_lr=1e-6)
        got = plateau_schedule(losses, initial_lr=1e-3, **kw)
        want = _replay(losses, 1e-3, **kw)
        assert np.allclose(got, want, rtol=1e-12)
    sched = PlateauScheduler(patience=0, min_lr=1e-5)
    for _ in range(10):
        sched.step(1.0)
    assert sched.lr == 1e-5


# ---------------------------------------------------------------- augmentation


def test_disabled_augmentation_is_identity(rng):
    cloud = random_cloud(rng, labels=np.arange(40))
    out = augment(cloud, rng, AugmentConfig(mirror=False, translation=0.0))
    assert np.array_equal(out.positions, cloud.positions)


def test_mirror_twice_is_identity(rng):
    cloud = PointCloud(rng.normal(size=(10, 3)), features=rng.normal(size=(10, 3)), channels=("nx", "ny", "nz"))
    once = mirror_cloud(cloud, [1])
    assert np.array_equal(once.features[:, 1], -cloud.features[:, 1])
    twice = mirror_cloud(once, [1])
    assert np.array_equal(twice.positions, cloud.positions)
    assert np.array_equal(twice.features, cloud.features)


def test_labels_survive_augmentation(rng):
    labels = rng.integers(0, 5, size=40)
    cloud = random_cloud(rng, labels=labels)
    for _ in range(10):
        out = augment(cloud, rng, AugmentConfig(translation=0.5, color_jitter=0.1))
        assert np.array_equal(out.labels, labels)


# ---------------------------------------------------------------- metrics


def test_miou_worked_example():
    m = compute_metrics([0, 1, 1, 1], [0, 0, 1, 1], 2)
    assert m.iou.tolist() == [0.5, 2 / 3]
    assert m.miou == pytest.approx(7 / 12)


def test_miou_perfect_and_all_wrong():
    assert compute_metrics([0, 1, 2], [0, 1, 2], 3).miou == 1.0
    assert compute_metrics([1, 1, 0], [0, 0, 1], 2).miou == 0.0


def test_metrics_skip_absent_classes_and_ignore_index():
    m = compute_metrics([0, 0, 1], [0, 0, -1], 3)
    assert np.isnan(m.iou[2]) and np.isnan(m.iou[1])
    assert m.miou == 1.0 and m.accuracy == 1.0
    with pytest.raises(ValueError):
        Metrics.empty(2).update([0, 3], [0, 1])


# ---------------------------------------------------------------- loop


def test_zero_epochs_returns_initial_params():
    train, val = make_dataset("two-spheres", 300, seed=0, clouds=2)
    model = LatticeNet.create(SMALL, seed=5)
    init = {k: v.copy() for k, v in model.state_dict().items()}
    res = fit(model, train, val, TrainConfig(epochs=0))
    assert res.history == []
    for k in init:
        assert np.array_equal(res.best_state[k], init[k])


def test_fit_is_deterministic():
    train, val = make_dataset("two-spheres", 400, seed=1, clouds=3)
    logs = []
    for _ in range(2):
        model = LatticeNet.create(SMALL, seed=0)
        res = fit(model, train, val, TrainConfig(epochs=2, seed=7, augment=AugmentConfig(translation=0.1)))
        logs.append("\n".join(format_record(r) for r in res.history))
    assert logs[0] == logs[1]
    assert '"val_miou"' in logs[0]


def test_fit_without_validation_tracks_train_loss():
    train, _ = make_dataset("two-spheres", 300, seed=2, clouds=2)
    res = fit(LatticeNet.create(SMALL), train, (), TrainConfig(epochs=2))
    assert all("val_miou" not in r for r in res.history)
    assert res.best_miou == pytest.approx(-min(r["train_loss"] for r in res.history), abs=1e-8)


def test_fit_rejects_unlabelled():
    with pytest.raises(ValueError):
        fit(LatticeNet.create(SMALL), [PointCloud(np.zeros((3, 3)))], (), TrainConfig(epochs=1))


def test_evaluate_perfect_model_stub():
    class Stub:
        spec = LayerSpec(num_classes=2)

        @staticmethod
        def predict(cloud):
            return cloud.labels

    cloud = PointCloud(np.zeros((4, 3)), labels=np.array([0, 1, 1, 0]))
    assert evaluate(Stub(), [cloud]).miou == 1.0


def test_train_config_round_trip():
    cfg = TrainConfig(epochs=3, augment=AugmentConfig(mirror_axes=(0,), translation=0.2))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epoch": 1})


# ---------------------------------------------------------------- invariants


def test_loss_strictly_decreases_on_fixed_cloud():
    train, _ = make_dataset("two-spheres", 1000, seed=0, clouds=2)
    cloud = train[0].replace(sigma=0.1)
    model = LatticeNet.create(LayerSpec(), seed=0)
    state = OptimState(lr=1e-3)
    losses = [train_step(model, cloud, state, TrainConfig()) for _ in range(10)]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_miou_invariant_under_joint_permutation(rng):
    pred = rng.integers(0, 4, size=300)
    gt = rng.integers(0, 4, size=300)
    perm = rng.permutation(300)
    m = compute_metrics(pred, gt, 4)
    assert compute_metrics(pred[perm], gt[perm], 4).miou == m.miou
    assert m.confusion.sum(axis=1).tolist() == np.bincount(gt, minlength=4).tolist()


def test_scheduler_lr_non_increasing_and_quantized(rng):
    losses = 1.0 + np.abs(rng.normal(size=400)).cumsum() * 1e-4
    lrs = plateau_schedule(losses, initial_lr=1e-3, patience=3)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    ks = -np.log10(np.array(lrs) / 1e-3)
    assert np.allclose(ks, np.round(ks), atol=1e-9) and lrs[-1] == pytest.approx(1e-6)
