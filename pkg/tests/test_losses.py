import numpy as np
import pytest

from sndmseg.errors import ShapeMismatchError
from sndmseg.losses import (
    LOSSES,
    LossConfig,
    grad_check_loss,
    loss_dice,
    loss_iou3d,
    loss_iou3d_edge,
    loss_iou3d_penalized,
    penalty_factor,
)
from sndmseg.sndm import sndm_encode

EPS = LossConfig().epsilon


def random_pair(rng, h=12, w=12):
    while True:
        mask = rng.random((h, w)) < 0.5
        if mask.any() and not mask.all():
            break
    gt = sndm_encode(mask).astype(np.float64)
    pred = rng.uniform(-1.0, 1.0, size=(h, w))
    return pred, gt


def test_penalty_factor_branches():
    cfg = LossConfig(lam=5.0)
    assert penalty_factor(0.5, 1.0, cfg) == 1.0
    assert penalty_factor(-0.5, 1.0, cfg) == 5.0
    assert penalty_factor(0.0, 1.0, cfg) == 5.0


def test_dice_hand_values():
    assert abs(loss_dice(np.array([[0.5]]), np.array([[1.0]])).value - (1.0 - 1.0 / (1.5 + EPS))) < 1e-12
    gt = np.array([[1.0, 0.0], [1.0, 1.0]])
    assert loss_dice(gt.copy(), gt).value < 1e-6  # perfect overlap
    assert abs(loss_dice(np.zeros((2, 2)), gt).value - 1.0) < 1e-6  # no overlap


def test_iou3d_hand_values():
    gt = np.array([[1.0, -1.0]])
    assert abs(loss_iou3d(np.array([[0.5, -1.0]]), gt).value - (1.0 - 1.5 / (2.0 + EPS))) < 1e-12
    assert abs(loss_iou3d(np.array([[-0.5, -1.0]]), gt).value - (1.0 - 0.5 / (2.0 + EPS))) < 1e-12


def test_penalized_hand_value_exceeds_one():
    gt = np.array([[1.0, -1.0]])
    value = loss_iou3d_penalized(np.array([[-0.5, -1.0]]), gt, LossConfig(lam=5.0)).value
    assert abs(value - (1.0 - (-1.5) / (6.0 + EPS))) < 1e-12
    assert value > 1.0 and np.isfinite(value)


def test_edge_hand_values():
    gt = np.array([[1.0, -1.0]])
    # unit labels make the edge weights 1, so the plain value reappears
    assert abs(loss_iou3d_edge(np.array([[0.5, -1.0]]), gt).value - loss_iou3d(np.array([[0.5, -1.0]]), gt).value) < 1e-15
    gt2 = np.array([[0.25, -1.0]])
    value = loss_iou3d_edge(np.array([[0.1, -1.0]]), gt2, LossConfig(lam=5.0)).value
    assert abs(value - (1.0 - 1.05 / (1.125 + EPS))) < 1e-12
    assert abs(value - 0.0666667) < 1e-6


def test_identity_for_all_losses():
    rng = np.random.Generator(np.random.Philox(51))
    for _ in range(10):
        mask = rng.random((9, 9)) < 0.5
        if not mask.any() or mask.all():
            continue
        gt = sndm_encode(mask).astype(np.float64)
        for name, fn in LOSSES.items():
            target = mask.astype(np.float64) if name == "dice" else gt
            report = fn(target.copy(), target)
            assert abs(report.value) < 1e-6, name


def test_lambda_one_reduces_to_plain_iou3d():
    rng = np.random.Generator(np.random.Philox(53))
    cfg = LossConfig(lam=1.0)
    for _ in range(10):
        pred, gt = random_pair(rng)
        a = loss_iou3d_penalized(pred, gt, cfg)
        b = loss_iou3d(pred, gt, cfg)
        assert a.value == b.value
        assert np.array_equal(a.grad, b.grad)


def test_edge_with_unit_labels_reduces_to_plain_iou3d():
    rng = np.random.Generator(np.random.Philox(59))
    cfg = LossConfig(lam=1.0)
    gt = np.where(rng.random((8, 8)) < 0.5, 1.0, -1.0)
    pred = rng.uniform(-1.0, 1.0, size=(8, 8))
    a = loss_iou3d_edge(pred, gt, cfg)
    b = loss_iou3d(pred, gt, cfg)
    assert a.value == b.value
    assert np.array_equal(a.grad, b.grad)


def test_flip_monotonicity():
    rng = np.random.Generator(np.random.Philox(61))
    cfg = LossConfig(lam=5.0)
    for fn in (loss_iou3d_penalized, loss_iou3d_edge):
        pred, gt = random_pair(rng)
        pred = np.abs(pred) * np.sign(gt)  # all signs correct
        base = fn(pred, gt, cfg).value
        flipped = pred.copy()
        flipped[3, 3] = -flipped[3, 3]
        assert fn(flipped, gt, cfg).value > base


def test_lambda_monotonicity():
    rng = np.random.Generator(np.random.Philox(67))
    pred, gt = random_pair(rng)
    pred = np.abs(pred) * np.sign(gt)
    pred[2, 2] = -pred[2, 2]  # one sign error
    values = [loss_iou3d_penalized(pred, gt, LossConfig(lam=lam)).value for lam in (1.0, 2.0, 5.0, 9.0)]
    assert all(b > a for a, b in zip(values, values[1:]))
    correct = np.abs(pred)
    correct *= np.sign(gt)
    flat = [loss_iou3d_penalized(correct, gt, LossConfig(lam=lam)).value for lam in (1.0, 5.0, 9.0)]
    assert flat[0] == flat[1] == flat[2]


def test_gradients_match_finite_differences():
    for name in LOSSES:
        worst = grad_check_loss(name, trials=40, seed=7)
        assert worst < 1e-5, (name, worst)


def test_shape_mismatch():
    for fn in LOSSES.values():
        with pytest.raises(ShapeMismatchError):
            fn(np.zeros((2, 2)), np.ones((3, 2)))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lam=0.5).validate()
    with pytest.raises(ValueError):
        LossConfig(epsilon=0.0).validate()
    with pytest.raises(ValueError):
        LossConfig(epsilon=1e-3).validate()


def test_grad_shape_matches_pred():
    rng = np.random.Generator(np.random.Philox(71))
    pred, gt = random_pair(rng, 6, 11)
    for name, fn in LOSSES.items():
        target = (gt > 0).astype(np.float64) if name == "dice" else gt
        p = np.clip(pred, 0.0, 1.0) if name == "dice" else pred
        report = fn(p, target)
        assert report.grad.shape == p.shape
        assert np.isfinite(report.value)
