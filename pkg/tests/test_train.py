import numpy as np
import pytest

from sndmseg.errors import BatchTooSmallError, DatasetEmptyError, InvalidConfigError
from sndmseg.losses import LossConfig
from sndmseg.network import NetConfig, init_params
from sndmseg.sndm import sndm_encode
from sndmseg.synth import GenConfig, make_pairs
from sndmseg.train import (
    AdamState,
    PlateauScheduler,
    TrainConfig,
    adam_step,
    evaluate,
    reference_config,
    train,
    write_history_csv,
    write_metrics_json,
)

TINY_NET = NetConfig(input_size=32, widths=(6, 10), levels=2)
TINY_GEN = GenConfig(image_size=32)


def tiny_sets(n_train=6, n_val=3, seed=900):
    return make_pairs(seed, TINY_GEN, n_train), make_pairs(seed + 500, TINY_GEN, n_val)


def test_adam_first_step_matches_closed_form():
    params = {"w": np.array([1.0])}
    state = AdamState()
    adam_step(params, {"w": np.array([1.0])}, state, lr=0.1, weight_decay=0.0)
    # after bias correction the first update is -lr * 1 / (1 + eps)
    assert abs(params["w"][0] - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-12


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([0.7, -0.3])}
    state = AdamState()
    for _ in range(5):
        adam_step(params, {"w": np.zeros(2)}, state, lr=0.1, weight_decay=0.0)
    assert params["w"].tolist() == [0.7, -0.3]


def test_adam_decay_only_shrinks_params():
    params = {"w": np.array([2.0])}
    state = AdamState()
    lr, wd = 0.01, 0.1
    for step in range(1, 4):
        adam_step(params, {"w": np.zeros(1)}, state, lr=lr, weight_decay=wd)
        assert abs(params["w"][0] - 2.0 * (1.0 - lr * wd) ** step) < 1e-12


def test_plateau_halves_exactly_on_patience():
    sched = PlateauScheduler(lr=1.0, patience=3, factor=0.5)
    lrs = [sched.update(v) for v in (1.0, 0.9, 0.95, 0.95, 0.95, 0.8, 0.85, 0.85, 0.85, 0.85)]
    #                                 imp  imp  s1    s2    s3=cut imp  s1    s2    s3=cut s1
    assert lrs == [1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.25, 0.25]


def test_plateau_improvement_threshold():
    sched = PlateauScheduler(lr=1.0, patience=2, factor=0.5, min_improvement=1e-6)
    sched.update(1.0)
    assert sched.update(1.0 - 5e-7) == 1.0  # below threshold: stale
    assert sched.update(1.0 - 4e-7) == 0.5  # second stale epoch halves


def test_train_config_validation():
    with pytest.raises(BatchTooSmallError):
        TrainConfig(batch_size=1).validate()
    with pytest.raises(InvalidConfigError):
        TrainConfig(lr_factor=1.0).validate()
    with pytest.raises(InvalidConfigError):
        TrainConfig(loss_id="mse").validate()
    assert reference_config().lr == 1e-5
    assert reference_config().max_epochs == 120


def test_loss_head_compatibility():
    train_set, val_set = tiny_sets()
    with pytest.raises(InvalidConfigError):
        train(train_set, val_set, TINY_NET, TrainConfig(loss_id="dice", max_epochs=1))
    with pytest.raises(DatasetEmptyError):
        train([], val_set, TINY_NET, TrainConfig(max_epochs=1))


def test_smoke_train_two_epochs(tmp_path):
    train_set, val_set = tiny_sets(8, 4)
    cfg = TrainConfig(max_epochs=2, seed=3)
    result = train(train_set, val_set, TINY_NET, cfg)
    assert len(result.history) == 2
    assert result.best_epoch in (1, 2)
    assert result.best_val_loss == min(h.val_loss for h in result.history)
    history_path = tmp_path / "history.csv"
    write_history_csv(result.history, str(history_path))
    lines = history_path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,lr"
    assert len(lines) == 3
    assert all(len(line.split(",")) == 4 for line in lines[1:])


def test_train_rerun_is_identical():
    train_set, val_set = tiny_sets(6, 3)
    cfg = TrainConfig(max_epochs=2, seed=11)
    first = train(train_set, val_set, TINY_NET, cfg)
    second = train(train_set, val_set, TINY_NET, cfg)
    assert [(h.train_loss, h.val_loss, h.lr) for h in first.history] == [
        (h.train_loss, h.val_loss, h.lr) for h in second.history
    ]
    for name in first.params.values:
        assert np.array_equal(first.params.values[name], second.params.values[name])


def test_best_checkpoint_is_min_val_loss():
    train_set, val_set = tiny_sets(8, 4, seed=42)
    result = train(train_set, val_set, TINY_NET, TrainConfig(max_epochs=4, seed=1))
    vals = [h.val_loss for h in result.history]
    assert result.best_epoch == int(np.argmin(vals)) + 1


def test_evaluate_with_oracle_predictions():
    records = make_pairs(300, TINY_GEN, 4)
    params = init_params(TINY_NET, seed=0)

    def oracle(img_a, img_b):
        start = oracle.cursor
        chunk = records[start : start + len(img_a)]
        oracle.cursor += len(img_a)
        return (
            np.stack([sndm_encode(r.mask_a) for r in chunk]),
            np.stack([sndm_encode(r.mask_b) for r in chunk]),
        )

    oracle.cursor = 0
    report = evaluate(params, TINY_NET, records, forward_fn=oracle)
    mean = report.mean()
    assert mean["jaccard"] == 1.0
    assert mean["precision"] == 1.0
    assert mean["pixel_accuracy"] == 1.0


def test_evaluate_untrained_is_well_formed(tmp_path):
    records = make_pairs(301, TINY_GEN, 3)
    params = init_params(TINY_NET, seed=7)
    report = evaluate(params, TINY_NET, records)
    assert len(report.items) == 3
    for item in report.items:
        assert 0.0 <= item.jaccard <= 1.0
        assert 0.0 <= item.precision <= 1.0
        assert 0.0 <= item.pixel_accuracy <= 1.0
    path = tmp_path / "report.json"
    write_metrics_json(report, str(path))
    import json

    payload = json.loads(path.read_text())
    assert set(payload) == {"items", "mean"}
    assert len(payload["items"]) == 3


def test_evaluate_empty_dataset():
    with pytest.raises(DatasetEmptyError):
        evaluate(init_params(TINY_NET, seed=0), TINY_NET, [])


def test_lr_column_non_increasing():
    train_set, val_set = tiny_sets(6, 3, seed=77)
    cfg = TrainConfig(max_epochs=5, seed=2, plateau_patience=1, lr_factor=0.5)
    result = train(train_set, val_set, TINY_NET, cfg)
    lrs = [h.lr for h in result.history]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
