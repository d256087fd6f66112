"""Training, evaluation, and the ablation harness.

Optimization is Adam with decoupled weight decay. The learning rate
halves whenever the validation loss has not improved (strictly lower by
at least 1e-6) for ``plateau_patience`` consecutive epochs; the stale
counter resets after each halving. The retained checkpoint is the one
with the minimum validation loss seen during the run.

Everything downstream of a (configuration, seed) pair is deterministic:
shuffling uses a counter-based generator, reductions keep a fixed order,
and history/metric files are written with repr-exact floats, so reruns
produce byte-identical outputs.
"""

from __future__ import annotations

import json
import multiprocessing
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import (
    BatchTooSmallError,
    DatasetEmptyError,
    InvalidConfigError,
    ShapeMismatchError,
)
from .losses import LOSSES, LossConfig
from .metrics import ItemMetrics, MetricsReport, mean_of_items
from .network import NetConfig, NetParams, build_forward, forward_pair, init_params, load_net, save_net
from .raster import _atomic_write, threshold_to_mask
from .sndm import sndm_encode
from .synth import GenConfig, make_pairs

LOSS_HEADS = {
    "dice": "mask-sigmoid",
    "iou3d": "sndm-tanh",
    "iou3d-pen": "sndm-tanh",
    "iou3d-edge": "sndm-tanh",
}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 5e-5
    plateau_patience: int = 10
    lr_factor: float = 0.5
    max_epochs: int = 40
    loss_id: str = "iou3d-edge"
    seed: int = 0
    min_improvement: float = 1e-6

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2:
            raise BatchTooSmallError(f"batch_size must be >= 2 for batch norm, got {self.batch_size}")
        if self.lr <= 0 or self.weight_decay < 0 or self.max_epochs < 1 or self.plateau_patience < 1:
            raise InvalidConfigError("lr, max_epochs, plateau_patience must be positive; weight_decay nonnegative")
        if not 0.0 < self.lr_factor < 1.0:
            raise InvalidConfigError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if self.loss_id not in LOSSES:
            raise InvalidConfigError(f"unknown loss {self.loss_id!r}; choose from {sorted(LOSSES)}")
        return self


def reference_config(**overrides) -> TrainConfig:
    """Full-scale reference protocol: lr 1e-5 halved on 10-epoch plateaus, 120 epochs."""
    base = TrainConfig(lr=1e-5, max_epochs=120)
    return replace(base, **overrides)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One Adam update (beta1=0.9, beta2=0.999, eps=1e-8) with decoupled decay.

    Mutates ``params`` and ``state`` in place; gradients are read only.
    """
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    state.step += 1
    t = state.step
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ShapeMismatchError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        theta -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(theta.dtype)
        if weight_decay:
            theta -= (lr * weight_decay) * theta


@dataclass
class PlateauScheduler:
    """Halve (by ``factor``) after ``patience`` consecutive epochs without improvement.

    Improvement means a validation loss at least ``min_improvement`` below
    the best seen so far; the stale counter resets after each reduction,
    so another full ``patience`` run of bad epochs is needed for the next.
    """

    lr: float
    patience: int
    factor: float
    min_improvement: float = 1e-6
    best: float = np.inf
    stale: int = 0

    def update(self, val_loss: float) -> float:
        if val_loss <= self.best - self.min_improvement:
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        if val_loss < self.best:
            self.best = val_loss
        return self.lr


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_time: float


@dataclass
class TrainResult:
    params: NetParams
    net_config: NetConfig
    history: list
    best_epoch: int
    best_val_loss: float


def _targets_for(records, head: str):
    if head == "sndm-tanh":
        return [(sndm_encode(r.mask_a), sndm_encode(r.mask_b)) for r in records]
    return [(r.mask_a.astype(np.float32), r.mask_b.astype(np.float32)) for r in records]


def _stack_batch(records, targets, indices):
    img_a = np.stack([records[i].img_a for i in indices])
    img_b = np.stack([records[i].img_b for i in indices])
    gt_a = np.stack([targets[i][0] for i in indices])
    gt_b = np.stack([targets[i][1] for i in indices])
    return img_a, img_b, gt_a, gt_b


def _dataset_loss(records, targets, params, net_config, loss_fn, loss_cfg, batch_size):
    total = 0.0
    for start in range(0, len(records), batch_size):
        indices = range(start, min(start + batch_size, len(records)))
        img_a, img_b, gt_a, gt_b = _stack_batch(records, targets, indices)
        out = build_forward(img_a, img_b, params, net_config, mode="eval", requires_grad=False)
        loss_a = ad.map_loss(out.pred_a, gt_a, loss_fn, loss_cfg)
        loss_b = ad.map_loss(out.pred_b, gt_b, loss_fn, loss_cfg)
        total += (float(loss_a.data) + float(loss_b.data)) * 0.5 * len(indices)
    return total / len(records)


def train(
    train_records,
    val_records,
    net_config: NetConfig,
    train_config: TrainConfig,
    loss_config: LossConfig = LossConfig(),
) -> TrainResult:
    """Optimize a fresh network on the given pair records."""
    net_config = net_config.validate()
    cfg = train_config.validate()
    if LOSS_HEADS[cfg.loss_id] != net_config.output_head:
        raise InvalidConfigError(
            f"loss {cfg.loss_id!r} needs output_head {LOSS_HEADS[cfg.loss_id]!r}, config has {net_config.output_head!r}"
        )
    if not train_records or not val_records:
        raise DatasetEmptyError("training and validation sets must be nonempty")

    loss_fn = LOSSES[cfg.loss_id]
    train_targets = _targets_for(train_records, net_config.output_head)
    val_targets = _targets_for(val_records, net_config.output_head)

    params = init_params(net_config, seed=cfg.seed)
    state = AdamState()
    rng = np.random.Generator(np.random.Philox(np.uint64(cfg.seed)))
    scheduler = PlateauScheduler(cfg.lr, cfg.plateau_patience, cfg.lr_factor, cfg.min_improvement)
    history: list[EpochStats] = []
    best_val = np.inf
    best_epoch = 0
    best_params = params.clone()
    n = len(train_records)

    for epoch in range(1, cfg.max_epochs + 1):
        tic = time.perf_counter()
        lr = scheduler.lr
        order = rng.permutation(n)
        seen = 0
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            indices = order[start : start + cfg.batch_size]
            if len(indices) < 2:
                continue  # batch norm needs at least two items
            img_a, img_b, gt_a, gt_b = _stack_batch(train_records, train_targets, indices)
            out = build_forward(img_a, img_b, params, net_config, mode="train")
            loss = (ad.map_loss(out.pred_a, gt_a, loss_fn, loss_config) + ad.map_loss(out.pred_b, gt_b, loss_fn, loss_config)) * 0.5
            loss.backward()
            grads = {name: tensor.grad for name, tensor in out.param_tensors.items()}
            adam_step(params.values, grads, state, lr, cfg.weight_decay)
            loss_sum += float(loss.data) * len(indices)
            seen += len(indices)
        train_loss = loss_sum / max(seen, 1)
        val_loss = _dataset_loss(val_records, val_targets, params, net_config, loss_fn, loss_config, cfg.batch_size)

        scheduler.update(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = params.clone()

        # lr column reports the rate used during this epoch; schedule
        # reductions take effect from the next row
        history.append(EpochStats(epoch, train_loss, val_loss, lr, time.perf_counter() - tic))

    return TrainResult(best_params, net_config, history, best_epoch, float(best_val))


def write_history_csv(history, path: str) -> None:
    lines = ["epoch,train_loss,val_loss,lr\n"]
    lines += [f"{h.epoch},{h.train_loss!r},{h.val_loss!r},{h.lr!r}\n" for h in history]
    _atomic_write(path, "".join(lines).encode("ascii"))


def write_metrics_json(report: MetricsReport, path: str) -> None:
    _atomic_write(path, (json.dumps(report.to_json_dict(), indent=2) + "\n").encode("ascii"))


def predictions_to_masks(pred: np.ndarray, head: str) -> np.ndarray:
    """Per-head decode rule: sign for the signed map, 0.5 for probabilities."""
    if head == "sndm-tanh":
        return pred > 0.0
    return pred > 0.5


def evaluate(
    params: NetParams,
    net_config: NetConfig,
    records,
    batch_size: int = 8,
    forward_fn=None,
) -> MetricsReport:
    """Per-pair metrics (mean over the pair's two images) plus dataset means.

    ``forward_fn`` defaults to the network itself; tests may inject an
    oracle that returns known maps.
    """
    if not records:
        raise DatasetEmptyError("evaluation set is empty")
    if forward_fn is None:
        forward_fn = lambda a, b: forward_pair(a, b, params, net_config, mode="eval")  # noqa: E731
    head = net_config.output_head
    report = MetricsReport()
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        pred_a, pred_b = forward_fn(np.stack([r.img_a for r in chunk]), np.stack([r.img_b for r in chunk]))
        for offset, record in enumerate(chunk):
            per_image = MetricsReport()
            per_image.add(record.pair_id, predictions_to_masks(pred_a[offset], head), record.mask_a)
            per_image.add(record.pair_id, predictions_to_masks(pred_b[offset], head), record.mask_b)
            report.add_item(mean_of_items(per_image.items))
    return report


def evaluate_checkpoint(path: str, records, batch_size: int = 8) -> MetricsReport:
    net_config, params = load_net(path)
    return evaluate(params, net_config, records, batch_size=batch_size)


def save_result(path: str, result: TrainResult) -> None:
    save_net(path, result.net_config, result.params)


# ---------------------------------------------------------------------------
# ablation harness

ABLATION_VARIANTS = (
    ("baseline", False, "mask-sigmoid", "dice"),
    ("baseline_plus", True, "mask-sigmoid", "dice"),
    ("full", True, "sndm-tanh", "iou3d-edge"),
)


@dataclass(frozen=True)
class AblationConfig:
    n_train: int = 96
    n_val: int = 24
    n_test: int = 32
    epochs: int = 18
    batch_size: int = 4
    lr: float = 1e-3
    image_size: int = 64


def _ablation_datasets(seed: int, cfg: AblationConfig):
    gen = GenConfig(image_size=cfg.image_size)
    base = seed << 20  # disjoint seed blocks per run
    train_set = make_pairs(base, gen, cfg.n_train)
    val_set = make_pairs(base + cfg.n_train, gen, cfg.n_val)
    test_set = make_pairs(base + cfg.n_train + cfg.n_val, gen, cfg.n_test)
    return train_set, val_set, test_set


def _ablation_job(args):
    run, seed, variant, cfg = args
    name, dense, head, loss_id = variant
    train_set, val_set, test_set = _ablation_datasets(seed, cfg)
    net_config = NetConfig(
        input_size=cfg.image_size,
        dense_connections=dense,
        output_head=head,
    )
    train_cfg = TrainConfig(
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        max_epochs=cfg.epochs,
        loss_id=loss_id,
        seed=seed,
    )
    result = train(train_set, val_set, net_config, train_cfg)
    mean = evaluate(result.params, net_config, test_set).mean()
    return run, name, mean["precision"], mean["jaccard"]


def worker_count(total_jobs: int) -> int:
    """Honor the SNDM_THREADS cap; default to the machine's cores."""
    env = os.environ.get("SNDM_THREADS", "").strip()
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, total_jobs))


def ablation(runs: int, base_seed: int = 0, config: AblationConfig = AblationConfig()) -> dict:
    """Train every variant for ``runs`` seeds and tabulate mean metrics.

    Jobs are independent; with more than one worker they run in parallel
    processes, each pinned to a single BLAS thread.
    """
    if runs < 1:
        raise InvalidConfigError(f"runs must be >= 1, got {runs}")
    jobs = [
        (run, base_seed + run, variant, config)
        for run in range(runs)
        for variant in ABLATION_VARIANTS
    ]
    workers = worker_count(len(jobs))
    if workers == 1:
        outcomes = [_ablation_job(job) for job in jobs]
    else:
        saved = {key: os.environ.get(key) for key in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS")}
        os.environ["OPENBLAS_NUM_THREADS"] = "1"
        os.environ["OMP_NUM_THREADS"] = "1"
        try:
            context = multiprocessing.get_context("spawn")
            with context.Pool(processes=workers) as pool:
                outcomes = pool.map(_ablation_job, jobs)
        finally:
            for key, value in saved.items():
                if value is None:
                    os.environ.pop(key, None)
                else:
                    os.environ[key] = value

    per_run: dict = {}
    for run, name, prec, jac in outcomes:
        per_run.setdefault(run, {"run": run, "seed": base_seed + run})[name] = {
            "precision": prec,
            "jaccard": jac,
        }
    rows = []
    for name, _, _, _ in ABLATION_VARIANTS:
        precisions = [per_run[run][name]["precision"] for run in range(runs)]
        jaccards = [per_run[run][name]["jaccard"] for run in range(runs)]
        rows.append(
            {
                "name": name,
                "precision": sum(precisions) / runs,
                "jaccard": sum(jaccards) / runs,
            }
        )
    return {
        "runs": runs,
        "base_seed": base_seed,
        "rows": rows,
        "per_run": [per_run[run] for run in range(runs)],
    }


def write_ablation_json(table: dict, path: str) -> None:
    _atomic_write(path, (json.dumps(table, indent=2) + "\n").encode("ascii"))
