"""Loss family for signed-map regression, each with its analytic gradient.

Four losses, from baseline to full:

* ``loss_dice`` — soft Dice on a probability map against a binary mask.
* ``loss_iou3d`` — treats a signed map as a 3D shape (height = |value|)
  and measures one minus intersection-over-union via per-pixel min/max
  sums; background values enter negated so both classes contribute
  positive heights.
* ``loss_iou3d_penalized`` — multiplies each pixel's min and max terms by
  a penalty factor: 1 where predicted and labeled values agree in sign,
  ``lam`` where they do not.
* ``loss_iou3d_edge`` — additionally weights every pixel by the square
  root of its labeled magnitude, which peaks at the object contour.

The foreground/background split always comes from the sign of the label
map, so the losses are well-defined for arbitrary predictions. Penalty
factors and edge weights are gates: constants of the prediction (and of
the label), carrying no gradient. At min/max ties the derivative follows
the first argument; terms are written prediction-first for foreground and
label-first for background.

All computation is float64 regardless of input dtype, so the analytic
gradients can be checked against central finite differences at tight
tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .sndm import sndm_encode


@dataclass(frozen=True)
class LossConfig:
    """lam: sign-mismatch penalty multiplier; epsilon: denominator guard."""

    lam: float = 5.0
    epsilon: float = 1e-8

    def validate(self) -> "LossConfig":
        if not self.lam >= 1.0:
            raise ValueError(f"lam must be >= 1, got {self.lam}")
        if not 0.0 < self.epsilon <= 1e-4:
            raise ValueError(f"epsilon must be in (0, 1e-4], got {self.epsilon}")
        return self


DEFAULT_CONFIG = LossConfig()


@dataclass
class LossReport:
    value: float
    grad: np.ndarray  # dL/dprediction, same shape as the prediction


def _check_shapes(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeMismatchError(f"pred shape {p.shape} != gt shape {g.shape}")
    return p, g


def penalty_factor(pred_value: float, gt_value: float, cfg: LossConfig = DEFAULT_CONFIG) -> float:
    """1 when prediction and label agree in sign, cfg.lam otherwise."""
    return 1.0 if pred_value * gt_value > 0.0 else cfg.lam


def loss_dice(pred_prob, gt_mask, cfg: LossConfig = DEFAULT_CONFIG) -> LossReport:
    """Soft Dice loss 1 - 2*sum(p*g) / (sum(p) + sum(g) + eps) with gradient."""
    p, g = _check_shapes(pred_prob, np.asarray(gt_mask, dtype=np.float64))
    inter = np.sum(p * g)
    denom = np.sum(p) + np.sum(g) + cfg.epsilon
    value = 1.0 - 2.0 * inter / denom
    grad = -2.0 * (g * denom - inter) / (denom * denom)
    return LossReport(float(value), grad)


def _iou3d_core(pred, gt, weights, cfg) -> LossReport:
    """Shared min/max-sum machinery; ``weights`` are per-pixel gradient-free gates."""
    p, g = _check_shapes(pred, gt)
    sign = np.where(g > 0.0, 1.0, -1.0)
    fg = g > 0.0
    ps = sign * p
    gs = sign * g
    mins = np.minimum(ps, gs)
    maxs = np.maximum(ps, gs)
    # tie routing: foreground terms are prediction-first, background label-first
    dmin = np.where(fg, ps <= gs, ps < gs).astype(np.float64)
    dmax = np.where(fg, ps >= gs, ps > gs).astype(np.float64)
    num = np.sum(weights * mins)
    den = np.sum(weights * maxs) + cfg.epsilon
    value = 1.0 - num / den
    grad = sign * weights * (num * dmax - den * dmin) / (den * den)
    return LossReport(float(value), grad)


def loss_iou3d(pred, gt, cfg: LossConfig = DEFAULT_CONFIG) -> LossReport:
    """3D IOU loss of two signed maps (no penalty, no edge weighting)."""
    p, g = _check_shapes(pred, gt)
    return _iou3d_core(p, g, np.ones_like(g), cfg)


def loss_iou3d_penalized(pred, gt, cfg: LossConfig = DEFAULT_CONFIG) -> LossReport:
    """3D IOU loss with per-pixel sign-mismatch penalty factors."""
    p, g = _check_shapes(pred, gt)
    factors = np.where(p * g > 0.0, 1.0, cfg.lam)
    return _iou3d_core(p, g, factors, cfg)


def loss_iou3d_edge(pred, gt, cfg: LossConfig = DEFAULT_CONFIG) -> LossReport:
    """Penalized 3D IOU loss with sqrt(|label|) per-pixel edge weights."""
    p, g = _check_shapes(pred, gt)
    factors = np.where(p * g > 0.0, 1.0, cfg.lam)
    weights = factors * np.sqrt(np.abs(g))
    return _iou3d_core(p, g, weights, cfg)


LOSSES = {
    "dice": loss_dice,
    "iou3d": loss_iou3d,
    "iou3d-pen": loss_iou3d_penalized,
    "iou3d-edge": loss_iou3d_edge,
}


def _random_two_class_mask(rng, h, w):
    while True:
        m = rng.random((h, w)) < rng.uniform(0.2, 0.8)
        if m.any() and not m.all():
            return m


def grad_check_loss(
    loss_id: str,
    trials: int = 100,
    seed: int = 0,
    cfg: LossConfig = DEFAULT_CONFIG,
    pixels_per_trial: int = 6,
    step: float = 1e-4,
) -> float:
    """Compare analytic gradients against central finite differences.

    Sample points keep every pixel away from the nondifferentiable sets
    (|p - g| > 1e-2 and |p| > 1e-2). Returns the maximum error relative
    to the largest gradient magnitude of each sampled map.
    """
    if loss_id not in LOSSES:
        raise ValueError(f"unknown loss {loss_id!r}")
    fn = LOSSES[loss_id]
    rng = np.random.Generator(np.random.Philox(seed))
    worst = 0.0
    for _ in range(trials):
        h = int(rng.integers(5, 13))
        w = int(rng.integers(5, 13))
        mask = _random_two_class_mask(rng, h, w)
        if loss_id == "dice":
            gt = mask.astype(np.float64)
            sample = lambda size: rng.uniform(0.0, 1.0, size)  # noqa: E731
        else:
            gt = sndm_encode(mask).astype(np.float64)
            sample = lambda size: rng.uniform(-1.0, 1.0, size)  # noqa: E731
        pred = sample((h, w))
        for _ in range(64):
            bad = (np.abs(pred - gt) <= 1e-2) | (np.abs(pred) <= 1e-2)
            if not bad.any():
                break
            pred[bad] = sample(int(bad.sum()))
        analytic = fn(pred, gt, cfg).grad
        scale = max(float(np.abs(analytic).max()), 1e-8)
        flat_indices = rng.choice(pred.size, size=min(pixels_per_trial, pred.size), replace=False)
        for k in flat_indices:
            idx = np.unravel_index(int(k), pred.shape)
            plus = pred.copy()
            plus[idx] += step
            minus = pred.copy()
            minus[idx] -= step
            numeric = (fn(plus, gt, cfg).value - fn(minus, gt, cfg).value) / (2.0 * step)
            worst = max(worst, abs(float(analytic[idx]) - numeric) / scale)
    return worst
