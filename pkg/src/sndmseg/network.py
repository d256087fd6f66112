"""Toy dense Siamese U-Net for co-object map regression.

Two images pass through one shared convolutional encoder (two 3x3
conv+BN+ReLU blocks per level, 2x2 max pool). At the bottleneck a
correlation block computes, for every spatial position of one branch,
its cosine similarity to every position of the other branch; each branch
then decodes its own features. Decoder module 1 consumes the bottleneck
features concatenated with the branch's correlation map; every later
module consumes the matching encoder skip plus, through small
deconv+BN+ReLU resolution adapters, the outputs of preceding decoder
modules — all of them when dense connections are on, only the immediately
preceding one otherwise. The raw input image is concatenated immediately
before the final 3x3 convolution, whose activation is tanh for the
signed-map head or sigmoid for the mask head.

Both branches share every parameter, so swapping the two input images
swaps the two outputs exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    BatchTooSmallError,
    CheckpointCorruptError,
    InvalidConfigError,
    ShapeMismatchError,
)

ADAPTER_CHANNELS = 16  # width of every dense-connection resolution adapter
BN_MOMENTUM = 0.9
BN_EPS = 1e-5

OUTPUT_HEADS = ("sndm-tanh", "mask-sigmoid")


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 64
    widths: tuple = (16, 32, 64)
    levels: int = 3
    dense_connections: bool = True
    output_head: str = "sndm-tanh"

    def validate(self) -> "NetConfig":
        if self.levels < 1 or len(self.widths) != self.levels:
            raise InvalidConfigError(f"need one width per level, got {self.widths} for {self.levels} levels")
        if any(w < 1 for w in self.widths):
            raise InvalidConfigError(f"widths must be positive, got {self.widths}")
        if self.input_size < 2**self.levels or self.input_size % 2**self.levels:
            raise InvalidConfigError(
                f"input_size {self.input_size} must be a positive multiple of 2^levels = {2**self.levels}"
            )
        if self.output_head not in OUTPUT_HEADS:
            raise InvalidConfigError(f"output_head must be one of {OUTPUT_HEADS}, got {self.output_head!r}")
        return self

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 2**self.levels

    @property
    def correlation_channels(self) -> int:
        return self.bottleneck_size**2


@dataclass
class NetParams:
    """Named trainable arrays plus batch-norm running-statistic buffers."""

    values: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def clone(self) -> "NetParams":
        return NetParams(
            {k: v.copy() for k, v in self.values.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype) -> "NetParams":
        return NetParams(
            {k: v.astype(dtype) for k, v in self.values.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def count(self) -> int:
        return sum(v.size for v in self.values.values())


def _module_out_channels(cfg: NetConfig, module: int) -> int:
    if module == 1:
        return cfg.widths[-1]
    level = cfg.levels + 2 - module  # encoder level the module corresponds to
    return cfg.widths[level - 1]


def _module_sources(cfg: NetConfig, module: int) -> list:
    if module == 1:
        return []
    if cfg.dense_connections:
        return list(range(1, module))
    return [module - 1]


def _module_in_channels(cfg: NetConfig, module: int) -> int:
    if module == 1:
        return cfg.widths[-1] + cfg.correlation_channels
    level = cfg.levels + 2 - module
    skip = cfg.widths[level - 1]
    extra = 3 if module == cfg.levels + 1 else 0
    return skip + ADAPTER_CHANNELS * len(_module_sources(cfg, module)) + extra


def _adapter_names(module_from: int, module_to: int, steps: int):
    base = f"adapt.{module_from}to{module_to}"
    return [f"{base}.{s}" for s in range(steps)]


def init_params(config: NetConfig, seed: int = 0) -> NetParams:
    """Deterministic fan-in-scaled initialization of all parameters."""
    cfg = config.validate()
    rng = np.random.Generator(np.random.Philox(seed))
    params = NetParams()

    def conv(name, c_out, c_in, k=3, gain=2.0):
        std = np.sqrt(gain / (c_in * k * k))
        params.values[f"{name}.weight"] = rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(np.float32)
        params.values[f"{name}.bias"] = np.zeros(c_out, dtype=np.float32)

    def deconv(name, c_in, c_out):
        std = np.sqrt(2.0 / (c_in * 4))
        params.values[f"{name}.weight"] = rng.normal(0.0, std, size=(c_in, c_out, 2, 2)).astype(np.float32)
        params.values[f"{name}.bias"] = np.zeros(c_out, dtype=np.float32)

    def bn(name, channels):
        params.values[f"{name}.gamma"] = np.ones(channels, dtype=np.float32)
        params.values[f"{name}.beta"] = np.zeros(channels, dtype=np.float32)
        params.buffers[f"{name}.running_mean"] = np.zeros(channels, dtype=np.float32)
        params.buffers[f"{name}.running_var"] = np.ones(channels, dtype=np.float32)

    c_prev = 3
    for i, width in enumerate(cfg.widths, start=1):
        conv(f"enc{i}.conv1", width, c_prev)
        bn(f"enc{i}.bn1", width)
        conv(f"enc{i}.conv2", width, width)
        bn(f"enc{i}.bn2", width)
        c_prev = width

    for module in range(1, cfg.levels + 1):
        out_ch = _module_out_channels(cfg, module)
        conv(f"dec{module}.conv", out_ch, _module_in_channels(cfg, module))
        bn(f"dec{module}.bn", out_ch)

    for module in range(2, cfg.levels + 2):
        for src in _module_sources(cfg, module):
            c_in = _module_out_channels(cfg, src)
            for name in _adapter_names(src, module, module - src):
                deconv(f"{name}.deconv", c_in, ADAPTER_CHANNELS)
                bn(f"{name}.bn", ADAPTER_CHANNELS)
                c_in = ADAPTER_CHANNELS

    conv("head.conv", 1, _module_in_channels(cfg, cfg.levels + 1), gain=1.0)
    return params


@dataclass
class ForwardPair:
    """Outputs of one Siamese forward: prediction tensors plus the parameter nodes."""

    pred_a: ad.Tensor
    pred_b: ad.Tensor
    param_tensors: dict


def _as_batch(images, size: int, name: str) -> np.ndarray:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ShapeMismatchError(f"{name} must have shape (B, H, W, 3), got {arr.shape}")
    if arr.shape[1] != size or arr.shape[2] != size:
        raise ShapeMismatchError(f"{name} spatial shape {arr.shape[1:3]} != configured {size}x{size}")
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


def build_forward(
    img_a,
    img_b,
    params: NetParams,
    config: NetConfig,
    mode: str = "eval",
    update_stats: bool | None = None,
    requires_grad: bool | None = None,
) -> ForwardPair:
    """Run both branches jointly and return prediction tensors (B, 1, H, W) each."""
    cfg = config.validate()
    if mode not in ("train", "eval"):
        raise InvalidConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    if update_stats is None:
        update_stats = training
    if requires_grad is None:
        requires_grad = training
    a = _as_batch(img_a, cfg.input_size, "img_a")
    b = _as_batch(img_b, cfg.input_size, "img_b")
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image batches differ: {a.shape} vs {b.shape}")
    batch = a.shape[0]
    if training and batch < 2:
        raise BatchTooSmallError(f"training mode needs batch >= 2 for batch norm, got {batch}")
    dtype = a.dtype

    pt = {name: ad.Tensor(value, requires_grad=requires_grad) for name, value in params.values.items()}
    bufs = params.buffers

    def conv_bn_relu(x, conv_name, bn_name):
        y = ad.conv2d(x, pt[f"{conv_name}.weight"], pt[f"{conv_name}.bias"])
        y = ad.batch_norm(
            y,
            pt[f"{bn_name}.gamma"],
            pt[f"{bn_name}.beta"],
            bufs[f"{bn_name}.running_mean"],
            bufs[f"{bn_name}.running_var"],
            training=training,
            momentum=BN_MOMENTUM,
            eps=BN_EPS,
            update_stats=update_stats,
        )
        return ad.relu(y)

    def adapter(x, src, dst):
        for name in _adapter_names(src, dst, dst - src):
            x = ad.conv_transpose2d(x, pt[f"{name}.deconv.weight"], pt[f"{name}.deconv.bias"])
            x = ad.batch_norm(
                x,
                pt[f"{name}.bn.gamma"],
                pt[f"{name}.bn.beta"],
                bufs[f"{name}.bn.running_mean"],
                bufs[f"{name}.bn.running_var"],
                training=training,
                momentum=BN_MOMENTUM,
                eps=BN_EPS,
                update_stats=update_stats,
            )
            x = ad.relu(x)
        return x

    # joint batch: branch A occupies items [0, B), branch B items [B, 2B)
    joint = np.concatenate([a, b], axis=0).transpose(0, 3, 1, 2).astype(dtype, copy=False)
    x = ad.Tensor(joint)
    skips = []
    for i in range(1, cfg.levels + 1):
        x = conv_bn_relu(x, f"enc{i}.conv1", f"enc{i}.bn1")
        x = conv_bn_relu(x, f"enc{i}.conv2", f"enc{i}.bn2")
        skips.append(x)
        x = ad.max_pool2(x)
    bottleneck = x

    # correlation block: all-pairs cosine similarity between the branches
    size = cfg.bottleneck_size
    hw = cfg.correlation_channels
    normed = ad.l2_normalize(bottleneck, axis=1)
    flat = ad.reshape(normed, (2 * batch, cfg.widths[-1], hw))
    na = ad.slice_batch(flat, 0, batch)
    nb = ad.slice_batch(flat, batch, 2 * batch)
    corr_a = ad.reshape(ad.matmul(ad.transpose(nb, (0, 2, 1)), na), (batch, hw, size, size))
    corr_b = ad.reshape(ad.matmul(ad.transpose(na, (0, 2, 1)), nb), (batch, hw, size, size))
    corr = ad.concat([corr_a, corr_b], axis=0)

    outputs = {}
    x = conv_bn_relu(ad.concat([bottleneck, corr], axis=1), "dec1.conv", "dec1.bn")
    outputs[1] = x
    for module in range(2, cfg.levels + 1):
        skip = skips[cfg.levels + 1 - module]  # encoder level cfg.levels + 2 - module
        pieces = [skip] + [adapter(outputs[src], src, module) for src in _module_sources(cfg, module)]
        x = conv_bn_relu(ad.concat(pieces, axis=1), f"dec{module}.conv", f"dec{module}.bn")
        outputs[module] = x

    last = cfg.levels + 1
    image_in = ad.Tensor(joint)
    pieces = [skips[0]] + [adapter(outputs[src], src, last) for src in _module_sources(cfg, last)]
    pieces.append(image_in)
    head = ad.conv2d(ad.concat(pieces, axis=1), pt["head.conv.weight"], pt["head.conv.bias"])
    pred = ad.tanh(head) if cfg.output_head == "sndm-tanh" else ad.sigmoid(head)

    return ForwardPair(
        pred_a=ad.slice_batch(pred, 0, batch),
        pred_b=ad.slice_batch(pred, batch, 2 * batch),
        param_tensors=pt,
    )


def forward_pair(img_a, img_b, params: NetParams, config: NetConfig, mode: str = "eval"):
    """Predicted maps for both images as (B, H, W) float arrays."""
    out = build_forward(img_a, img_b, params, config, mode=mode, requires_grad=False)
    return out.pred_a.data[:, 0], out.pred_b.data[:, 0]


def correlation(feat_a, feat_b):
    """All-pairs cosine similarity between two feature maps.

    feat_a, feat_b: (C, H, W) or (B, C, H, W). Returns (corr_a, corr_b),
    each with H*W channels: channel j of corr_a at position i is the
    cosine similarity between feat_a's vector at i and feat_b's at j.
    """
    fa = np.asarray(feat_a, dtype=np.float64)
    fb = np.asarray(feat_b, dtype=np.float64)
    squeeze = fa.ndim == 3
    if squeeze:
        fa, fb = fa[None], fb[None]
    if fa.shape != fb.shape or fa.ndim != 4:
        raise ShapeMismatchError(f"feature shapes must match, got {fa.shape} vs {fb.shape}")
    batch, channels, height, width = fa.shape
    hw = height * width
    na = fa.reshape(batch, channels, hw)
    nb = fb.reshape(batch, channels, hw)
    na = na / np.sqrt((na * na).sum(axis=1, keepdims=True) + 1e-12)
    nb = nb / np.sqrt((nb * nb).sum(axis=1, keepdims=True) + 1e-12)
    corr_a = np.matmul(nb.transpose(0, 2, 1), na).reshape(batch, hw, height, width)
    corr_b = np.matmul(na.transpose(0, 2, 1), nb).reshape(batch, hw, height, width)
    if squeeze:
        return corr_a[0], corr_b[0]
    return corr_a, corr_b


def grad_check_net(
    trials: int = 20,
    seed: int = 0,
    config: NetConfig | None = None,
    step: float = 1e-6,
) -> float:
    """Finite-difference check of the full network + loss gradient.

    Runs a small dense configuration in float64, train-mode batch norm and
    the correlation block included, perturbs ``trials`` randomly chosen
    parameter entries, and returns the worst error relative to
    max(|analytic|, |numeric|, 1e-3).

    The penalized edge loss is discontinuous where a predicted pixel
    changes sign or crosses its label, so — as in the loss-level check —
    pixels within 1e-2 of those sets (at the unperturbed parameters) are
    masked out of the checked loss; the mask is frozen data, keeping the
    function identical across the +/-h evaluations.
    """
    from .losses import LossConfig, _iou3d_core
    from .sndm import sndm_encode
    from .synth import GenConfig, gen_pair

    cfg = (config or NetConfig(input_size=16, widths=(4, 6), levels=2)).validate()
    rng = np.random.Generator(np.random.Philox(np.uint64(seed)))
    params = init_params(cfg, seed=seed).astype(np.float64)
    loss_cfg = LossConfig()

    samples = [gen_pair(int(rng.integers(1 << 30)), GenConfig(image_size=cfg.input_size)) for _ in range(2)]
    img_a = np.stack([s.img_a for s in samples]).astype(np.float64)
    img_b = np.stack([s.img_b for s in samples]).astype(np.float64)
    gt_a = np.stack([sndm_encode(s.mask_a) for s in samples]).astype(np.float64)
    gt_b = np.stack([sndm_encode(s.mask_b) for s in samples]).astype(np.float64)

    base = build_forward(img_a, img_b, params, cfg, mode="train", update_stats=False, requires_grad=False)
    safe = {}
    for key, preds, gts in (("a", base.pred_a.data, gt_a), ("b", base.pred_b.data, gt_b)):
        p0 = preds[:, 0]
        safe[key] = (np.abs(p0) > 1e-2) & (np.abs(p0 - gts) > 1e-2)

    def edge_loss_masked(which):
        counter = {"i": 0}

        def fn(pred, gt, inner_cfg):
            keep = safe[which][counter["i"] % safe[which].shape[0]]
            counter["i"] += 1
            factors = np.where(pred * gt > 0.0, 1.0, inner_cfg.lam)
            weights = factors * np.sqrt(np.abs(gt)) * keep
            return _iou3d_core(pred, gt, weights, inner_cfg)

        return fn

    loss_a_fn = edge_loss_masked("a")
    loss_b_fn = edge_loss_masked("b")

    def loss_value(p: NetParams, requires_grad: bool):
        out = build_forward(img_a, img_b, p, cfg, mode="train", update_stats=False, requires_grad=requires_grad)
        la = ad.map_loss(out.pred_a, gt_a, loss_a_fn, loss_cfg)
        lb = ad.map_loss(out.pred_b, gt_b, loss_b_fn, loss_cfg)
        return (la + lb) * 0.5, out

    loss, out = loss_value(params, requires_grad=True)
    loss.backward()
    analytic = {name: tensor.grad for name, tensor in out.param_tensors.items()}

    def central(name, idx, h):
        plus = params.clone()
        plus.values[name][idx] += h
        minus = params.clone()
        minus.values[name][idx] -= h
        n_plus, _ = loss_value(plus, requires_grad=False)
        n_minus, _ = loss_value(minus, requires_grad=False)
        return (float(n_plus.data) - float(n_minus.data)) / (2.0 * h)

    names = sorted(params.values)
    worst = 0.0
    checked = 0
    attempts = 0
    while checked < trials and attempts < 4 * trials:
        attempts += 1
        name = names[int(rng.integers(len(names)))]
        flat = int(rng.integers(params.values[name].size))
        idx = np.unravel_index(flat, params.values[name].shape)
        numeric = central(name, idx, step)
        refined = central(name, idx, step / 4.0)
        # relu/max kinks inside the difference window invalidate the
        # estimate; step-halving inconsistency detects them, and such
        # points are resampled just like the loss check's avoid-sets
        if abs(numeric - refined) > 1e-4 * max(abs(numeric), abs(refined), 1e-3):
            continue
        checked += 1
        a = float(analytic[name][idx])
        worst = max(worst, abs(a - refined) / max(abs(a), abs(refined), 1e-3))
    return worst


# ---------------------------------------------------------------------------
# checkpoint glue


def config_to_header(config: NetConfig) -> str:
    return "".join(
        f"{key} = {value}\n"
        for key, value in (
            ("input_size", config.input_size),
            ("widths", ",".join(str(w) for w in config.widths)),
            ("levels", config.levels),
            ("dense_connections", int(config.dense_connections)),
            ("output_head", config.output_head),
        )
    )


def config_from_header(text: str) -> NetConfig:
    fields = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CheckpointCorruptError(f"bad header line {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        fields[key] = value
    try:
        return NetConfig(
            input_size=int(fields["input_size"]),
            widths=tuple(int(w) for w in fields["widths"].split(",")),
            levels=int(fields["levels"]),
            dense_connections=bool(int(fields["dense_connections"])),
            output_head=fields["output_head"],
        ).validate()
    except (KeyError, ValueError, InvalidConfigError) as exc:
        raise CheckpointCorruptError(f"bad checkpoint header: {exc}") from exc


def save_net(path: str, config: NetConfig, params: NetParams) -> None:
    tensors = dict(params.values)
    tensors.update({f"buffer:{k}": v for k, v in params.buffers.items()})
    ad.save_checkpoint(path, config_to_header(config), tensors)


def load_net(path: str):
    header, tensors = ad.load_checkpoint(path)
    config = config_from_header(header)
    params = NetParams()
    for name, value in tensors.items():
        if name.startswith("buffer:"):
            params.buffers[name[len("buffer:") :]] = value
        else:
            params.values[name] = value
    expected = init_params(config, seed=0)
    missing = set(expected.values) - set(params.values)
    extra = set(params.values) - set(expected.values)
    if missing or extra:
        raise CheckpointCorruptError(f"parameter names do not match config (missing={sorted(missing)[:3]}, extra={sorted(extra)[:3]})")
    for name, value in expected.values.items():
        if params.values[name].shape != value.shape:
            raise CheckpointCorruptError(f"shape mismatch for {name}")
    return config, params
