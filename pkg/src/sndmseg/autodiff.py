"""Reverse-mode automatic differentiation over dense numpy tensors.

A :class:`Tensor` wraps an ndarray; operations build a computation graph
on the fly by recording parents and a backward closure. Calling
``backward()`` on a scalar output walks the graph in reverse topological
order and accumulates gradients into every node with ``requires_grad``.

The primitive set is exactly what a small convolutional encoder-decoder
needs: 3x3 convolution (stride 1, zero padding 1), 2x2 stride-2
transposed convolution, per-channel batch normalization with running
statistics, relu/tanh, 2x2 max pooling, concatenation/slicing, batched
matrix multiply, per-position L2 channel normalization, elementwise
add/mul, and sum/mean reductions. Convolutions are expressed as matrix
multiplies so the heavy lifting stays in BLAS.

Training runs in float32; feed float64 arrays when checking gradients,
since 32-bit noise masks real defects.

The module also owns the checkpoint container: magic b"CKPT", a version,
a key=value text header, then named float32 tensors.
"""

from __future__ import annotations

import struct

import numpy as np

from . import _kernels as kernels
from .errors import (
    CheckpointCorruptError,
    NoForwardPassError,
    ShapeMismatchError,
)
from .raster import _atomic_write, _read_bytes

CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1


class Tensor:
    """Graph node: value, optional gradient slot, parents, backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g) -> None:
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=self.data.dtype)
        else:
            self.grad += g

    def accumulate_owned(self, g) -> None:
        """Like accumulate, but may keep ``g`` itself; caller must not reuse it."""
        if self.grad is None and g.shape == self.data.shape and g.dtype == self.data.dtype:
            self.grad = g
        else:
            self.accumulate(g)

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeMismatchError(f"backward needs a scalar output, got shape {self.shape}")
        if not self._parents:
            raise NoForwardPassError("no recorded computation to backpropagate through")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; scalars become constant leaves
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __sub__(self, other):
        return add(self, -_wrap(other, self.dtype))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _node(data, parents, backward_fn) -> Tensor:
    """Create an op output; the graph is only recorded if a parent needs it."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * (x.data > 0))

    return _node(data, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * (1.0 - data * data))

    return _node(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    """Composed from tanh: 0.5 * (tanh(x/2) + 1)."""
    return tanh(x * 0.5) * 0.5 + 0.5


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g.reshape(old))

    return _node(data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = x.data.transpose(axes)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g.transpose(inverse))

    return _node(data, (x,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t.accumulate(g[tuple(index)])

    return _node(data, tuple(tensors), backward)


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    data = x.data[start:stop]

    def backward(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[start:stop] += g

    return _node(data, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        if x.requires_grad:
            x.accumulate(np.broadcast_to(g, x.data.shape))

    return _node(data, (x,), backward)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.mean(), dtype=x.dtype)

    def backward(g):
        if x.requires_grad:
            x.accumulate(np.broadcast_to(g / n, x.data.shape))

    return _node(data, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix multiply; operands must have matching leading dims."""
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b.accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _node(data, (a, b), backward)


def l2_normalize(x: Tensor, axis: int = 1, eps: float = 1e-12) -> Tensor:
    """Scale along ``axis`` to unit L2 norm (cosine-similarity precursor)."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True) + eps)
    data = x.data / norm

    def backward(g):
        if x.requires_grad:
            dot = np.sum(g * x.data, axis=axis, keepdims=True)
            x.accumulate(g / norm - x.data * dot / (norm**3))

    return _node(data, (x,), backward)


# ---------------------------------------------------------------------------
# convolutional primitives

_TAP_OFFSETS = [(di, dj) for di in range(3) for dj in range(3)]


def _conv2d_im2col(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Patch-matrix route: one batched GEMM over (C*9, H*W) columns."""
    batch, channels, height, width = x.data.shape
    c_out = weight.data.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((batch, channels, 9, height, width), dtype=x.dtype)
    for k, (di, dj) in enumerate(_TAP_OFFSETS):
        cols[:, :, k] = xp[:, :, di : di + height, dj : dj + width]
    cols = cols.reshape(batch, channels * 9, height * width)
    wmat = weight.data.reshape(c_out, channels * 9)
    out = np.matmul(wmat, cols) + bias.data.reshape(-1, 1)
    data = out.reshape(batch, c_out, height, width)

    def backward(g):
        gm = g.reshape(batch, c_out, height * width)
        if bias.requires_grad:
            bias.accumulate(gm.sum(axis=(0, 2)))
        if weight.requires_grad:
            dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            weight.accumulate_owned(dw.reshape(weight.data.shape))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gm).reshape(batch, channels, 9, height, width)
            dxp = np.zeros((batch, channels, height + 2, width + 2), dtype=g.dtype)
            for k, (di, dj) in enumerate(_TAP_OFFSETS):
                dxp[:, :, di : di + height, dj : dj + width] += dcols[:, :, k]
            x.accumulate_owned(np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1]))

    return _node(data, (x, weight, bias), backward)


def _conv2d_head(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Single-output-channel route (the prediction head).

    Forward runs nine tap-shifted matrix multiplies over the flat padded
    input at the padded row pitch (gap columns discarded); backward is a
    fused kernel, since a patch matrix would dwarf the actual work here.
    """
    batch, channels, height, width = x.data.shape
    pitch = width + 2
    span = (height - 1) * pitch + width
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    xf = xp.reshape(batch, channels, (height + 2) * pitch)
    acc = np.zeros((batch, 1, height * pitch), dtype=x.dtype)
    for di, dj in _TAP_OFFSETS:
        start = di * pitch + dj
        acc[:, :, :span] += np.matmul(weight.data[:, :, di, dj], xf[:, :, start : start + span])
    data = acc.reshape(batch, 1, height, pitch)[:, :, :, :width] + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        g2 = np.ascontiguousarray(g[:, 0])
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad or x.requires_grad:
            dx, dw = kernels.conv1_backward(xp, weight.data[0], g2)
            if weight.requires_grad:
                weight.accumulate_owned(dw.reshape(weight.data.shape))
            if x.requires_grad:
                x.accumulate_owned(dx)

    return _node(data, (x, weight, bias), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1.

    weight: (C_out, C_in, 3, 3); bias: (C_out,). Dispatches between two
    algebraically identical formulations by output width.
    """
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"conv2d input must be (B, C, H, W), got {x.data.shape}")
    c_out, c_in, kh, kw = weight.data.shape
    if c_in != x.data.shape[1] or (kh, kw) != (3, 3):
        raise ShapeMismatchError(f"conv2d weight {weight.data.shape} incompatible with input {x.data.shape}")
    if c_out == 1:
        return _conv2d_head(x, weight, bias)
    return _conv2d_im2col(x, weight, bias)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """2x2 transposed convolution with stride 2 (exact x2 upsampling).

    weight: (C_in, C_out, 2, 2); bias: (C_out,). Output blocks do not
    overlap, so forward and backward are plain matrix multiplies.
    """
    batch, channels, height, width = x.data.shape
    c_in, c_out, kh, kw = weight.data.shape
    if c_in != channels or (kh, kw) != (2, 2):
        raise ShapeMismatchError(f"conv_transpose2d weight {weight.data.shape} incompatible with input {x.data.shape}")
    xm = kernels.channels_last(x.data)
    wmat = weight.data.reshape(channels, c_out * 4)
    ym = np.matmul(xm, wmat).reshape(batch, height, width, c_out, 2, 2)
    data = kernels.deconv_place(ym, bias.data)

    def backward(g):
        gm = kernels.deconv_gather(g)
        if weight.requires_grad:
            weight.accumulate_owned(np.matmul(xm.T, gm).reshape(weight.data.shape))
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxm = np.matmul(gm, wmat.T)
            x.accumulate_owned(kernels.channels_first(dxm, batch, height, width))

    return _node(data, (x, weight, bias), backward)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route the gradient to the first maximum."""
    batch, channels, height, width = x.data.shape
    if height % 2 or width % 2:
        raise ShapeMismatchError(f"max_pool2 needs even spatial dims, got {height}x{width}")
    data, idx = kernels.maxpool_forward(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_owned(kernels.maxpool_backward(g, idx, height, width))

    return _node(data, (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization over (batch, H, W).

    In training mode the batch statistics normalize the input and, when
    ``update_stats`` is set, update the running buffers in place
    (running = momentum * running + (1 - momentum) * batch). In eval mode
    the op is a pure per-channel affine map of the running statistics.
    """
    if training:
        mean, var = kernels.bn_stats(x.data)
        if update_stats:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mean
            running_var *= momentum
            running_var += (1.0 - momentum) * var
    else:
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + eps)
    # fold normalize + affine into one per-channel multiply-add
    scale = (gamma.data * inv_std)[None, :, None, None]
    shift = (beta.data - gamma.data * inv_std * mean)[None, :, None, None]
    data = x.data * scale + shift

    def backward(g):
        dx, dgamma, dbeta = kernels.bn_backward(x.data, g, mean, inv_std, gamma.data, training)
        if beta.requires_grad:
            beta.accumulate_owned(dbeta)
        if gamma.requires_grad:
            gamma.accumulate_owned(dgamma)
        if x.requires_grad:
            x.accumulate_owned(dx)

    return _node(data, (x, gamma, beta), backward)


def map_loss(pred: Tensor, targets: np.ndarray, loss_fn, cfg) -> Tensor:
    """Bridge a per-map loss (value + analytic gradient) into the graph.

    pred: (B, 1, H, W); targets: (B, H, W). Forward averages the
    per-sample loss values; backward injects the per-sample analytic
    gradients scaled by 1/B.
    """
    batch = pred.data.shape[0]
    if targets.shape[0] != batch or pred.data.shape[2:] != targets.shape[1:]:
        raise ShapeMismatchError(f"pred {pred.data.shape} incompatible with targets {targets.shape}")
    reports = [loss_fn(pred.data[i, 0], targets[i], cfg) for i in range(batch)]
    value = np.asarray(sum(r.value for r in reports) / batch, dtype=pred.dtype)
    grads = np.stack([r.grad for r in reports])[:, None] / batch

    def backward(g):
        if pred.requires_grad:
            pred.accumulate(g * grads.astype(pred.dtype))

    return _node(value, (pred,), backward)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path: str, header_text: str, tensors: dict) -> None:
    """Write named float32 tensors plus a key=value text header."""
    header = header_text.encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    chunks.append(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    _atomic_write(path, b"".join(chunks))


def load_checkpoint(path: str):
    """Read a checkpoint; returns (header_text, {name: float32 array})."""
    data = _read_bytes(path)
    try:
        if data[:4] != CHECKPOINT_MAGIC:
            raise CheckpointCorruptError(f"{path}: bad magic")
        version, header_len = struct.unpack("<II", data[4:12])
        if version != CHECKPOINT_VERSION:
            raise CheckpointCorruptError(f"{path}: unsupported version {version}")
        pos = 12
        header_text = data[pos : pos + header_len].decode("utf-8")
        pos += header_len
        (count,) = struct.unpack("<I", data[pos : pos + 4])
        pos += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", data[pos : pos + 4])
            pos += 4
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack("<I", data[pos : pos + 4])
            pos += 4
            shape = struct.unpack(f"<{ndim}I", data[pos : pos + 4 * ndim])
            pos += 4 * ndim
            n_bytes = 4 * int(np.prod(shape, dtype=np.int64)) if ndim else 4
            flat = np.frombuffer(data[pos : pos + n_bytes], dtype="<f4")
            if flat.size != max(1, int(np.prod(shape, dtype=np.int64))):
                raise CheckpointCorruptError(f"{path}: truncated tensor {name!r}")
            pos += n_bytes
            tensors[name] = flat.reshape(shape).astype(np.float32)
        return header_text, tensors
    except CheckpointCorruptError:
        raise
    except (struct.error, UnicodeDecodeError, ValueError, IndexError) as exc:
        raise CheckpointCorruptError(f"{path}: {exc}") from exc


__all__ = [
    "Tensor",
    "add",
    "mul",
    "relu",
    "tanh",
    "sigmoid",
    "reshape",
    "transpose",
    "concat",
    "slice_batch",
    "tsum",
    "tmean",
    "matmul",
    "l2_normalize",
    "conv2d",
    "conv_transpose2d",
    "max_pool2",
    "batch_norm",
    "map_loss",
    "save_checkpoint",
    "load_checkpoint",
]
