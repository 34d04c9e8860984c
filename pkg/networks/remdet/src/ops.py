"""Tensor ops: forward evaluation plus reverse-mode VJPs recorded on the active tape.

No op broadcasts: operand shapes and dtypes must match exactly.
"""

import itertools
import math
from collections.abc import Callable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from networks.remdet.src.config import settings
from networks.remdet.src.errors import (
    ChannelNotDivisibleBy4Error,
    DegenerateBatchError,
    LabelOutOfRangeError,
    NonIntegralOutputExtentError,
    OddSpatialExtentError,
    ShapeMismatchError,
    SizeSumMismatchError,
    TapeCorruptError,
)
from networks.remdet.src.tape import TapeNode, record
from networks.remdet.src.tensor import Array, BatchNormParams, Tensor
from shared.models import Activation, ConvSpec
from shared.monitoring import get_logger

logger = get_logger(__name__)

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class _Runtime:
    threads: int = 1


_runtime = _Runtime(threads=settings.threads)


def set_num_threads(threads: int) -> None:
    """Set the worker count of the convolution fast path; 1 is bit-reproducible."""
    if threads < 1:
        raise ValueError(f"threads must be at least 1, got {threads}")
    _runtime.threads = threads
    logger.debug(f"Convolution threads set to {threads}")


def get_num_threads() -> int:
    return _runtime.threads


class Executor(Protocol):
    """Replacement kernels for the multiply-heavy ops (used by the counting oracle)."""

    def conv2d(self, x: Array, w: Array, spec: ConvSpec) -> Array: ...

    def linear(self, x: Array, w: Array) -> Array: ...


_EXECUTOR: ContextVar[Executor | None] = ContextVar("remdet_executor", default=None)


@contextmanager
def use_executor(executor: Executor) -> Iterator[Executor]:
    """Route conv2d and linear through `executor` inside the block."""
    token = _EXECUTOR.set(executor)
    try:
        yield executor
    finally:
        _EXECUTOR.reset(token)


def _wrap(array: Array, like: Array) -> Tensor:
    return Tensor(np.asarray(array, dtype=like.dtype))


def _same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape or a.dtype != b.dtype:
        raise ShapeMismatchError(
            f"{op}: operands {a.shape}/{a.dtype.value} and {b.shape}/{b.dtype.value} differ"
        )


def _channel_view(tensor: Tensor, ndim: int) -> Array:
    return tensor.numpy().reshape((1, -1) + (1,) * (ndim - 2))


def _channel_axes(ndim: int) -> tuple[int, ...]:
    return (0, *range(2, ndim))


# Convolution


def _check_conv(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> tuple[int, int]:
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeMismatchError(
            f"conv2d: input {x.shape} does not carry {spec.in_channels} channels in NCHW layout"
        )
    if w.shape != spec.weight_shape:
        raise ShapeMismatchError(f"conv2d: weight {w.shape} != expected {spec.weight_shape}")
    if b is not None and b.shape != (spec.out_channels,):
        raise ShapeMismatchError(f"conv2d: bias {b.shape} != ({spec.out_channels},)")
    if w.dtype != x.dtype or (b is not None and b.dtype != x.dtype):
        raise ShapeMismatchError("conv2d: input, weight and bias dtypes differ")
    extent = spec.output_extent(x.shape[2], x.shape[3])
    if extent is None:
        raise NonIntegralOutputExtentError(
            f"conv2d: {x.shape[2]}x{x.shape[3]} input with kernel "
            f"{spec.kernel_h}x{spec.kernel_w}, stride {spec.stride}, padding {spec.padding} "
            "has a non-integral output extent"
        )
    return extent


def _im2col(x: Array, spec: ConvSpec, out_h: int, out_w: int) -> Array:
    """Patches laid out [groups, N*H_out*W_out, (C/groups)*k_h*k_w]."""
    n, channels, height, width = x.shape
    groups = spec.groups
    per_group = channels // groups
    kh, kw, stride, pad = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    if kh == kw == 1 and stride == 1 and pad == 0:
        cols = x.reshape(n, groups, per_group, height * width).transpose(1, 0, 3, 2)
        return cols.reshape(groups, n * height * width, per_group)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    rows = slice(0, stride * (out_h - 1) + 1, stride)
    cols_ = slice(0, stride * (out_w - 1) + 1, stride)
    windows = windows[:, :, rows, cols_]
    cols = windows.reshape(n, groups, per_group, out_h, out_w, kh, kw)
    cols = cols.transpose(1, 0, 3, 4, 2, 5, 6)
    return cols.reshape(groups, n * out_h * out_w, per_group * kh * kw)


def _parallel_matmul(cols: Array, kernels: Array, threads: int) -> Array:
    # split output channels within each group, or the groups themselves for depthwise
    axis = 2 if kernels.shape[2] > 1 else 0
    chunks = np.array_split(np.arange(kernels.shape[axis]), min(threads, kernels.shape[axis]))

    def work(index: npt.NDArray[np.intp]) -> Array:
        if axis == 2:
            return np.matmul(cols, kernels[:, :, index])
        return np.matmul(cols[index], kernels[index])

    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(work, chunks))
    return np.concatenate(parts, axis=axis)


def _conv_fast(x: Array, w: Array, spec: ConvSpec, out_h: int, out_w: int) -> Array:
    n = x.shape[0]
    groups = spec.groups
    per_group_out = spec.out_channels // groups
    cols = _im2col(x, spec, out_h, out_w)
    kernels = w.reshape(groups, per_group_out, -1).transpose(0, 2, 1)
    threads = _runtime.threads
    if threads > 1 and max(groups, per_group_out) > 1:
        out = _parallel_matmul(cols, kernels, threads)
    else:
        out = np.matmul(cols, kernels)
    out = out.reshape(groups, n, out_h, out_w, per_group_out).transpose(1, 0, 4, 2, 3)
    return out.reshape(n, spec.out_channels, out_h, out_w)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> Tensor:
    """2-D cross-correlation over an NCHW input.

    Args:
        x: Input [N, in_channels, H, W]
        w: Weight [out_channels, in_channels/groups, k_h, k_w]
        b: Optional bias [out_channels]
        spec: Convolution geometry

    Returns:
        Output [N, out_channels, H_out, W_out]

    Raises:
        ShapeMismatchError: Operands do not match `spec`
        NonIntegralOutputExtentError: Stride does not tile the padded input

    """
    out_h, out_w = _check_conv(x, w, b, spec)
    xa, wa = x.numpy(), w.numpy()
    executor = _EXECUTOR.get()
    if executor is not None:
        out = executor.conv2d(xa, wa, spec)
    else:
        out = _conv_fast(xa, wa, spec, out_h, out_w)
    if b is not None:
        out = out + b.numpy().reshape(1, -1, 1, 1)
    y = _wrap(out, xa)
    record("conv2d", (x, w, b), y, _conv2d_backward, spec=spec)
    return y


def _conv2d_backward(node: TapeNode, grad_out: Array) -> tuple[Array, Array, Array | None]:
    x, w, b = node.inputs
    if x is None or w is None:
        raise TapeCorruptError("conv2d node lost its input or weight")
    spec: ConvSpec = node.saved["spec"]
    xa, wa = x.numpy(), w.numpy()
    n, channels, height, width = xa.shape
    groups = spec.groups
    per_group = channels // groups
    per_group_out = spec.out_channels // groups
    kh, kw, stride, pad = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    out_h, out_w = grad_out.shape[2], grad_out.shape[3]

    go = grad_out.reshape(n, groups, per_group_out, out_h, out_w).transpose(1, 0, 3, 4, 2)
    go = go.reshape(groups, n * out_h * out_w, per_group_out)

    cols = _im2col(xa, spec, out_h, out_w)
    grad_w = np.matmul(cols.transpose(0, 2, 1), go).transpose(0, 2, 1).reshape(wa.shape)

    grad_cols = np.matmul(go, wa.reshape(groups, per_group_out, -1))
    grad_cols = grad_cols.reshape(groups, n, out_h, out_w, per_group, kh, kw)
    grad_cols = grad_cols.transpose(1, 0, 4, 2, 3, 5, 6)
    # col2im: scatter every tap back onto the padded input
    padded = np.zeros((n, groups, per_group, height + 2 * pad, width + 2 * pad), dtype=xa.dtype)
    for i, j in itertools.product(range(kh), range(kw)):
        rows = slice(i, i + stride * (out_h - 1) + 1, stride)
        cols_ = slice(j, j + stride * (out_w - 1) + 1, stride)
        padded[:, :, :, rows, cols_] += grad_cols[..., i, j]
    grad_x = padded[:, :, :, pad : pad + height, pad : pad + width].reshape(xa.shape)

    grad_b = grad_out.sum(axis=(0, 2, 3)) if b is not None else None
    return grad_x, grad_w.astype(wa.dtype, copy=False), grad_b


def conv2d_vjp(node: TapeNode, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor | None]:
    """Gradients of a recorded conv2d with respect to its input, weight and bias."""
    if node.op != "conv2d":
        raise TapeCorruptError(f"expected a conv2d node, got {node.op}")
    if grad_out.shape != node.output.shape:
        raise TapeCorruptError(
            f"cotangent {grad_out.shape} does not match conv2d output {node.output.shape}"
        )
    like = node.output.numpy()
    grad_x, grad_w, grad_b = _conv2d_backward(node, grad_out.numpy().astype(like.dtype))
    return (
        _wrap(grad_x, like),
        _wrap(grad_w, like),
        _wrap(grad_b, like) if grad_b is not None else None,
    )


def conv2d_naive(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> Tensor:
    """Scalar-loop reference convolution; accumulates in Python floats."""
    out_h, out_w = _check_conv(x, w, b, spec)
    pad, stride = spec.padding, spec.stride
    xa = np.pad(x.numpy(), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    wa = w.numpy()
    n = x.shape[0]
    per_group = spec.in_channels // spec.groups
    per_group_out = spec.out_channels // spec.groups
    out = np.zeros((n, spec.out_channels, out_h, out_w), dtype=xa.dtype)
    taps = list(itertools.product(range(per_group), range(spec.kernel_h), range(spec.kernel_w)))
    for sample, oc, row, col in itertools.product(
        range(n), range(spec.out_channels), range(out_h), range(out_w)
    ):
        first = (oc // per_group_out) * per_group
        acc = 0.0
        for ic, i, j in taps:
            acc += float(xa[sample, first + ic, row * stride + i, col * stride + j]) * float(
                wa[oc, ic, i, j]
            )
        if b is not None:
            acc += float(b.numpy()[oc])
        out[sample, oc, row, col] = acc
    return Tensor(out)


def zero_pad(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the spatial extents of an NCHW tensor, possibly asymmetrically."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"zero_pad expects NCHW, got {x.shape}")
    if min(top, bottom, left, right) < 0:
        raise ValueError("padding amounts must be non-negative")
    if not (top or bottom or left or right):
        return x
    height, width = x.shape[2], x.shape[3]
    y = Tensor(np.pad(x.numpy(), ((0, 0), (0, 0), (top, bottom), (left, right))))
    record(
        "zero_pad",
        (x,),
        y,
        lambda _node, grad_out: (grad_out[:, :, top : top + height, left : left + width],),
    )
    return y


# Normalization


def _check_bn(x: Tensor, bn: BatchNormParams) -> None:
    if x.ndim not in (2, 4) or x.shape[1] != bn.channels:
        raise ShapeMismatchError(f"batch norm over {bn.channels} channels got input {x.shape}")
    if x.dtype != bn.dtype:
        raise ShapeMismatchError("batch norm: input and parameter dtypes differ")


def batchnorm_infer(x: Tensor, bn: BatchNormParams) -> Tensor:
    """y = gamma*(x - running_mean)/sqrt(running_var + eps) + beta, per channel."""
    _check_bn(x, bn)
    xa = x.numpy()
    gamma = _channel_view(bn.gamma, x.ndim)
    beta = _channel_view(bn.beta, x.ndim)
    mean = _channel_view(bn.running_mean, x.ndim)
    var = _channel_view(bn.running_var, x.ndim)
    y = _wrap(gamma * (xa - mean) / np.sqrt(var + bn.eps) + beta, xa)
    record(
        "batchnorm_infer",
        (x, bn.gamma, bn.beta, bn.running_mean, bn.running_var),
        y,
        _batchnorm_infer_backward,
        eps=bn.eps,
    )
    return y


def _batchnorm_infer_backward(node: TapeNode, grad_out: Array) -> tuple[Array | None, ...]:
    x, gamma, _, mean, var = node.inputs
    if x is None or gamma is None or mean is None or var is None:
        raise TapeCorruptError("batchnorm_infer node lost an input")
    ndim = x.ndim
    axes = _channel_axes(ndim)
    inv = 1 / np.sqrt(_channel_view(var, ndim) + node.saved["eps"])
    centered = x.numpy() - _channel_view(mean, ndim)
    grad_x = grad_out * _channel_view(gamma, ndim) * inv
    grad_gamma = (grad_out * centered * inv).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    return grad_x, grad_gamma, grad_beta, None, None


def batchnorm_train(x: Tensor, bn: BatchNormParams) -> Tensor:
    """Normalize by batch statistics and fold them into the running statistics of `bn`.

    The variance is the biased batch variance, used both to normalize and for
    the update running <- (1 - momentum)*running + momentum*batch.

    Raises:
        DegenerateBatchError: Fewer than two values per channel

    """
    _check_bn(x, bn)
    xa = x.numpy()
    axes = _channel_axes(x.ndim)
    count = xa.size // bn.channels
    if count < 2:
        raise DegenerateBatchError(
            f"batch statistics need at least 2 values per channel, got {count}"
        )
    mean = xa.mean(axis=axes, keepdims=True)
    var = xa.var(axis=axes, keepdims=True)
    inv = 1 / np.sqrt(var + bn.eps)
    normalized = (xa - mean) * inv
    y = _wrap(_channel_view(bn.gamma, x.ndim) * normalized + _channel_view(bn.beta, x.ndim), xa)

    momentum = bn.momentum
    bn.running_mean = _wrap(
        (1.0 - momentum) * bn.running_mean.numpy() + momentum * mean.reshape(-1), xa
    )
    bn.running_var = _wrap(
        (1.0 - momentum) * bn.running_var.numpy() + momentum * var.reshape(-1), xa
    )

    record(
        "batchnorm_train",
        (x, bn.gamma, bn.beta),
        y,
        _batchnorm_train_backward,
        normalized=normalized,
        inv=inv,
        count=count,
    )
    return y


def _batchnorm_train_backward(node: TapeNode, grad_out: Array) -> tuple[Array, Array, Array]:
    x, gamma, _ = node.inputs
    if x is None or gamma is None:
        raise TapeCorruptError("batchnorm_train node lost an input")
    axes = _channel_axes(x.ndim)
    normalized: Array = node.saved["normalized"]
    inv: Array = node.saved["inv"]
    count: int = node.saved["count"]
    grad_gamma = (grad_out * normalized).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    grad_norm = grad_out * _channel_view(gamma, x.ndim)
    grad_x = (
        inv
        / count
        * (
            count * grad_norm
            - grad_norm.sum(axis=axes, keepdims=True)
            - normalized * (grad_norm * normalized).sum(axis=axes, keepdims=True)
        )
    )
    return grad_x, grad_gamma, grad_beta


# Activations and elementwise ops


def activation(x: Tensor, kind: Activation | str) -> Tensor:
    """SiLU(t) = t*sigmoid(t); GELU(t) = t*Phi(t) with the exact erf; NONE is identity."""
    kind = Activation(kind)
    if kind is Activation.NONE:
        return x
    xa = x.numpy()
    if kind is Activation.SILU:
        sigmoid = expit(xa)
        y = _wrap(xa * sigmoid, xa)
        record("silu", (x,), y, _silu_backward, sigmoid=sigmoid)
        return y
    cdf = 0.5 * (1.0 + erf(xa / _SQRT_2))
    y = _wrap(xa * cdf, xa)
    record("gelu", (x,), y, _gelu_backward, cdf=cdf)
    return y


def _silu_backward(node: TapeNode, grad_out: Array) -> tuple[Array]:
    x = node.inputs[0]
    if x is None:
        raise TapeCorruptError("silu node lost its input")
    sigmoid: Array = node.saved["sigmoid"]
    return (grad_out * (sigmoid * (1.0 + x.numpy() * (1.0 - sigmoid))),)


def _gelu_backward(node: TapeNode, grad_out: Array) -> tuple[Array]:
    x = node.inputs[0]
    if x is None:
        raise TapeCorruptError("gelu node lost its input")
    xa = x.numpy()
    cdf: Array = node.saved["cdf"]
    pdf = np.exp(-0.5 * xa * xa) * _INV_SQRT_2PI
    return (grad_out * (cdf + xa * pdf),)


def ew_mul(a: Tensor, b: Tensor) -> Tensor:
    _same(a, b, "ew_mul")
    y = _wrap(a.numpy() * b.numpy(), a.numpy())
    record("ew_mul", (a, b), y, _ew_mul_backward)
    return y


def _ew_mul_backward(node: TapeNode, grad_out: Array) -> tuple[Array, Array]:
    a, b = node.inputs
    if a is None or b is None:
        raise TapeCorruptError("ew_mul node lost an operand")
    return grad_out * b.numpy(), grad_out * a.numpy()


def ew_add(a: Tensor, b: Tensor) -> Tensor:
    _same(a, b, "ew_add")
    y = _wrap(a.numpy() + b.numpy(), a.numpy())
    record("ew_add", (a, b), y, lambda _node, grad_out: (grad_out, grad_out))
    return y


# Channel bookkeeping


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split along the channel axis into consecutive pieces of the given sizes."""
    sizes = list(sizes)
    if x.ndim < 2:
        raise ShapeMismatchError(f"split_channels needs a channel axis, got shape {x.shape}")
    if not sizes or any(size <= 0 for size in sizes) or sum(sizes) != x.shape[1]:
        raise SizeSumMismatchError(f"sizes {sizes} do not partition {x.shape[1]} channels")
    if len(sizes) == 1:
        return [x]
    xa = x.numpy()
    pieces = []
    start = 0
    for size in sizes:
        piece = Tensor(np.ascontiguousarray(xa[:, start : start + size]))
        record("split_channels", (x,), piece, _split_backward, start=start, stop=start + size)
        pieces.append(piece)
        start += size
    return pieces


def _split_backward(node: TapeNode, grad_out: Array) -> tuple[Array]:
    x = node.inputs[0]
    if x is None:
        raise TapeCorruptError("split_channels node lost its input")
    grad_x = np.zeros(x.shape, dtype=grad_out.dtype)
    grad_x[:, node.saved["start"] : node.saved["stop"]] = grad_out
    return (grad_x,)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; all other extents and dtypes must agree."""
    if not xs:
        raise ShapeMismatchError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    first = xs[0]
    for tensor in xs[1:]:
        if (
            tensor.ndim != first.ndim
            or tensor.shape[0] != first.shape[0]
            or tensor.shape[2:] != first.shape[2:]
            or tensor.dtype != first.dtype
        ):
            raise ShapeMismatchError(
                f"concat_channels: {tensor.shape}/{tensor.dtype.value} incompatible with "
                f"{first.shape}/{first.dtype.value}"
            )
    y = Tensor(np.concatenate([tensor.numpy() for tensor in xs], axis=1))
    offsets = list(itertools.accumulate(tensor.shape[1] for tensor in xs[:-1]))
    record("concat_channels", tuple(xs), y, _concat_backward, offsets=offsets)
    return y


def _concat_backward(node: TapeNode, grad_out: Array) -> tuple[Array, ...]:
    return tuple(np.split(grad_out, node.saved["offsets"], axis=1))


def _merge(xa: Array) -> Array:
    n, channels, height, width = xa.shape
    blocks = xa.reshape(n, channels, height // 2, 2, width // 2, 2).transpose(0, 1, 3, 5, 2, 4)
    return blocks.reshape(n, 4 * channels, height // 2, width // 2)


def _unmerge(ya: Array) -> Array:
    n, channels, height, width = ya.shape
    blocks = ya.reshape(n, channels // 4, 2, 2, height, width).transpose(0, 1, 4, 2, 5, 3)
    return blocks.reshape(n, channels // 4, 2 * height, 2 * width)


def patch_merge(x: Tensor) -> Tensor:
    """Space-to-depth: [N,C,H,W] -> [N,4C,H/2,W/2].

    Each source channel expands into four consecutive channels holding the
    spatial offsets (0,0), (0,1), (1,0), (1,1).
    """
    if x.ndim != 4:
        raise ShapeMismatchError(f"patch_merge expects NCHW, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise OddSpatialExtentError(
            f"patch_merge needs even H and W, got {x.shape[2]}x{x.shape[3]}"
        )
    y = Tensor(_merge(x.numpy()))
    record("patch_merge", (x,), y, lambda _node, grad_out: (_unmerge(grad_out),))
    return y


def patch_split(y: Tensor) -> Tensor:
    """Exact inverse of `patch_merge`."""
    if y.ndim != 4:
        raise ShapeMismatchError(f"patch_split expects NCHW, got {y.shape}")
    if y.shape[1] % 4:
        raise ChannelNotDivisibleBy4Error(f"patch_split needs C divisible by 4, got {y.shape[1]}")
    x = Tensor(_unmerge(y.numpy()))
    record("patch_split", (y,), x, lambda _node, grad_out: (_merge(grad_out),))
    return x


# Classifier head


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] mean over the spatial extents."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"global_avg_pool expects NCHW, got {x.shape}")
    xa = x.numpy()
    y = _wrap(xa.mean(axis=(2, 3)), xa)
    area = x.shape[2] * x.shape[3]

    def backward(_node: TapeNode, grad_out: Array) -> tuple[Array]:
        return (np.broadcast_to(grad_out[:, :, None, None] / area, xa.shape).copy(),)

    record("global_avg_pool", (x,), y, backward)
    return y


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T + b for x [N,D], w [K,D], b [K]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeMismatchError(f"linear: bias {b.shape} != ({w.shape[0]},)")
    if w.dtype != x.dtype or (b is not None and b.dtype != x.dtype):
        raise ShapeMismatchError("linear: input, weight and bias dtypes differ")
    xa, wa = x.numpy(), w.numpy()
    executor = _EXECUTOR.get()
    out = executor.linear(xa, wa) if executor is not None else xa @ wa.T
    if b is not None:
        out = out + b.numpy()
    y = _wrap(out, xa)
    record("linear", (x, w, b), y, _linear_backward)
    return y


def _linear_backward(node: TapeNode, grad_out: Array) -> tuple[Array, Array, Array | None]:
    x, w, b = node.inputs
    if x is None or w is None:
        raise TapeCorruptError("linear node lost its input or weight")
    grad_b = grad_out.sum(axis=0) if b is not None else None
    return grad_out @ w.numpy(), grad_out.T @ x.numpy(), grad_b


def softmax_cross_entropy(
    logits: Tensor, labels: Sequence[int] | npt.NDArray[np.integer[Any]]
) -> tuple[float, Tensor]:
    """Mean cross-entropy over the batch and its gradient (softmax - onehot)/N.

    The gradient is returned rather than recorded; feed it to the tape as the
    cotangent of `logits`.
    """
    if logits.ndim != 2:
        raise ShapeMismatchError(f"logits must be [N, K], got {logits.shape}")
    n, classes = logits.shape
    targets = np.asarray(labels, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeMismatchError(f"expected {n} labels, got shape {targets.shape}")
    if np.any(targets < 0) or np.any(targets >= classes):
        raise LabelOutOfRangeError(f"labels must lie in [0, {classes})")
    la = logits.numpy()
    shifted = la - la.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-log_probs[rows, targets].mean())
    grad = np.exp(log_probs)
    grad[rows, targets] -= 1.0
    grad /= n
    return loss, _wrap(grad, la)


# Gradient oracle


def finite_diff(f: Callable[[Tensor], float], x: Tensor, h: float | Array) -> Tensor:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.

    Args:
        f: Pure scalar-valued function
        x: Evaluation point
        h: Step, a scalar or one step per coordinate

    """
    base = x.numpy()
    steps = np.broadcast_to(np.asarray(h, dtype=np.float64), base.shape)
    if np.any(steps <= 0):
        raise ValueError("finite-difference steps must be positive")
    probe = base.copy()
    grad = np.empty(base.shape, dtype=np.float64)
    for index in np.ndindex(*base.shape):
        original = probe[index]
        step = float(steps[index])
        probe[index] = original + step
        plus = f(Tensor(probe.copy()))
        probe[index] = original - step
        minus = f(Tensor(probe.copy()))
        probe[index] = original
        grad[index] = (plus - minus) / (2.0 * step)
    return Tensor(grad.astype(base.dtype))
