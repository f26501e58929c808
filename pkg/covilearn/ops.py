"""
Layer operations shared by every backbone and head.

Each public function accepts `Tensor`s (plain evaluation) or `ComputationNode`s (recorded on the
node's tape) and returns the same kind. Array-likes are converted to `Tensor` first, so NaN inputs
are rejected before any work is done.

Conventions:
    - NCHW layout, float64.
    - conv2d is cross-correlation (no kernel flip).
    - `same` padding: output extent ceil(H / stride); the total padding is split evenly with the
      extra cell on the bottom/right.
"""

from collections.abc import Sequence
import math
from typing import Any, ClassVar, Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from covilearn.errors import ArgumentError, DimensionError
from covilearn.tensor import ComputationNode, Function, OpKind, Shape, Tensor

Padding = Literal["valid", "same"]
Operand = Tensor | ComputationNode
Pair = int | tuple[int, int]


def as_operand(value: Any) -> Operand:
    if isinstance(value, (Tensor, ComputationNode)):
        return value
    return Tensor(value)


def _pair(value: Pair, what: str) -> tuple[int, int]:
    pair = (value, value) if isinstance(value, int) else tuple(value)
    if len(pair) != 2 or any(int(v) <= 0 for v in pair):
        raise ArgumentError(f"{what} must be a positive int or a pair of positive ints, got {value!r}")
    return int(pair[0]), int(pair[1])


def pad_amounts(size: int, window: int, stride: int, padding: Padding) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding != "same":
        raise ArgumentError(f"padding must be 'valid' or 'same', got {padding!r}")
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + window - size, 0)
    return total // 2, total - total // 2


def _window_output(size: int, window: int, stride: int, padding: Padding, what: str) -> tuple[int, int, int]:
    before, after = pad_amounts(size, window, stride, padding)
    padded = size + before + after
    if window > padded:
        raise ArgumentError(f"{what}: window {window} larger than padded extent {padded}")
    return (padded - window) // stride + 1, before, after


def require_rank(shape: Shape, rank: int, what: str) -> None:
    if len(shape) != rank:
        raise DimensionError(f"{what} expects a rank-{rank} input, got shape {shape}")


def _strided(array: np.ndarray, start_h: int, start_w: int, out_h: int, out_w: int, sh: int, sw: int) -> np.ndarray:
    return array[..., start_h : start_h + sh * (out_h - 1) + 1 : sh, start_w : start_w + sw * (out_w - 1) + 1 : sw]


# ------------------------------------------------------------------------------
# Convolution
# ------------------------------------------------------------------------------


class Conv2d(Function):
    kind: ClassVar[OpKind] = OpKind.CONV2D

    @staticmethod
    def output_shape(*shapes: Shape, **attrs: Any) -> Shape:
        x_shape, k_shape = shapes[0], shapes[1]
        stride: int = attrs["stride"]
        padding: Padding = attrs["padding"]
        if stride <= 0:
            raise ArgumentError(f"conv2d stride must be positive, got {stride}")
        require_rank(x_shape, 4, "conv2d input")
        require_rank(k_shape, 4, "conv2d kernel")
        n, c, h, w = x_shape
        f, kc, kh, kw = k_shape
        if kc != c:
            raise DimensionError(f"conv2d kernel has {kc} input channels but input has {c}")
        if len(shapes) == 3 and shapes[2] != (f,):
            raise DimensionError(f"conv2d bias shape {shapes[2]} does not match {f} filters")
        try:
            out_h, _, _ = _window_output(h, kh, stride, padding, "conv2d height")
            out_w, _, _ = _window_output(w, kw, stride, padding, "conv2d width")
        except ArgumentError as e:
            raise DimensionError(str(e)) from e
        return (n, f, out_h, out_w)

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        x, kernel = arrays[0], arrays[1]
        bias = arrays[2] if len(arrays) == 3 else None
        stride: int = self.attrs["stride"]
        padding: Padding = self.attrs["padding"]

        _, _, h, w = x.shape
        f, c, kh, kw = kernel.shape
        top, bottom = pad_amounts(h, kh, stride, padding)
        left, right = pad_amounts(w, kw, stride, padding)
        xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
        out_h = (xp.shape[2] - kh) // stride + 1
        out_w = (xp.shape[3] - kw) // stride + 1

        self.saved = (xp, kernel, (top, bottom, left, right), bias is not None)

        if self.attrs.get("method", "direct") == "gemm":
            windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
            out = np.tensordot(windows, kernel, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
            out = np.ascontiguousarray(out)
        else:
            # Accumulates in (c, i, j) order per output element, matching a naive loop exactly.
            out = np.zeros((x.shape[0], f, out_h, out_w))
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        window = _strided(xp[:, ci], i, j, out_h, out_w, stride, stride)
                        out += kernel[None, :, ci, i, j, None, None] * window[:, None]
        if bias is not None:
            out += bias[None, :, None, None]
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        xp, kernel, (top, bottom, left, right), has_bias = self.saved
        stride: int = self.attrs["stride"]
        _, _, kh, kw = kernel.shape
        out_h, out_w = grad.shape[2], grad.shape[3]

        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
        grad_kernel = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))

        grad_xp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contribution = np.tensordot(grad, kernel[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                _strided(grad_xp, i, j, out_h, out_w, stride, stride)[...] += contribution
        grad_x = grad_xp[:, :, top : grad_xp.shape[2] - bottom, left : grad_xp.shape[3] - right]

        if has_bias:
            return grad_x, grad_kernel, grad.sum(axis=(0, 2, 3))
        return grad_x, grad_kernel


def conv2d(
    input: Any,
    kernel: Any,
    bias: Any | None = None,
    stride: int = 1,
    padding: Padding = "valid",
    method: Literal["direct", "gemm"] = "direct",
) -> Operand:
    operands = [as_operand(input), as_operand(kernel)]
    if bias is not None:
        operands.append(as_operand(bias))
    return Conv2d.apply(*operands, stride=stride, padding=padding, method=method)


# ------------------------------------------------------------------------------
# Normalization and activation
# ------------------------------------------------------------------------------


class BatchNormInfer(Function):
    kind: ClassVar[OpKind] = OpKind.BATCHNORM

    @staticmethod
    def output_shape(*shapes: Shape, **attrs: Any) -> Shape:
        x_shape = shapes[0]
        if len(x_shape) < 2:
            raise DimensionError(f"batchnorm expects (N, C, ...) input, got shape {x_shape}")
        channels = x_shape[1]
        for name, shape in zip(("gamma", "beta", "mean", "var"), shapes[1:], strict=True):
            if shape != (channels,):
                raise DimensionError(f"batchnorm {name} has shape {shape}, expected ({channels},)")
        if attrs["eps"] < 0:
            raise ArgumentError(f"batchnorm eps must be non-negative, got {attrs['eps']}")
        return x_shape

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        x, gamma, beta, mean, var = arrays
        if (var < 0).any():
            raise ArgumentError("batchnorm variance must be non-negative")
        denom = var + self.attrs["eps"]
        if (denom <= 0).any():
            raise ArgumentError("batchnorm variance + eps must be positive")
        axes = (None, slice(None)) + (None,) * (x.ndim - 2)
        inv = 1.0 / np.sqrt(denom)
        xhat = (x - mean[axes]) * inv[axes]
        self.saved = (xhat, gamma[axes] * inv[axes], axes)
        return gamma[axes] * xhat + beta[axes]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        xhat, scale, _ = self.saved
        reduce = (0, *range(2, grad.ndim))
        return grad * scale, (grad * xhat).sum(axis=reduce), grad.sum(axis=reduce), None, None


def batchnorm_infer(input: Any, gamma: Any, beta: Any, mean: Any, var: Any, eps: float = 1.001e-5) -> Operand:
    operands = [as_operand(v) for v in (input, gamma, beta, mean, var)]
    return BatchNormInfer.apply(*operands, eps=eps)


class Relu(Function):
    kind: ClassVar[OpKind] = OpKind.RELU

    @staticmethod
    def output_shape(*shapes: Shape, **attrs: Any) -> Shape:
        return shapes[0]

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        (x,) = arrays
        self.saved = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * self.saved,)


def relu(input: Any) -> Operand:
    return Relu.apply(as_operand(input))


# ------------------------------------------------------------------------------
# Pooling
# ------------------------------------------------------------------------------


def _pool_shape(x_shape: Shape, attrs: dict[str, Any], what: str) -> Shape:
    require_rank(x_shape, 4, what)
    wh, ww = _pair(attrs["window"], f"{what} window")
    sh, sw = _pair(attrs["stride"], f"{what} stride")
    n, c, h, w = x_shape
    out_h, _, _ = _window_output(h, wh, sh, attrs["padding"], f"{what} height")
    out_w, _, _ = _window_output(w, ww, sw, attrs["padding"], f"{what} width")
    return (n, c, out_h, out_w)


class MaxPool2d(Function):
    kind: ClassVar[OpKind] = OpKind.MAX_POOL

    @staticmethod
    def output_shape(*shapes: Shape, **attrs: Any) -> Shape:
        return _pool_shape(shapes[0], attrs, "max_pool2d")

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        (x,) = arrays
        wh, ww = _pair(self.attrs["window"], "window")
        sh, sw = _pair(self.attrs["stride"], "stride")
        top, bottom = pad_amounts(x.shape[2], wh, sh, self.attrs["padding"])
        left, right = pad_amounts(x.shape[3], ww, sw, self.attrs["padding"])
        xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)), constant_values=-np.inf)
        out = sliding_window_view(xp, (wh, ww), axis=(2, 3))[:, :, ::sh, ::sw].max(axis=(-2, -1))
        self.saved = (xp, out, (top, bottom, left, right))
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        xp, out, (top, bottom, left, right) = self.saved
        wh, ww = _pair(self.attrs["window"], "window")
        sh, sw = _pair(self.attrs["stride"], "stride")
        out_h, out_w = out.shape[2], out.shape[3]

        # Route each window's gradient to its first maximal element.
        grad_xp = np.zeros_like(xp)
        claimed = np.zeros(out.shape, dtype=bool)
        for i in range(wh):
            for j in range(ww):
                hit = (_strided(xp, i, j, out_h, out_w, sh, sw) == out) & ~claimed
                _strided(grad_xp, i, j, out_h, out_w, sh, sw)[...] += np.where(hit, grad, 0.0)
                claimed |= hit
        return (grad_xp[:, :, top : xp.shape[2] - bottom, left : xp.shape[3] - right],)


def max_pool2d(input: Any, window: Pair, stride: Pair, padding: Padding = "valid") -> Operand:
    return MaxPool2d.apply(as_operand(input), window=window, stride=stride, padding=padding)


class AvgPool2d(Function):
    kind: ClassVar[OpKind] = OpKind.AVG_POOL

    @staticmethod
    def output_shape(*shapes: Shape, **attrs: Any) -> Shape:
        return _pool_shape(shapes[0], {**attrs, "padding": "valid"}, "avg_pool2d")

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        (x,) = arrays
        wh, ww = _pair(self.attrs["window"], "window")
        sh, sw = _pair(self.attrs["stride"], "stride")
        self.saved = x.shape
        return sliding_window_view(x, (wh, ww), axis=(2, 3))[:, :, ::sh, ::sw].mean(axis=(-2, -1))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        wh, ww = _pair(self.attrs["window"], "window")
        sh, sw = _pair(self.attrs["stride"], "stride")
        grad_x = np.zeros(self.saved)
        share = grad / (wh * ww)
        for i in range(wh):
            for j in range(ww):
                _strided(grad_x, i, j, grad.shape[2], grad.shape[3], sh, sw)[...] += share
        return (grad_x,)


def avg_pool2d(input: Any, window: Pair, stride: Pair) -> Operand:
    return AvgPool2d.apply(as_operand(input), window=window, stride=stride)


class GlobalAvgPool(Function):
    kind: ClassVar[OpKind] = OpKind.GLOBAL_AVG_POOL

    @staticmethod
    def output_shape(*shapes: Shape, **attrs: Any) -> Shape:
        require_rank(shapes[0], 4, "global_avg_pool")
        return shapes[0][:2]

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        (x,) = arrays
        self.saved = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        _, _, h, w = self.saved
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), self.saved).copy(),)


def global_avg_pool(input: Any) -> Operand:
    return GlobalAvgPool.apply(as_operand(input))


# ------------------------------------------------------------------------------
# Structural operations
# ------------------------------------------------------------------------------


class ConcatChannels(Function):
    kind: ClassVar[OpKind] = OpKind.CONCAT

    @staticmethod
    def output_shape(*shapes: Shape, **attrs: Any) -> Shape:
        if not shapes:
            raise ArgumentError("concat_channels needs at least one input")
        first = shapes[0]
        if len(first) < 2:
            raise DimensionError(f"concat_channels expects (N, C, ...) inputs, got {first}")
        for shape in shapes[1:]:
            if len(shape) != len(first) or shape[0] != first[0] or shape[2:] != first[2:]:
                raise DimensionError(f"concat_channels: shape {shape} incompatible with {first}")
        return (first[0], sum(shape[1] for shape in shapes), *first[2:])

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        self.saved = [array.shape[1] for array in arrays]
        return np.concatenate(arrays, axis=1)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        bounds = np.cumsum(self.saved)[:-1]
        return tuple(np.split(grad, bounds, axis=1))


def concat_channels(inputs: Sequence[Any]) -> Operand:
    return ConcatChannels.apply(*(as_operand(v) for v in inputs))


class Add(Function):
    kind: ClassVar[OpKind] = OpKind.ADD

    @staticmethod
    def output_shape(*shapes: Shape, **attrs: Any) -> Shape:
        if shapes[0] != shapes[1]:
            raise DimensionError(f"add: shapes {shapes[0]} and {shapes[1]} differ")
        return shapes[0]

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        return arrays[0] + arrays[1]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return grad, grad


def add(a: Any, b: Any) -> Operand:
    return Add.apply(as_operand(a), as_operand(b))


class Mul(Function):
    kind: ClassVar[OpKind] = OpKind.MUL

    @staticmethod
    def output_shape(*shapes: Shape, **attrs: Any) -> Shape:
        if shapes[0] != shapes[1]:
            raise DimensionError(f"mul: shapes {shapes[0]} and {shapes[1]} differ")
        return shapes[0]

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        self.saved = arrays
        return arrays[0] * arrays[1]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        a, b = self.saved
        return grad * b, grad * a


def mul(a: Any, b: Any) -> Operand:
    return Mul.apply(as_operand(a), as_operand(b))


class Sum(Function):
    kind: ClassVar[OpKind] = OpKind.SUM

    @staticmethod
    def output_shape(*shapes: Shape, **attrs: Any) -> Shape:
        return ()

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        self.saved = arrays[0].shape
        return np.asarray(arrays[0].sum())

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (np.full(self.saved, float(grad)),)


def reduce_sum(input: Any) -> Operand:
    return Sum.apply(as_operand(input))


class DenseAffine(Function):
    kind: ClassVar[OpKind] = OpKind.DENSE

    @staticmethod
    def output_shape(*shapes: Shape, **attrs: Any) -> Shape:
        x_shape, w_shape, b_shape = shapes
        require_rank(x_shape, 2, "dense_affine input")
        require_rank(w_shape, 2, "dense_affine weight")
        if x_shape[1] != w_shape[0]:
            raise DimensionError(f"dense_affine: input width {x_shape[1]} != weight rows {w_shape[0]}")
        if b_shape != (w_shape[1],):
            raise DimensionError(f"dense_affine: bias shape {b_shape} != ({w_shape[1]},)")
        return (x_shape[0], w_shape[1])

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        x, weight, bias = arrays
        self.saved = (x, weight)
        return x @ weight + bias

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        x, weight = self.saved
        return grad @ weight.T, x.T @ grad, grad.sum(axis=0)


def dense_affine(input: Any, weight: Any, bias: Any) -> Operand:
    return DenseAffine.apply(as_operand(input), as_operand(weight), as_operand(bias))


class Flatten(Function):
    kind: ClassVar[OpKind] = OpKind.FLATTEN

    @staticmethod
    def output_shape(*shapes: Shape, **attrs: Any) -> Shape:
        shape = shapes[0]
        if not shape:
            raise DimensionError("flatten needs a batch dimension")
        return (shape[0], math.prod(shape[1:]))

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        (x,) = arrays
        self.saved = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad.reshape(self.saved),)


def flatten(input: Any) -> Operand:
    return Flatten.apply(as_operand(input))


# ------------------------------------------------------------------------------
# Regularization and output
# ------------------------------------------------------------------------------


class Dropout(Function):
    kind: ClassVar[OpKind] = OpKind.DROPOUT

    @staticmethod
    def output_shape(*shapes: Shape, **attrs: Any) -> Shape:
        rate = attrs["rate"]
        if not 0.0 <= rate < 1.0:
            raise ArgumentError(f"dropout rate must lie in [0, 1), got {rate}")
        if attrs["mode"] not in ("train", "infer"):
            raise ArgumentError(f"dropout mode must be 'train' or 'infer', got {attrs['mode']!r}")
        return shapes[0]

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        (x,) = arrays
        rate: float = self.attrs["rate"]
        if self.attrs["mode"] == "infer" or rate == 0.0:
            self.saved = None
            return x.copy()
        keep = np.random.default_rng(self.attrs["seed"]).random(x.shape) >= rate
        self.saved = keep / (1.0 - rate)
        return x * self.saved

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        if self.saved is None:
            return (grad,)
        return (grad * self.saved,)


def dropout(input: Any, rate: float, mode: Literal["train", "infer"], seed: int) -> Operand:
    return Dropout.apply(as_operand(input), rate=rate, mode=mode, seed=seed)


class Softmax(Function):
    kind: ClassVar[OpKind] = OpKind.SOFTMAX

    @staticmethod
    def output_shape(*shapes: Shape, **attrs: Any) -> Shape:
        require_rank(shapes[0], 2, "softmax")
        return shapes[0]

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        (logits,) = arrays
        if np.isnan(logits).any():
            raise ArgumentError("softmax received NaN logits")
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        out = shifted / shifted.sum(axis=1, keepdims=True)
        self.saved = out
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        s = self.saved
        return (s * (grad - (grad * s).sum(axis=1, keepdims=True)),)


def softmax(logits: Any) -> Operand:
    return Softmax.apply(as_operand(logits))
