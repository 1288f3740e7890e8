"""Differentiable layer primitives.

Every function takes and returns :class:`~cxrnet.tensor.Tensor` objects and
registers a backward closure. Images use NCHW layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cxrnet.errors import ShapeError, StateError
from cxrnet.tensor import DTYPE, Tensor, as_tensor, make_result

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

_SIGMOID_LO = np.float32(np.finfo(np.float32).tiny)
_SIGMOID_HI = np.float32(1.0) - np.float32(2.0**-24)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, "mul", (a, b), backward)


def abs(x: Tensor) -> Tensor:  # noqa: A001
    sign = np.sign(x.data)
    return make_result(np.abs(x.data), "abs", (x,), lambda g: (g * sign,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, DTYPE(0)), "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so the result stays strictly inside (0, 1) in float32."""
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(DTYPE)
    s = np.clip(s, _SIGMOID_LO, _SIGMOID_HI)
    return make_result(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def pointwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------- reductions / reshapes


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return make_result(np.asarray(x.data.sum(), dtype=DTYPE), "sum", (x,), lambda g: (np.broadcast_to(g, shape).astype(DTYPE),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return make_result(
        np.asarray(x.data.mean(), dtype=DTYPE), "mean", (x,), lambda g: (np.full(shape, g / n, dtype=DTYPE),)
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = x.shape
    return make_result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(orig),))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Join two ``[N, D]`` tensors along the feature axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"concat expects 2-d inputs, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat leading dims differ: {a.shape[0]} vs {b.shape[0]}")
    d1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_result(out, "concat", (a, b), lambda g: (g[:, :d1], g[:, d1:]))


# ---------------------------------------------------------------- dense


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` laid out ``[D, O]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match output width {weight.shape[1]}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, "dense", inputs, backward)


# ---------------------------------------------------------------- convolution


def auto_padding(kernel: int) -> int:
    return kernel // 2


def _resolve_padding(padding, kernel: int) -> int:
    if padding in ("auto", "same", None):
        return auto_padding(kernel)
    p = int(padding)
    if p < 0:
        raise ShapeError(f"negative padding {p}")
    return p


def conv_output_size(size: int, kernel: int, stride: int, padding="auto") -> int:
    p = _resolve_padding(padding, kernel)
    return (size + 2 * p - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding="auto") -> Tensor:
    """2-d cross-correlation, ``[N,C,H,W] * [K,C,kh,kw] -> [N,K,H',W']``.

    ``padding="auto"`` pads ``kernel // 2`` zeros per side.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    ph, pw = _resolve_padding(padding, kh), _resolve_padding(padding, kw)
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp[:, :, : stride * ho : stride, : stride * wo : stride]).reshape(n, c, ho * wo)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    w2 = weight.data.reshape(k, -1)
    out = np.matmul(w2, cols).reshape(n, k, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, k, 1, 1)

    def backward(g):
        g2 = g.reshape(n, k, ho * wo)
        gw = gx = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape).astype(DTYPE)
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[
                        :, :, i, j
                    ]
            gx = dxp[:, :, ph : ph + h, pw : pw + w]
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3))
            return gx, gw, gb
        return gx, gw

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, "conv2d", inputs, backward)


# ---------------------------------------------------------------- pooling


def maxpool2d(x: Tensor, kernel: int, stride: int, padding="auto") -> Tensor:
    """Max over ``kernel x kernel`` windows; ties route gradient to the first row-major maximum."""
    if kernel < 1:
        raise ShapeError(f"pool kernel must be >= 1, got {kernel}")
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    p = _resolve_padding(padding, kernel)
    hp, wp = h + 2 * p, w + 2 * p
    if kernel > hp or kernel > wp:
        raise ShapeError(f"pool window {kernel} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kernel) // stride + 1, (wp - kernel) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x.data
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
        for idx in range(kernel * kernel):
            i, j = divmod(idx, kernel)
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += np.where(
                arg == idx, g, DTYPE(0)
            )
        return (dxp[:, :, p : p + h, p : p + w],)

    return make_result(np.ascontiguousarray(out), "maxpool2d", (x,), backward, kernel=kernel, stride=stride, pad=p)


def global_avgpool(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"global_avgpool expects NCHW with H,W >= 1, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / DTYPE(h * w))[:, :, None, None], x.shape).astype(DTYPE),)

    return make_result(out, "global_avgpool", (x,), backward)


# ---------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    tracked: int = 0
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    extra: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE))

    @property
    def initialized(self) -> bool:
        return self.tracked > 0


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool,
                update_stats: bool = True) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Training mode normalizes by batch moments and, when ``update_stats`` is
    set, folds them into ``state`` with an exponential moving average.
    Eval mode uses the running moments and raises :class:`StateError` when
    none have been recorded.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d affine params {gamma.shape}/{beta.shape} do not match {c} channels")
    count = n * h * w
    if count < 1:
        raise ShapeError("batchnorm2d needs N*H*W >= 1")
    eps = state.eps
    x64 = x.data.astype(np.float64)

    if training:
        mu = x64.mean(axis=(0, 2, 3))
        centered = x64 - mu[None, :, None, None]
        var = np.mean(centered * centered, axis=(0, 2, 3))
        if update_stats:
            m = state.momentum
            unbiased = var * count / (count - 1) if count > 1 else var
            state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(DTYPE)
            state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(DTYPE)
            state.tracked += 1
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat64 = centered * inv_std[None, :, None, None]
    else:
        if not state.initialized:
            raise StateError("batchnorm2d in eval mode before any running statistics were recorded")
        inv_std = 1.0 / np.sqrt(state.running_var.astype(np.float64) + eps)
        xhat64 = (x64 - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]

    # one rounding to float32 per output element
    out = (xhat64 * gamma.data[None, :, None, None] + beta.data[None, :, None, None]).astype(DTYPE)
    xhat = xhat64.astype(DTYPE)
    inv_std32 = inv_std.astype(DTYPE)[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), dtype=np.float64)[None, :, None, None]
                s2 = (dxhat.astype(np.float64) * xhat64).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = ((inv_std[None, :, None, None] / count) * (count * dxhat - s1 - xhat64 * s2)).astype(DTYPE)
            else:
                gx = dxhat * inv_std32
        return gx, gg, gb

    return make_result(out, "batchnorm2d", (x, gamma, beta), backward)


# ---------------------------------------------------------------- losses


def bce_elements(probs, targets, clamp: float = 1e-7) -> np.ndarray:
    """Per-element ``-y log f - (1-y) log(1-f)`` in float64, ``f`` clamped to ``[clamp, 1 - clamp]``."""
    f = np.clip(np.asarray(probs, dtype=np.float64), clamp, 1.0 - clamp)
    y = np.asarray(targets, dtype=np.float64)
    return -(y * np.log(f) + (1.0 - y) * np.log1p(-f))


def binary_cross_entropy(probs: Tensor, targets: np.ndarray, clamp: float = 1e-7) -> Tensor:
    """Mean of ``-y log f - (1-y) log(1-f)`` over every element.

    Probabilities are clamped to ``[clamp, 1 - clamp]`` before the log. The
    backward pass is evaluated at the clamped point and passed straight
    through, so saturated predictions still receive a gradient.
    """
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != probs.shape:
        raise ShapeError(f"targets {y.shape} do not match predictions {probs.shape}")
    f = np.clip(probs.data.astype(np.float64), clamp, 1.0 - clamp)
    elem = bce_elements(f, y, clamp)
    size = elem.size

    def backward(g):
        return ((g * (f - y) / (f * (1.0 - f))) / size).astype(DTYPE), None

    return make_result(np.asarray(elem.mean(), dtype=DTYPE), "bce", (probs, Tensor(y)), backward)
