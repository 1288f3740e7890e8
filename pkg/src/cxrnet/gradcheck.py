"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from cxrnet.errors import NumericError
from cxrnet.tensor import DTYPE, Tensor

_COTANGENT_SALT = 0x6A09E667


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst_input: int
    worst_index: tuple
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __bool__(self) -> bool:
        return self.passed


def _scalar(out: Tensor, cotangent: np.ndarray | None) -> float:
    bad = np.argwhere(~np.isfinite(out.data))
    if bad.size:
        raise NumericError("function value is not finite", index=tuple(bad[0]))
    if cotangent is None:
        return float(out.data.reshape(-1)[0])
    return float(np.dot(out.data.astype(np.float64).ravel(), cotangent.ravel()))


def grad_check(f: Callable[..., Tensor], at: Tensor | Sequence[Tensor], tol: float = 1e-3,
               step: float = 1e-3, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``f`` with central differences.

    A scalar ``f`` is checked directly. A tensor-valued ``f`` is reduced to
    ``<f(x), v>`` for a fixed random cotangent ``v``; the contraction runs in
    float64 so only the float32 rounding of ``f`` itself enters the
    difference quotient.

    The error for each input is ``max|analytic - numeric|`` divided by the
    larger of the two gradients' max-magnitudes, so entries whose true
    gradient is near zero do not dominate. The report carries the worst value
    over all inputs.
    """
    inputs = [at] if isinstance(at, Tensor) else list(at)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.ndim == 0 or out.size == 1:
        cotangent = None
        _scalar(out, None)
        out.backward()
    else:
        # salted so the cotangent never replays a caller's default_rng(seed) input stream
        cotangent = np.random.default_rng([_COTANGENT_SALT, seed]).standard_normal(out.shape)
        _scalar(out, cotangent)
        out.backward(cotangent.astype(DTYPE))

    analytic, numeric = [], []
    worst, worst_input, worst_index = 0.0, -1, ()
    for k, t in enumerate(inputs):
        a = np.zeros(t.shape, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64)
        bad = np.argwhere(~np.isfinite(a))
        if bad.size:
            raise NumericError(f"analytic gradient of input {k} is not finite", index=tuple(bad[0]))
        num = np.zeros(t.shape, dtype=np.float64)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + DTYPE(step)
            hi = float(flat[i])
            plus = _eval(f, inputs, k, i, cotangent)
            flat[i] = orig - DTYPE(step)
            lo = float(flat[i])
            minus = _eval(f, inputs, k, i, cotangent)
            flat[i] = orig
            # divide by the step float32 actually took, not the nominal one
            num.reshape(-1)[i] = (plus - minus) / (hi - lo)
        scale = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0))
        diff = np.abs(a - num)
        err = float(diff.max(initial=0.0) / scale) if scale > 0 else float(diff.max(initial=0.0))
        if err > worst or worst_input < 0:
            worst, worst_input = err, k
            worst_index = tuple(np.unravel_index(int(diff.argmax()), t.shape)) if diff.size else ()
        analytic.append(a)
        numeric.append(num)
    return GradCheckReport(worst, tol, worst_input, worst_index, analytic, numeric)


def _eval(f, inputs, k, i, cotangent) -> float:
    out = f(*inputs)
    try:
        return _scalar(out, cotangent)
    except NumericError as exc:
        raise NumericError(f"non-finite value perturbing input {k}", index=(k, i)) from exc


def kink_margin(out: Tensor) -> float:
    """Distance of the evaluated point from the nearest non-differentiable point.

    Walks the recorded graph and returns the smallest ``|x|`` over ReLU inputs
    and the smallest gap between the two largest entries of any max-pool
    window. Finite differences are only meaningful when this exceeds the
    perturbation each op sees.
    """
    margin = np.inf
    seen: set[int] = set()
    stack = [out]
    while stack:
        t = stack.pop()
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        node = t.node
        if node.kind == "relu":
            margin = min(margin, float(np.abs(node.inputs[0].data).min(initial=np.inf)))
        elif node.kind == "maxpool2d":
            margin = min(margin, _pool_gap(node.inputs[0].data, node.saved))
        stack.extend(node.inputs)
    return float(margin)


def _pool_gap(x: np.ndarray, saved: dict) -> float:
    from numpy.lib.stride_tricks import sliding_window_view

    k, s, p = saved["kernel"], saved["stride"], saved["pad"]
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    flat = np.sort(win.reshape(*win.shape[:4], k * k), axis=-1)
    top, second = flat[..., -1], flat[..., -2] if k * k > 1 else np.full(flat.shape[:-1], -np.inf)
    # windows of all exact zeros come from clipped ReLUs and are covered by the ReLU margin
    live = top != 0
    gaps = (top - second)[live]
    return float(gaps.min(initial=np.inf))
