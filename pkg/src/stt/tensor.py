"""Dense tensor kernel with hand-derived backward passes.

Tensors are plain ``numpy.ndarray`` objects in row-major (C) order. Every
forward op is a pure function; its gradient lives in a separate
``*_backward`` function that takes the upstream gradient plus whatever the
forward needs and returns input gradients. There is no autograd tape.

Matmul-like ops report multiply-accumulate counts to the active
:class:`OpCounter` (see :func:`count_ops`), which is how the analytic
complexity model is cross-checked against an instrumented forward pass.
"""
from __future__ import annotations

import contextlib
import contextvars
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "DimensionError",
    "NonFiniteError",
    "OpCounter",
    "count_ops",
    "op_scope",
    "tally_scores",
    "matmul",
    "matmul_backward",
    "linear",
    "linear_backward",
    "softmax_lastdim",
    "softmax_lastdim_backward",
    "layer_norm",
    "layer_norm_backward",
    "gelu",
    "gelu_backward",
    "gelu_cdf",
    "gelu_with_cdf",
    "conv2d",
    "conv2d_backward",
    "conv2d_nhwc",
    "conv2d_nhwc_backward",
    "conv_output_size",
    "GradCheckReport",
    "gradient_check",
    "numeric_gradient",
    "rel_error",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


# ---------------------------------------------------------------------------
# op counting

@dataclass
class OpCounter:
    """Accumulates multiply-accumulates and attention-score entries per scope."""

    macs: Counter = field(default_factory=Counter)
    score_entries: Counter = field(default_factory=Counter)

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    @property
    def total_score_entries(self) -> int:
        return sum(self.score_entries.values())

    def by_prefix(self, prefix: str) -> tuple[int, int]:
        """Sum (macs, score entries) over scopes starting with ``prefix``."""
        m = sum(v for k, v in self.macs.items() if k.startswith(prefix))
        s = sum(v for k, v in self.score_entries.items() if k.startswith(prefix))
        return m, s


_counter: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar("stt_counter", default=None)
_scope: contextvars.ContextVar[str] = contextvars.ContextVar("stt_scope", default="")


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounter]:
    """Count MACs of every op executed inside the block."""
    counter = OpCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


@contextlib.contextmanager
def op_scope(name: str) -> Iterator[None]:
    """Label ops inside the block; nested scopes are joined with '/'."""
    parent = _scope.get()
    token = _scope.set(f"{parent}/{name}" if parent else name)
    try:
        yield
    finally:
        _scope.reset(token)


def _tally_macs(n: int) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.macs[_scope.get()] += int(n)


def tally_scores(n: int) -> None:
    """Record ``n`` attention-score entries against the current scope."""
    counter = _counter.get()
    if counter is not None:
        counter.score_entries[_scope.get()] += int(n)


def _finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return x


# ---------------------------------------------------------------------------
# matmul / linear

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product ``a @ b`` over identical leading dimensions.

    ``b`` may also be a plain matrix shared across the batch.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ {a.shape[:-2]} vs {b.shape[:-2]}")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    out = a @ b
    _tally_macs(out.size * a.shape[-1])
    return _finite(out, "matmul")


def matmul_backward(g: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ga = g @ np.swapaxes(b, -1, -2)
    if b.ndim == 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.swapaxes(a, -1, -2) @ g
    return ga, gb


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``x @ w + b`` applied over the last axis of ``x`` (bias MACs not counted)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape}")
    out = x.reshape(-1, w.shape[0]) @ w
    if b is not None:
        out += b
    _tally_macs(out.size * w.shape[0])
    return _finite(out.reshape(*x.shape[:-1], w.shape[1]), "linear")


def linear_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Return (grad x, grad w, grad b)."""
    g2 = g.reshape(-1, w.shape[1])
    gx = (g2 @ w.T).reshape(x.shape)
    gw = x.reshape(-1, w.shape[0]).T @ g2
    return gx, gw, g2.sum(axis=0)


# ---------------------------------------------------------------------------
# softmax

def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return _finite(e / e.sum(axis=-1, keepdims=True), "softmax")


def softmax_lastdim_backward(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient given upstream ``g`` and the softmax output ``y``."""
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# layer norm

def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6):
    """Normalize over the last axis, then scale and shift.

    Returns ``(y, cache)``; the cache feeds :func:`layer_norm_backward`.
    """
    d = x.shape[-1]
    if d == 0 or gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gamma + beta
    return _finite(y, "layer_norm"), (xhat, rstd, gamma)


def layer_norm_backward(g: np.ndarray, cache):
    """Return (grad x, grad gamma, grad beta)."""
    xhat, rstd, gamma = cache
    d = xhat.shape[-1]
    g2 = g.reshape(-1, d)
    ggamma = (g2 * xhat.reshape(-1, d)).sum(axis=0)
    gbeta = g2.sum(axis=0)
    gxhat = g * gamma
    gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                 - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# GELU (exact erf form)

_PI_EXT = np.longdouble("3.141592653589793238462643383279502884")
_EPS_EXT = np.finfo(np.longdouble).eps


def _erf_series(ax: np.ndarray) -> np.ndarray:
    # erf(x) = 2/sqrt(pi) exp(-x^2) sum_n 2^n x^(2n+1) / (1*3*...*(2n+1)) for x >= 0;
    # all terms positive so no cancellation, but up to ~130 terms near x = 7
    total = ax.copy()
    term = ax.copy()
    x2 = ax * ax
    n = 1
    while True:
        term = term * 2 * x2 / (2 * n + 1)
        total = total + term
        n += 1
        if np.all(term <= total * _EPS_EXT * 0.25):
            break
    return np.minimum(2 / np.sqrt(_PI_EXT) * np.exp(-x2) * total, 1)


_ERF_STEP = 256  # table nodes per unit
_ERF_CAP = 7  # erf == 1 to full long-double precision beyond this
_ERF_TERMS = 9
_erf_table: tuple[np.ndarray, np.ndarray] | None = None


def _erf_ext(x: np.ndarray) -> np.ndarray:
    """Long-double erf by Taylor expansion around tabulated nodes.

    Derivatives of erf are Hermite polynomials times the Gaussian:
    erf^(n+1)(a) = 2/sqrt(pi) (-1)^n H_n(a) exp(-a^2). With |x - a| <= 1/512
    nine terms reach long-double round-off (absolute) over [0, 7].
    """
    global _erf_table
    if _erf_table is None:
        nodes = np.arange(_ERF_CAP * _ERF_STEP + 1, dtype=np.longdouble) / _ERF_STEP
        _erf_table = (_erf_series(nodes), 2 / np.sqrt(_PI_EXT) * np.exp(-nodes * nodes))
    values, gauss = _erf_table
    ax = np.minimum(np.abs(x), np.longdouble(_ERF_CAP))
    k = np.rint(ax * _ERF_STEP).astype(np.int64)
    a = k.astype(np.longdouble) / _ERF_STEP
    d = ax - a
    # p_n = (-1)^n H_n(a) obeys p_{n+1} = -2a p_n - 2n p_{n-1}
    p_prev, p = np.zeros_like(a), np.ones_like(a)
    coef = d.copy()  # d^(n+1) / (n+1)!
    acc = coef.copy()
    for n in range(1, _ERF_TERMS):
        p_prev, p = p, -2 * a * p - 2 * (n - 1) * p_prev
        coef = coef * d / (n + 1)
        acc += p * coef
    out = values[k] + gauss[k] * acc
    return np.sign(x) * np.minimum(out, 1)


def _erf(x: np.ndarray) -> np.ndarray:
    """Error function; long-double inputs get an extended-precision series."""
    if x.dtype == np.longdouble and np.finfo(np.longdouble).eps < np.finfo(np.float64).eps:
        return _erf_ext(x)
    return erf(x)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)``."""
    sqrt2 = np.sqrt(x.dtype.type(2))
    return _finite(0.5 * x * (1 + _erf(x / sqrt2)), "gelu")


def gelu_cdf(x: np.ndarray) -> np.ndarray:
    """Standard normal CDF ``Phi(x)``; pass it to :func:`gelu_backward` to skip a second erf."""
    return 0.5 * (1 + _erf(x / np.sqrt(x.dtype.type(2))))


def gelu_with_cdf(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(gelu(x), Phi(x))``."""
    cdf = gelu_cdf(x)
    return _finite(x * cdf, "gelu"), cdf


def gelu_backward(g: np.ndarray, x: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    two = x.dtype.type(2)
    if cdf is None:
        cdf = gelu_cdf(x)
    pdf = np.exp(-0.5 * x * x) / np.sqrt(two * np.pi)
    return g * (cdf + x * pdf)


# ---------------------------------------------------------------------------
# conv2d (cross-correlation, square kernels)

def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    # channels-last x: [B, H, W, C] -> cols [B*H'*W', k*k*C] (contiguous copy)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [B, H', W', C, k, k]
    b, ho, wo, c = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, k * k * c)


def _check_conv(x_shape, w_shape, stride, pad, c_axis):
    if len(x_shape) != 4 or len(w_shape) != 4 or w_shape[1] != x_shape[c_axis] or w_shape[2] != w_shape[3]:
        raise DimensionError(f"conv2d: input {x_shape} vs weight {w_shape}")
    k = w_shape[-1]
    hw = (x_shape[1], x_shape[2]) if c_axis == 3 else (x_shape[2], x_shape[3])
    ho, wo = (conv_output_size(n, k, stride, pad) for n in hw)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: non-positive output extent {ho}x{wo}")
    return ho, wo


def conv2d_nhwc(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1,
                pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Channels-last cross-correlation ``[B, H, W, C_in] -> [B, H', W', C_out]``.

    ``w`` keeps the ``[C_out, C_in, k, k]`` layout. Returns ``(out, cols)``;
    the patch matrix ``cols`` can be handed to :func:`conv2d_nhwc_backward`.
    """
    ho, wo = _check_conv(x.shape, w.shape, stride, pad, 3)
    c_out, _, k, _ = w.shape
    cols = _im2col(x, k, stride, pad)
    out = cols @ w.transpose(0, 2, 3, 1).reshape(c_out, -1).T
    if b is not None:
        out += b
    _tally_macs(out.size * cols.shape[1])
    out = out.reshape(x.shape[0], ho, wo, c_out)
    _finite(out, "conv2d")
    return out, cols


def conv2d_nhwc_backward(g: np.ndarray, x_shape: tuple, w: np.ndarray, stride: int, pad: int,
                         cols: np.ndarray, need_input_grad: bool = True):
    """Gradients of :func:`conv2d_nhwc`; returns (grad x or None, grad w, grad b)."""
    c_out, c_in, k, _ = w.shape
    bsz, ho, wo, _ = g.shape
    g2 = g.reshape(-1, c_out)
    w2 = w.transpose(0, 2, 3, 1).reshape(c_out, -1)  # [C_out, k*k*C_in]
    gw = (g2.T @ cols).reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
    gb = g2.sum(axis=0)
    gx = None
    if need_input_grad:
        gcols = (g2 @ w2).reshape(bsz, ho, wo, k, k, c_in)
        hp, wp = x_shape[1] + 2 * pad, x_shape[2] + 2 * pad
        gxp = np.zeros((bsz, hp, wp, c_in), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, i, j]
        gx = np.ascontiguousarray(gxp[:, pad:pad + x_shape[1], pad:pad + x_shape[2]])
    return gx, np.ascontiguousarray(gw), gb


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """2-D cross-correlation.

    ``x`` is ``[C_in, H, W]`` or batched ``[B, C_in, H, W]``; ``w`` is
    ``[C_out, C_in, k, k]``. Output keeps the batching of the input.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    _check_conv(x.shape, w.shape, stride, pad, 1)
    out, _ = conv2d_nhwc(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), w, b, stride, pad)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out[0] if single else out


def conv2d_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0,
                    need_input_grad: bool = True):
    """Return (grad x, grad w, grad b) for :func:`conv2d`; grad x is None when not requested."""
    single = x.ndim == 3
    if single:
        x, g = x[None], g[None]
    xh = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    cols = _im2col(xh, w.shape[-1], stride, pad)
    gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
    gx, gw, gb = conv2d_nhwc_backward(gh, xh.shape, w, stride, pad, cols, need_input_grad)
    if gx is not None:
        gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        if single:
            gx = gx[0]
    return gx, gw, gb


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op:<16} max_rel_err={self.max_rel_error:.3e} checked={self.checked}"


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f: Callable[[], float], x: np.ndarray, indices=None, step: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (modified in place, then restored).

    The step for entry i is ``step * (|x_i| + 1)``. When ``indices`` is given
    only those flat positions are probed and a 1-D array is returned.
    """
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx), dtype=flat.dtype)
    for n, i in enumerate(idx):
        orig = flat[i]
        h = flat.dtype.type(step) * (abs(orig) + 1)
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[n] = (fp - fm) / (2 * h)
    return out.reshape(x.shape) if indices is None else out


def gradient_check(name: str, forward: Callable[..., np.ndarray], backward: Callable[..., Sequence[np.ndarray]],
                   inputs: Sequence[np.ndarray], tolerance: float = 1e-6, seed: int = 0,
                   wrt: Sequence[int] | None = None, analytic_dtype=np.float64) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``forward``.

    The scalar probed is ``sum(forward(*inputs) * G)`` for a fixed random
    ``G``; ``backward(G, *inputs)`` must return one gradient per input
    (``None`` for inputs that are not differentiated). ``wrt`` restricts
    the check to the listed input positions.

    The analytic side runs in ``analytic_dtype`` (double by default). The
    finite differences are taken on a long-double copy of the same rounded
    inputs so that rounding noise (about eps*|f|/h) stays far below the
    tolerance even for gradient entries close to zero.
    """
    inputs = [np.array(x, dtype=analytic_dtype, copy=True) for x in inputs]
    ext = [x.astype(np.longdouble) for x in inputs]
    out = forward(*inputs)
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(np.shape(out)).astype(analytic_dtype)
    proj_ext = proj.astype(np.longdouble)

    def f():
        y = forward(*ext)
        if not np.isfinite(y).all():
            raise NonFiniteError(f"{name}: non-finite forward output during check")
        return np.sum(y * proj_ext)

    grads = backward(proj, *inputs)
    positions = range(len(inputs)) if wrt is None else wrt
    worst, checked = 0.0, 0
    for i in positions:
        if grads[i] is None:
            continue
        analytic = np.asarray(grads[i], dtype=np.float64)
        if not np.isfinite(analytic).all():
            raise NonFiniteError(f"{name}: non-finite analytic gradient for input {i}")
        numeric = numeric_gradient(f, ext[i]).astype(np.float64)
        worst = max(worst, float(rel_error(analytic, numeric).max()))
        checked += analytic.size
    return GradCheckReport(name, worst, checked, tolerance)
