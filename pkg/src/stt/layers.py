"""Composite layers of the Super Token Transformer with hand-derived backwards.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache, accumulates parameter gradients
into ``grads`` (a plain dict keyed by parameter name) and returns the
gradient with respect to the layer input.

Token tensors have shape ``[..., T, D]``; all leading axes are batch axes.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T

LN_EPS = 1e-6


def _acc(grads: dict, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] += g
    else:
        grads[name] = np.array(g, copy=True)


def _sum_lead(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def _ln(x, params, name):
    return T.layer_norm(x, params[f"{name}.weight"], params[f"{name}.bias"], LN_EPS)


def _ln_backward(g, cache, grads, name):
    gx, gw, gb = T.layer_norm_backward(g, cache)
    _acc(grads, f"{name}.weight", gw)
    _acc(grads, f"{name}.bias", gb)
    return gx


def _linear(x, params, name, bias=True):
    return T.linear(x, params[f"{name}.weight"], params[f"{name}.bias"] if bias else None)


def _linear_backward(g, x, params, grads, name, bias=True):
    gx, gw, gb = T.linear_backward(g, x, params[f"{name}.weight"])
    _acc(grads, f"{name}.weight", gw)
    if bias:
        _acc(grads, f"{name}.bias", gb)
    return gx


# ---------------------------------------------------------------------------
# multi-head self-attention

def mha_forward(x, params, prefix, heads, trace=None):
    """Multi-head self-attention over axis -2 of ``x``.

    Q, K, V come from one bias-free projection ``{prefix}.qkv.weight``;
    the concatenated heads pass through ``{prefix}.proj``. When ``trace`` is
    a list, the attention probabilities ``[..., h, T, T]`` are appended.
    """
    *lead, t, d = x.shape
    dk = d // heads
    qkv = T.linear(x, params[f"{prefix}.qkv.weight"])
    qkv = np.moveaxis(qkv.reshape(*lead, t, 3, heads, dk), -4, -2)  # [..., 3, h, T, dk]
    scale = x.dtype.type(1.0 / np.sqrt(dk))
    q = qkv[..., 0, :, :, :] * scale
    k = np.ascontiguousarray(qkv[..., 1, :, :, :])
    v = np.ascontiguousarray(qkv[..., 2, :, :, :])
    scores = T.matmul(q, np.swapaxes(k, -1, -2))
    T.tally_scores(scores.size)
    attn = T.softmax_lastdim(scores)
    if trace is not None:
        trace.append(attn)
    o = T.matmul(attn, v)  # [..., h, T, dk]
    o_cat = np.ascontiguousarray(np.moveaxis(o, -3, -2)).reshape(*lead, t, d)
    out = _linear(o_cat, params, f"{prefix}.proj")
    return out, (x, q, k, v, attn, o_cat, scale, heads)


def mha_backward(g, cache, params, grads, prefix):
    x, q, k, v, attn, o_cat, scale, heads = cache
    *lead, t, d = x.shape
    dk = d // heads
    g_ocat = _linear_backward(g, o_cat, params, grads, f"{prefix}.proj")
    g_o = np.moveaxis(g_ocat.reshape(*lead, t, heads, dk), -2, -3)
    g_attn = g_o @ np.swapaxes(v, -1, -2)
    g_v = np.swapaxes(attn, -1, -2) @ g_o
    g_scores = T.softmax_lastdim_backward(g_attn, attn)
    g_q = (g_scores @ k) * scale
    g_k = np.swapaxes(g_scores, -1, -2) @ q
    g_qkv = np.stack([g_q, g_k, g_v], axis=-4)  # [..., 3, h, T, dk]
    g_qkv = np.ascontiguousarray(np.moveaxis(g_qkv, -2, -4)).reshape(*lead, t, 3 * d)
    gx, gw, _ = T.linear_backward(g_qkv, x, params[f"{prefix}.qkv.weight"])
    _acc(grads, f"{prefix}.qkv.weight", gw)
    return gx


# ---------------------------------------------------------------------------
# feed-forward

def ffn_forward(x, params, prefix):
    h = _linear(x, params, f"{prefix}.fc1")
    a, cdf = T.gelu_with_cdf(h)
    out = _linear(a, params, f"{prefix}.fc2")
    return out, (x, h, a, cdf)


def ffn_backward(g, cache, params, grads, prefix):
    x, h, a, cdf = cache
    ga = _linear_backward(g, a, params, grads, f"{prefix}.fc2")
    gh = T.gelu_backward(ga, h, cdf)
    return _linear_backward(gh, x, params, grads, f"{prefix}.fc1")


def layer_scale(x: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Per-channel scaling ``x @ diag(lam)``."""
    if lam.shape != (x.shape[-1],):
        raise T.DimensionError(f"layer_scale: {lam.shape} vs channels {x.shape[-1]}")
    return x * lam


# ---------------------------------------------------------------------------
# pre-LN transformer block (optionally LayerScaled)

def block_forward(x, params, prefix, heads, layerscale=True, trace=None):
    """``x + ls1*MSA(LN(x))`` then ``+ ls2*FFN(LN(.))`` over axis -2."""
    n1, c_n1 = _ln(x, params, f"{prefix}.norm1")
    a, c_a = mha_forward(n1, params, f"{prefix}.attn", heads, trace)
    if layerscale:
        x1 = x + layer_scale(a, params[f"{prefix}.ls1"])
    else:
        x1 = x + a
    n2, c_n2 = _ln(x1, params, f"{prefix}.norm2")
    f, c_f = ffn_forward(n2, params, f"{prefix}.mlp")
    if layerscale:
        out = x1 + layer_scale(f, params[f"{prefix}.ls2"])
    else:
        out = x1 + f
    return out, (c_n1, c_a, a, c_n2, c_f, f, layerscale)


def block_backward(g, cache, params, grads, prefix):
    c_n1, c_a, a, c_n2, c_f, f, layerscale = cache
    if layerscale:
        _acc(grads, f"{prefix}.ls2", _sum_lead(g * f))
        gf = g * params[f"{prefix}.ls2"]
    else:
        gf = g
    gn2 = ffn_backward(gf, c_f, params, grads, f"{prefix}.mlp")
    g1 = g + _ln_backward(gn2, c_n2, grads, f"{prefix}.norm2")
    if layerscale:
        _acc(grads, f"{prefix}.ls1", _sum_lead(g1 * a))
        ga = g1 * params[f"{prefix}.ls1"]
    else:
        ga = g1
    gn1 = mha_backward(ga, c_a, params, grads, f"{prefix}.attn")
    return g1 + _ln_backward(gn1, c_n1, grads, f"{prefix}.norm1")


# ---------------------------------------------------------------------------
# Super Token Mixer

def stm_forward(s, params, prefix):
    """Residual token mixing (Ns -> Ns per channel) then channel mixing (per token).

    ``s`` is ``[..., Ns, D]``. The token-mixing weights are shared by all
    channels.
    """
    n1, c_n1 = _ln(s, params, f"{prefix}.norm1")
    t = np.ascontiguousarray(np.swapaxes(n1, -1, -2))  # [..., D, Ns]
    h1 = _linear(t, params, f"{prefix}.token_fc1")
    a1 = T.gelu(h1)
    # no bias here: a per-token shift shared by all channels is removed by every downstream LayerNorm
    h2 = _linear(a1, params, f"{prefix}.token_fc2", bias=False)
    y = s + np.swapaxes(h2, -1, -2)
    n2, c_n2 = _ln(y, params, f"{prefix}.norm2")
    p1 = _linear(n2, params, f"{prefix}.channel_fc1")
    a2 = T.gelu(p1)
    p2 = _linear(a2, params, f"{prefix}.channel_fc2")
    return y + p2, (c_n1, t, h1, a1, c_n2, n2, p1, a2)


def stm_backward(g, cache, params, grads, prefix):
    c_n1, t, h1, a1, c_n2, n2, p1, a2 = cache
    ga2 = _linear_backward(g, a2, params, grads, f"{prefix}.channel_fc2")
    gp1 = T.gelu_backward(ga2, p1)
    gn2 = _linear_backward(gp1, n2, params, grads, f"{prefix}.channel_fc1")
    gy = g + _ln_backward(gn2, c_n2, grads, f"{prefix}.norm2")
    gh2 = np.ascontiguousarray(np.swapaxes(gy, -1, -2))
    ga1 = _linear_backward(gh2, a1, params, grads, f"{prefix}.token_fc2", bias=False)
    gh1 = T.gelu_backward(ga1, h1)
    gt = _linear_backward(gh1, t, params, grads, f"{prefix}.token_fc1")
    gn1 = np.swapaxes(gt, -1, -2)
    return gy + _ln_backward(gn1, c_n1, grads, f"{prefix}.norm1")


# ---------------------------------------------------------------------------
# k x k convolution over the Super-token grid

def _same_pad(k: int) -> tuple[int, int]:
    total = k - 1
    return total // 2, total - total // 2


def conv_mixer_forward(s, params, prefix, grid):
    """Full k x k conv (same padding) over Super tokens laid out on ``grid``, plus residual."""
    w = params[f"{prefix}.conv.weight"]
    lo, hi = _same_pad(w.shape[-1])
    d = s.shape[-1]
    x = s.reshape(-1, grid[0], grid[1], d)  # channels-last grid
    xp = np.pad(x, ((0, 0), (lo, hi), (lo, hi), (0, 0)))
    y, cols = T.conv2d_nhwc(xp, w, params[f"{prefix}.conv.bias"], stride=1, pad=0)
    return s + y.reshape(s.shape), (xp.shape, cols, grid)


def conv_mixer_backward(g, cache, params, grads, prefix):
    xp_shape, cols, grid = cache
    w = params[f"{prefix}.conv.weight"]
    d = g.shape[-1]
    gy = g.reshape(-1, grid[0], grid[1], d)
    gxp, gw, gb = T.conv2d_nhwc_backward(gy, xp_shape, w, 1, 0, cols)
    _acc(grads, f"{prefix}.conv.weight", gw)
    _acc(grads, f"{prefix}.conv.bias", gb)
    lo, _ = _same_pad(w.shape[-1])
    return g + gxp[:, lo:lo + grid[0], lo:lo + grid[1]].reshape(g.shape)


# ---------------------------------------------------------------------------
# global mixer dispatch

def global_mixer_forward(s, params, prefix, kind, heads, grid, trace=None):
    """Apply the configured cross-window mixer to Super tokens ``[..., Ns, D]``."""
    if kind == "NONE":
        return s, None
    if kind == "STM":
        return stm_forward(s, params, prefix)
    if kind == "MSA":
        return block_forward(s, params, prefix, heads, layerscale=False, trace=trace)
    if kind in ("CONV2", "CONV3"):
        return conv_mixer_forward(s, params, prefix, grid)
    raise ValueError(f"unknown mixer kind {kind!r}")


def global_mixer_backward(g, cache, params, grads, prefix, kind):
    if kind == "NONE":
        return g
    if kind == "STM":
        return stm_backward(g, cache, params, grads, prefix)
    if kind == "MSA":
        return block_backward(g, cache, params, grads, prefix)
    return conv_mixer_backward(g, cache, params, grads, prefix)
