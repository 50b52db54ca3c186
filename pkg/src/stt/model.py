"""Super Token Transformer: tokenization, window layout, encoder, class head.

Activations of the data encoder are kept in window layout
``[B, Ns, 1 + M*M, D]``: slot 0 of every window is that window's Super
token, slots 1.. are its data tokens in row-major order inside the tile.
Because windows never shift, this layout is fixed for the whole encoder.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import layers as Lyr
from . import tensor as T
from .config import ConfigError, ModelConfig

__all__ = [
    "ParameterStore",
    "TokenState",
    "AttentionTrace",
    "init_parameters",
    "parameter_count",
    "conv_stem_tokenize",
    "partition_windows",
    "attach_super_and_positional",
    "multi_head_attention",
    "window_msa",
    "feed_forward",
    "super_token_mixer",
    "global_mixer",
    "encoder_block",
    "class_block",
    "forward",
    "loss_and_grads",
    "baseline_forward",
    "init_baseline_parameters",
]


# ---------------------------------------------------------------------------
# parameters

class ParameterStore:
    """Named parameter tensors, iterated in definition order."""

    def __init__(self, items=()):
        self._t: dict[str, np.ndarray] = {}
        for name, value in items:
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._t:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._t[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._t[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._t:
            raise KeyError(name)
        if value.shape != self._t[name].shape:
            raise T.DimensionError(f"{name}: shape {value.shape} != {self._t[name].shape}")
        self._t[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def names(self) -> list[str]:
        return list(self._t)

    def num_elements(self) -> int:
        return sum(v.size for v in self._t.values())

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore((k, v.astype(dtype)) for k, v in self._t.items())

    def copy(self) -> "ParameterStore":
        return ParameterStore((k, v.copy()) for k, v in self._t.items())

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterStore) or self.names() != other.names():
            return False
        return all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self._t.values(), other._t.values()))

    def __repr__(self) -> str:
        return f"ParameterStore({len(self)} tensors, {self.num_elements():,} elements)"


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _param_specs(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, init kind) for every parameter, in definition order."""
    d, ns, n = cfg.embed_dim, cfg.num_windows, cfg.num_tokens
    specs: list[tuple[str, tuple, str]] = []
    for i, (cin, cout, k, _, _) in enumerate(cfg.stem_layers):
        specs += [(f"stem.conv{i}.weight", (cout, cin, k, k), "conv"), (f"stem.conv{i}.bias", (cout,), "zeros")]
    specs.append(("super_tokens", (ns, d), "normal"))
    specs.append(("pos_embed", ((ns + n) if cfg.super_pos else n, d), "normal"))
    specs.append(("cls_token", (1, d), "normal"))

    def block(prefix, layerscale=True):
        out = [
            (f"{prefix}.norm1.weight", (d,), "ones"), (f"{prefix}.norm1.bias", (d,), "zeros"),
            (f"{prefix}.attn.qkv.weight", (d, 3 * d), "normal"),
            (f"{prefix}.attn.proj.weight", (d, d), "normal"), (f"{prefix}.attn.proj.bias", (d,), "zeros"),
        ]
        if layerscale:
            out.append((f"{prefix}.ls1", (d,), "layerscale"))
        out += [
            (f"{prefix}.norm2.weight", (d,), "ones"), (f"{prefix}.norm2.bias", (d,), "zeros"),
            (f"{prefix}.mlp.fc1.weight", (d, cfg.ffn_hidden), "normal"),
            (f"{prefix}.mlp.fc1.bias", (cfg.ffn_hidden,), "zeros"),
            (f"{prefix}.mlp.fc2.weight", (cfg.ffn_hidden, d), "normal"),
            (f"{prefix}.mlp.fc2.bias", (d,), "zeros"),
        ]
        if layerscale:
            out.append((f"{prefix}.ls2", (d,), "layerscale"))
        return out

    for layer in range(1, cfg.depth + 1):
        specs += block(f"blocks.{layer}")
        if cfg.mixer_active(layer):
            m = f"blocks.{layer}.mixer"
            if cfg.mixer == "STM":
                dh = cfg.stm_channel_hidden
                specs += [
                    (f"{m}.norm1.weight", (d,), "ones"), (f"{m}.norm1.bias", (d,), "zeros"),
                    (f"{m}.token_fc1.weight", (ns, ns), "normal"), (f"{m}.token_fc1.bias", (ns,), "zeros"),
                    (f"{m}.token_fc2.weight", (ns, ns), "normal"),
                    (f"{m}.norm2.weight", (d,), "ones"), (f"{m}.norm2.bias", (d,), "zeros"),
                    (f"{m}.channel_fc1.weight", (d, dh), "normal"), (f"{m}.channel_fc1.bias", (dh,), "zeros"),
                    (f"{m}.channel_fc2.weight", (dh, d), "normal"), (f"{m}.channel_fc2.bias", (d,), "zeros"),
                ]
            elif cfg.mixer == "MSA":
                specs += block(m, layerscale=False)
            else:
                k = int(cfg.mixer[-1])
                specs += [(f"{m}.conv.weight", (d, d, k, k), "normal"), (f"{m}.conv.bias", (d,), "zeros")]
    for j in range(1, cfg.class_layers + 1):
        specs += block(f"class_blocks.{j}")
    if cfg.final_norm:
        specs += [("head.norm.weight", (d,), "ones"), ("head.norm.bias", (d,), "zeros")]
    specs += [("head.weight", (d, cfg.num_classes), "normal"), ("head.bias", (cfg.num_classes,), "zeros")]
    return specs


def init_parameters(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParameterStore:
    """Deterministic initialization.

    Linear/attention/mixer weights, Super tokens, positional table and CLS:
    truncated normal, std 0.02, cut at 2 std. Stem convolutions: the same
    truncated normal with fan-in (He) std. Biases and LN shifts zero, LN
    scales one, LayerScale vectors ``cfg.layerscale_init``.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    store = ParameterStore()
    for name, shape, kind in _param_specs(cfg):
        if kind == "normal":
            value = _trunc_normal(rng, shape, 0.02)
        elif kind == "conv":
            fan_in = shape[1] * shape[2] * shape[3]
            value = _trunc_normal(rng, shape, float(np.sqrt(2.0 / fan_in)))
        elif kind == "ones":
            value = np.ones(shape)
        elif kind == "zeros":
            value = np.zeros(shape)
        else:
            value = np.full(shape, cfg.layerscale_init)
        store.add(name, value.astype(dtype))
    return store


_GROUPS = ("stem", "embeddings", "encoder", "mixers", "class", "head")


def _group(name: str) -> str:
    if name.startswith("stem."):
        return "stem"
    if name.startswith("blocks."):
        return "mixers" if ".mixer." in name else "encoder"
    if name.startswith("class_blocks."):
        return "class"
    if name.startswith("head"):
        return "head"
    return "embeddings"


def parameter_count(store: ParameterStore) -> tuple[int, dict[str, int]]:
    """Total element count and a per-group breakdown."""
    groups = dict.fromkeys(_GROUPS, 0)
    for name, value in store.items():
        groups[_group(name)] += value.size
    return sum(groups.values()), groups


# ---------------------------------------------------------------------------
# tokenization and window layout

def partition_windows(grid_h: int, grid_w: int, window: int) -> np.ndarray:
    """Window map ``[Ns, M*M]``: row k lists the row-major token indices of tile k.

    Tiles are enumerated row-major; tile k owns Super token k.
    """
    if grid_h % window or grid_w % window:
        raise ConfigError("window", f"grid {grid_h}x{grid_w} not divisible by window {window}")
    idx = np.arange(grid_h * grid_w).reshape(grid_h // window, window, grid_w // window, window)
    return np.ascontiguousarray(idx.transpose(0, 2, 1, 3)).reshape(-1, window * window)


@dataclass
class TokenState:
    """Token activations in window layout.

    ``windows`` is ``[..., Ns, 1 + M*M, D]`` with the Super token in slot 0.
    ``window_map[k]`` holds the grid indices of the data tokens of window k.
    """

    windows: np.ndarray
    window_map: np.ndarray
    cls: np.ndarray | None = None

    @property
    def super_tokens(self) -> np.ndarray:
        return self.windows[..., 0, :]

    @property
    def data_tokens(self) -> np.ndarray:
        """Data tokens back in row-major grid order ``[..., N, D]``."""
        flat = self.windows[..., 1:, :]
        *lead, ns, m2, d = flat.shape
        out = np.empty((*lead, ns * m2, d), dtype=flat.dtype)
        out[..., self.window_map.reshape(-1), :] = flat.reshape(*lead, ns * m2, d)
        return out

    @property
    def shapes(self) -> tuple:
        return self.windows.shape, None if self.cls is None else self.cls.shape


def _stem_forward(x, params, cfg):
    # runs channels-last; one cache entry per conv: (input shape, stride, pad, patches, pre-activation, Phi)
    caches = []
    h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    for i, (_, _, _, stride, pad) in enumerate(cfg.stem_layers):
        with T.op_scope("stem"):
            y, cols = T.conv2d_nhwc(h, params[f"stem.conv{i}.weight"], params[f"stem.conv{i}.bias"],
                                    stride, pad)
        if i < 3:
            a, cdf = T.gelu_with_cdf(y)
            caches.append((h.shape, stride, pad, cols, y, cdf))
            h = a
        else:
            caches.append((h.shape, stride, pad, cols, None, None))
            h = y
    b, gh, gw, d = h.shape
    return h.reshape(b, gh * gw, d), caches


def _stem_backward(g_tokens, caches, params, grads, cfg):
    b, n, d = g_tokens.shape
    g = g_tokens.reshape(b, cfg.grid_h, cfg.grid_w, d)
    for i in range(3, -1, -1):
        shape, stride, pad, cols, _, _ = caches[i]
        gx, gw, gb = T.conv2d_nhwc_backward(g, shape, params[f"stem.conv{i}.weight"], stride, pad, cols,
                                            need_input_grad=i > 0)
        Lyr._acc(grads, f"stem.conv{i}.weight", gw)
        Lyr._acc(grads, f"stem.conv{i}.bias", gb)
        if i > 0:
            _, _, _, _, pre, cdf = caches[i - 1]
            g = T.gelu_backward(gx, pre, cdf)


def conv_stem_tokenize(image: np.ndarray, params: ParameterStore, cfg: ModelConfig) -> np.ndarray:
    """Four-conv stem: ``[C, H, W]`` (or ``[B, C, H, W]``) to tokens ``[N, D]`` (or ``[B, N, D]``)."""
    single = image.ndim == 3
    x = image[None] if single else image
    if x.shape[1:] != (cfg.in_channels, cfg.image_height, cfg.image_width):
        raise T.DimensionError(
            f"image {x.shape[1:]} does not match config {(cfg.in_channels, cfg.image_height, cfg.image_width)}")
    tokens, _ = _stem_forward(x, params, cfg)
    return tokens[0] if single else tokens


def attach_super_and_positional(tokens: np.ndarray, window_map: np.ndarray, super_tokens: np.ndarray,
                                pos: np.ndarray | None) -> TokenState:
    """Gather data tokens ``[..., N, D]`` into windows and prepend Super tokens.

    ``pos`` is ``[Ns + N, D]`` (Super rows first, then data rows in grid
    order), ``[N, D]`` when Super tokens carry no position, or ``None``.
    """
    ns, m2 = window_map.shape
    n, d = tokens.shape[-2:]
    lead = tokens.shape[:-2]
    if pos is not None and pos.shape not in ((ns + n, d), (n, d)):
        raise T.DimensionError(f"positional table {pos.shape} does not match {ns}+{n} tokens of width {d}")
    if super_tokens.shape != (ns, d):
        raise T.DimensionError(f"super tokens {super_tokens.shape} != {(ns, d)}")
    windows = np.empty((*lead, ns, m2 + 1, d), dtype=tokens.dtype)
    sup = super_tokens
    data_pos = None
    if pos is not None:
        if pos.shape[0] == ns + n:
            sup = sup + pos[:ns]
            data_pos = pos[ns:]
        else:
            data_pos = pos
    windows[..., 0, :] = sup
    gathered = tokens[..., window_map, :]
    windows[..., 1:, :] = gathered if data_pos is None else gathered + data_pos[window_map]
    return TokenState(windows, window_map)


# ---------------------------------------------------------------------------
# public single-layer entry points (thin wrappers over layers.py)

def multi_head_attention(tokens: np.ndarray, params, prefix: str, heads: int, trace: list | None = None):
    return Lyr.mha_forward(tokens, params, prefix, heads, trace)[0]


def window_msa(state: TokenState, params, prefix: str, heads: int, trace: list | None = None) -> TokenState:
    """Self-attention restricted to each window's ``1 + M*M`` tokens."""
    out = Lyr.mha_forward(state.windows, params, prefix, heads, trace)[0]
    return TokenState(out, state.window_map, state.cls)


def feed_forward(tokens: np.ndarray, params, prefix: str) -> np.ndarray:
    return Lyr.ffn_forward(tokens, params, prefix)[0]


def super_token_mixer(sup: np.ndarray, params, prefix: str) -> np.ndarray:
    return Lyr.stm_forward(sup, params, prefix)[0]


def global_mixer(sup: np.ndarray, params, prefix: str, cfg: ModelConfig, trace: list | None = None) -> np.ndarray:
    return Lyr.global_mixer_forward(sup, params, prefix, cfg.mixer, cfg.heads, cfg.window_grid, trace)[0]


def _encoder_forward(x, params, cfg, layer, trace):
    prefix = f"blocks.{layer}"
    with T.op_scope(f"encoder.{layer}"):
        y, c_blk = Lyr.block_forward(x, params, prefix, cfg.heads, True,
                                     trace.new(f"encoder.{layer}") if trace else None)
    c_mix = None
    if cfg.mixer_active(layer):
        with T.op_scope(f"mixer.{layer}"):
            s2, c_mix = Lyr.global_mixer_forward(
                np.ascontiguousarray(y[..., 0, :]), params, f"{prefix}.mixer", cfg.mixer, cfg.heads,
                cfg.window_grid, trace.new(f"mixer.{layer}") if trace else None)
        y[..., 0, :] = s2
    return y, (c_blk, c_mix)


def _encoder_backward(g, cache, params, grads, cfg, layer):
    c_blk, c_mix = cache
    prefix = f"blocks.{layer}"
    if c_mix is not None:
        g = g.copy()
        g[..., 0, :] = Lyr.global_mixer_backward(np.ascontiguousarray(g[..., 0, :]), c_mix, params, grads,
                                                 f"{prefix}.mixer", cfg.mixer)
    return Lyr.block_backward(g, c_blk, params, grads, prefix)


def encoder_block(state: TokenState, layer: int, params, cfg: ModelConfig,
                  trace: "AttentionTrace | None" = None) -> TokenState:
    """WMSA + FFN with LayerScale over every window, then the global mixer when active."""
    if not 1 <= layer <= cfg.depth:
        raise ConfigError("layer", f"{layer} outside [1, {cfg.depth}]")
    y, _ = _encoder_forward(state.windows, params, cfg, layer, trace)
    return TokenState(y, state.window_map, state.cls)


def class_block(sup: np.ndarray, cls: np.ndarray, params, cfg: ModelConfig,
                trace: "AttentionTrace | None" = None) -> np.ndarray:
    """Run the class layers on ``[CLS || Super tokens]`` and return the CLS row."""
    z, _ = _class_forward(sup, cls, params, cfg, trace)
    return z[..., 0, :]


def _class_forward(sup, cls, params, cfg, trace):
    lead = sup.shape[:-2]
    z = np.concatenate([np.broadcast_to(cls, (*lead, 1, cls.shape[-1])), sup], axis=-2)
    caches = []
    for j in range(1, cfg.class_layers + 1):
        with T.op_scope(f"class.{j}"):
            z, c = Lyr.block_forward(z, params, f"class_blocks.{j}", cfg.heads, True,
                                     trace.new(f"class.{j}") if trace else None)
        caches.append(c)
    return z, caches


# ---------------------------------------------------------------------------
# attention trace

@dataclass
class AttentionTrace:
    """Attention probabilities recorded during a forward pass.

    Keys are ``encoder.{l}`` (arrays ``[B, Ns, h, 1+M*M, 1+M*M]``),
    ``mixer.{l}`` for MSA mixers and ``class.{j}`` (``[B, h, Ns+1, Ns+1]``).
    """

    layers: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def new(self, key: str) -> list:
        return self.layers.setdefault(key, [])

    def __getitem__(self, key: str) -> np.ndarray:
        return self.layers[key][0]

    def keys(self):
        return self.layers.keys()

    def max_row_error(self) -> float:
        """Largest deviation of any attention row sum from 1."""
        worst = 0.0
        for mats in self.layers.values():
            for a in mats:
                worst = max(worst, float(np.abs(a.sum(axis=-1) - 1.0).max()))
        return worst


# ---------------------------------------------------------------------------
# whole model

def _check_image(images, cfg):
    if images.ndim != 4 or images.shape[1:] != (cfg.in_channels, cfg.image_height, cfg.image_width):
        raise T.DimensionError(
            f"images {images.shape} do not match config "
            f"[B, {cfg.in_channels}, {cfg.image_height}, {cfg.image_width}]")


def _forward(images, params, cfg, trace=None):
    _check_image(images, cfg)
    wmap = partition_windows(cfg.grid_h, cfg.grid_w, cfg.window)
    tokens, c_stem = _stem_forward(images, params, cfg)
    state = attach_super_and_positional(tokens, wmap, params["super_tokens"], params["pos_embed"])
    x = state.windows
    c_enc = []
    for layer in range(1, cfg.depth + 1):
        x, c = _encoder_forward(x, params, cfg, layer, trace)
        c_enc.append(c)
    sup = np.ascontiguousarray(x[..., 0, :])
    z, c_cls = _class_forward(sup, params["cls_token"], params, cfg, trace)
    cls_out = z[:, 0, :]
    c_norm = None
    if cfg.final_norm:
        head_in, c_norm = Lyr._ln(cls_out, params, "head.norm")
    else:
        head_in = cls_out
    with T.op_scope("head"):
        logits = T.linear(head_in, params["head.weight"], params["head.bias"])
    return logits, (wmap, c_stem, c_enc, c_cls, cls_out, head_in, c_norm)


def _backward(g_logits, cache, params, cfg) -> dict[str, np.ndarray]:
    wmap, c_stem, c_enc, c_cls, cls_out, head_in, c_norm = cache
    grads: dict[str, np.ndarray] = {}
    g = Lyr._linear_backward(g_logits, head_in, params, grads, "head")
    if c_norm is not None:
        g = Lyr._ln_backward(g, c_norm, grads, "head.norm")
    b, d = g.shape
    ns = cfg.num_windows
    gz = np.zeros((b, ns + 1, d), dtype=g.dtype)
    gz[:, 0] = g
    for j in range(cfg.class_layers, 0, -1):
        gz = Lyr.block_backward(gz, c_cls[j - 1], params, grads, f"class_blocks.{j}")
    Lyr._acc(grads, "cls_token", gz[:, :1].sum(axis=0))
    gx = np.zeros((b, ns, cfg.window_tokens + 1, d), dtype=g.dtype)
    gx[:, :, 0] = gz[:, 1:]
    for layer in range(cfg.depth, 0, -1):
        gx = _encoder_backward(gx, c_enc[layer - 1], params, grads, cfg, layer)
    g_sup = gx[:, :, 0].sum(axis=0)
    Lyr._acc(grads, "super_tokens", g_sup)
    g_data = gx[:, :, 1:]
    g_pos = np.zeros_like(params["pos_embed"])
    off = ns if cfg.super_pos else 0
    if cfg.super_pos:
        g_pos[:ns] = g_sup
    g_pos[off + wmap] = g_data.sum(axis=0)
    Lyr._acc(grads, "pos_embed", g_pos)
    g_tokens = np.empty((b, cfg.num_tokens, d), dtype=g.dtype)
    g_tokens[:, wmap] = g_data
    _stem_backward(g_tokens, c_stem, params, grads, cfg)
    return grads


def forward(images: np.ndarray, params: ParameterStore, cfg: ModelConfig, trace: bool = False):
    """Logits for ``[C, H, W]`` or ``[B, C, H, W]`` images.

    Returns ``(logits, AttentionTrace | None)``.
    """
    single = images.ndim == 3
    x = images[None] if single else images
    tr = AttentionTrace() if trace else None
    logits, _ = _forward(x, params, cfg, tr)
    return (logits[0] if single else logits), tr


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray, smoothing: float = 0.0):
    """Mean label-smoothed cross-entropy over the batch and its gradient on the logits.

    Targets are ``(1 - eps) * onehot + eps / K``.
    """
    b, k = logits.shape
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = np.full_like(logits, smoothing / k)
    target[np.arange(b), labels] += 1.0 - smoothing
    loss = -(target * logp).sum() / b  # numpy scalar in the logits' precision
    grad = (np.exp(logp) - target) / b
    return loss, grad.astype(logits.dtype)


def loss_and_grads(images, labels, params: ParameterStore, cfg: ModelConfig, smoothing: float = 0.0):
    """Forward + backward. Returns ``(loss, grads, logits)``; ``grads`` follows store order."""
    logits, cache = _forward(images, params, cfg)
    loss, g_logits = softmax_cross_entropy(logits, labels, smoothing)
    grads = _backward(g_logits, cache, params, cfg)
    return loss, {name: grads[name] for name in params}, logits


# ---------------------------------------------------------------------------
# isotropic full-MSA baseline (throughput comparisons only)

def init_baseline_parameters(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParameterStore:
    """ViT-style model with the same stem, depth and width but global attention over all N tokens."""
    base = init_parameters(cfg.replace(mixer="NONE", super_pos=False, final_norm=False), seed, dtype)
    drop = ("class_blocks", "super_tokens", "cls_token")
    return ParameterStore([(k, v) for k, v in base.items() if not k.startswith(drop)])


def baseline_forward(images: np.ndarray, params: ParameterStore, cfg: ModelConfig) -> np.ndarray:
    """Logits of the full-attention baseline.

    The N data tokens pass through ``depth`` global blocks; their mean
    feeds the head, so each layer attends over exactly N tokens.
    """
    x = images[None] if images.ndim == 3 else images
    _check_image(x, cfg)
    tokens, _ = _stem_forward(x, params, cfg)
    z = tokens + params["pos_embed"]
    for layer in range(1, cfg.depth + 1):
        with T.op_scope(f"encoder.{layer}"):
            z, _ = Lyr.block_forward(z, params, f"blocks.{layer}", cfg.heads, True)
    with T.op_scope("head"):
        logits = T.linear(z.mean(axis=1), params["head.weight"], params["head.bias"])
    return logits[0] if images.ndim == 3 else logits
