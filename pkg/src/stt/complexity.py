"""Analytic multiply-accumulate, attention-memory and parameter accounting.

Conventions: one multiply-accumulate (MAC) counts 1. Bias additions,
softmax, LayerNorm and GELU are not MACs. Attention "score entries" are
the elements of the ``h x T x T`` score tensors, i.e. the attention
memory that grows quadratically with the token count.

The itemized :func:`model_cost_report` uses the same component names as the
scopes of the instrumented forward pass (``stem``, ``encoder.l``,
``mixer.l``, ``class.j``, ``head``), so the two can be compared row by row.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .config import ModelConfig
from .model import _param_specs

CSV_COLUMNS = ("component", "macs", "score_entries", "params")


@dataclass(frozen=True)
class Cost:
    macs: int = 0
    score_entries: int = 0
    params: int = 0

    def __add__(self, other: "Cost") -> "Cost":
        return Cost(self.macs + other.macs, self.score_entries + other.score_entries, self.params + other.params)

    def scaled(self, n: int) -> "Cost":
        return Cost(self.macs * n, self.score_entries * n, self.params * n)


def msa_cost(tokens: int, dim: int, heads: int) -> Cost:
    """Full multi-head self-attention over ``tokens`` tokens.

    Projections Q, K, V and the output map give ``4 T D^2``; scores and the
    weighted sum give ``2 T^2 D``.
    """
    if dim % heads:
        raise ValueError(f"dim {dim} not divisible by heads {heads}")
    t = tokens
    return Cost(4 * t * dim * dim + 2 * t * t * dim, heads * t * t)


def ffn_cost(tokens: int, dim: int, hidden: int) -> Cost:
    return Cost(2 * tokens * dim * hidden)


def wmsa_cost(num_tokens: int, window: int, dim: int, heads: int) -> Cost:
    """Window attention: ``N / M^2`` windows of ``M^2`` data tokens plus one Super token."""
    m2 = window * window
    if num_tokens % m2:
        raise ValueError(f"N={num_tokens} not divisible by M^2={m2}")
    return msa_cost(m2 + 1, dim, heads).scaled(num_tokens // m2)


def stm_cost(num_super: int, dim: int, hidden: int | None = None) -> Cost:
    """Super Token Mixer: token mixing ``2 D Ns^2`` plus channel mixing ``2 Ns D Dh``."""
    dh = dim // 2 if hidden is None else hidden
    return Cost(2 * dim * num_super * num_super + 2 * num_super * dim * dh)


def conv_mixer_cost(num_super: int, dim: int, kernel: int) -> Cost:
    return Cost(num_super * dim * dim * kernel * kernel)


def stem_cost(cfg: ModelConfig) -> Cost:
    h, w = cfg.image_height, cfg.image_width
    macs = 0
    for cin, cout, k, stride, pad in cfg.stem_layers:
        h = (h + 2 * pad - k) // stride + 1
        w = (w + 2 * pad - k) // stride + 1
        macs += h * w * cout * cin * k * k
    return Cost(macs)


def _mixer_cost(cfg: ModelConfig) -> Cost:
    ns, d = cfg.num_windows, cfg.embed_dim
    if cfg.mixer == "STM":
        return stm_cost(ns, d, cfg.stm_channel_hidden)
    if cfg.mixer == "MSA":
        return msa_cost(ns, d, cfg.heads) + ffn_cost(ns, d, cfg.ffn_hidden)
    if cfg.mixer in ("CONV2", "CONV3"):
        return conv_mixer_cost(ns, d, int(cfg.mixer[-1]))
    return Cost()


def _component_of(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "stem":
        return "stem"
    if parts[0] == "blocks":
        return f"mixer.{parts[1]}" if parts[2] == "mixer" else f"encoder.{parts[1]}"
    if parts[0] == "class_blocks":
        return f"class.{parts[1]}"
    if parts[0] == "head":
        return "head"
    return "embeddings"


def _param_counts(cfg: ModelConfig) -> dict[str, int]:
    counts: dict[str, int] = {}
    for name, shape, _ in _param_specs(cfg):
        n = 1
        for s in shape:
            n *= s
        key = _component_of(name)
        counts[key] = counts.get(key, 0) + n
    return counts


@dataclass
class ComplexityReport:
    """Itemized per-image costs of one configuration plus the full-MSA baseline."""

    config: dict
    components: dict[str, Cost] = field(default_factory=dict)
    baseline: dict[str, Cost] = field(default_factory=dict)

    @property
    def total(self) -> Cost:
        return sum(self.components.values(), Cost())

    @property
    def baseline_total(self) -> Cost:
        return sum(self.baseline.values(), Cost())

    @property
    def layer_score_ratio(self) -> float:
        """Window-attention score entries per layer over full-MSA entries per layer."""
        return self.config["wmsa_entries_per_layer"] / self.config["global_entries_per_layer"]

    @property
    def mac_ratio(self) -> float:
        """Baseline MACs over STT MACs."""
        return self.baseline_total.macs / self.total.macs

    def rows(self) -> list[tuple[str, int, int, int]]:
        out = [(k, c.macs, c.score_entries, c.params) for k, c in self.components.items()]
        t = self.total
        out.append(("total", t.macs, t.score_entries, t.params))
        for k, c in self.baseline.items():
            out.append((f"baseline.{k}", c.macs, c.score_entries, c.params))
        b = self.baseline_total
        out.append(("baseline.total", b.macs, b.score_entries, b.params))
        return out

    def to_csv(self) -> str:
        """CSV with the fixed header ``component,macs,score_entries,params``."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(self.rows())
        return buf.getvalue()

    def to_table(self) -> str:
        c = self.config
        lines = [
            f"N={c['N']} Ns={c['Ns']} M={c['M']} D={c['D']} h={c['h']} L={c['L']} mixer={c['mixer']}",
            f"{'component':<18}{'macs':>16}{'score_entries':>16}{'params':>14}",
        ]
        for name, macs, scores, params in self.rows():
            lines.append(f"{name:<18}{macs:>16,}{scores:>16,}{params:>14,}")
        lines.append(f"WMSA/global score entries per layer: {c['wmsa_entries_per_layer']:,}/"
                     f"{c['global_entries_per_layer']:,} = {self.layer_score_ratio:.6f}")
        lines.append(f"baseline/STT MACs: {self.mac_ratio:.4f}")
        return "\n".join(lines) + "\n"


def model_cost_report(cfg: ModelConfig) -> ComplexityReport:
    """Per-image cost of ``cfg`` itemized by component.

    The baseline is an isotropic model with the same stem, N, D, L and FFN
    whose blocks attend globally over the N data tokens (mean-pooled into
    the head).
    """
    n, ns, d, h = cfg.num_tokens, cfg.num_windows, cfg.embed_dim, cfg.heads
    params = _param_counts(cfg)
    comps: dict[str, Cost] = {
        "stem": stem_cost(cfg) + Cost(params=params["stem"]),
        "embeddings": Cost(params=params["embeddings"]),
    }
    window_tokens = ns * (cfg.window_tokens + 1)
    for layer in range(1, cfg.depth + 1):
        key = f"encoder.{layer}"
        comps[key] = (wmsa_cost(n, cfg.window, d, h) + ffn_cost(window_tokens, d, cfg.ffn_hidden)
                      + Cost(params=params[key]))
        if cfg.mixer_active(layer):
            key = f"mixer.{layer}"
            comps[key] = _mixer_cost(cfg) + Cost(params=params[key])
    for j in range(1, cfg.class_layers + 1):
        key = f"class.{j}"
        comps[key] = msa_cost(ns + 1, d, h) + ffn_cost(ns + 1, d, cfg.ffn_hidden) + Cost(params=params[key])
    comps["head"] = Cost(d * cfg.num_classes, 0, params["head"])

    block_params = params["encoder.1"]
    base = {
        "stem": stem_cost(cfg) + Cost(params=params["stem"]),
        "embeddings": Cost(params=n * d),
        "encoder": (msa_cost(n, d, h) + ffn_cost(n, d, cfg.ffn_hidden) + Cost(params=block_params)).scaled(cfg.depth),
        "head": Cost(d * cfg.num_classes, 0, d * cfg.num_classes + cfg.num_classes),
    }
    echo = {
        "N": n, "Ns": ns, "M": cfg.window, "D": d, "h": h, "L": cfg.depth, "mixer": cfg.mixer,
        "wmsa_entries_per_layer": wmsa_cost(n, cfg.window, d, h).score_entries,
        "global_entries_per_layer": msa_cost(n, d, h).score_entries,
    }
    return ComplexityReport(echo, comps, base)
