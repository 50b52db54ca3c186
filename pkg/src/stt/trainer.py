"""AdamW training loop with warmup + cosine schedule and a binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"STTC"  u32 version  u32 tensor_count
    per tensor: u16 name_len, name (UTF-8), u8 dtype (0 = float32, 1 = float64),
                u8 rank, rank x u32 extents, raw little-endian values

Optimizer moments are stored as extra tensors ``opt.m.<name>`` and
``opt.v.<name>`` plus a scalar ``opt.step``.
"""
from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import Dataset, batch_iter, flip_mask
from .model import ParameterStore, forward, init_parameters, loss_and_grads, softmax_cross_entropy

MAGIC = b"STTC"
VERSION = 1
METRICS_HEADER = ("epoch", "step", "lr", "train_loss", "train_acc", "eval_acc")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_NO_DECAY_NAMES = ("cls_token", "super_tokens", "pos_embed")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-4  # peak lr = base_lr * batch_size / 512
    batch_size: int = 64
    warmup_epochs: int = 5
    epochs: int = 50
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    seed: int = 0
    min_lr: float = 1e-6
    clip_norm: float = 1.0  # 0 disables clipping
    hflip: bool = True
    max_steps: int = 0  # stop after this many optimizer steps (0 = no limit)
    target_acc: float = 0.0  # stop once eval accuracy reaches this (0 = never)
    eval_batch: int = 256

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 512


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ParameterStore) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


class TrainingDiverged(FloatingPointError):
    """A loss, gradient or parameter became NaN/Inf; ``tensor`` names the first one found."""

    def __init__(self, tensor: str, step: int):
        super().__init__(f"non-finite values in {tensor} at step {step}")
        self.tensor = tensor
        self.step = step


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# schedule, loss, optimizer

def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to ``min_lr``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    peak = cfg.peak_lr
    if step < warm:
        return peak * step / warm
    if total <= warm:
        return peak
    progress = min(1.0, (step - warm) / (total - warm))
    return cfg.min_lr + (peak - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def label_smoothed_ce(logits: np.ndarray, target, eps: float):
    """Cross-entropy against ``(1 - eps) * onehot + eps / K``; returns ``(loss, grad)``.

    Accepts one logit vector with an integer target or a batch; batch
    losses are averaged.
    """
    single = logits.ndim == 1
    z = logits[None] if single else logits
    y = np.atleast_1d(np.asarray(target))
    loss, grad = softmax_cross_entropy(z, y, eps)
    return (loss, grad[0]) if single else (loss, grad)


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to matrices and conv kernels only.

    Excluded: every 1-D tensor (LayerNorm scales and shifts, biases,
    LayerScale vectors) and the CLS, Super-token and positional tables.
    """
    return value.ndim > 1 and name not in _NO_DECAY_NAMES


def adamw_step(params: ParameterStore, grads: dict, state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay."""
    state.step += 1
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if cfg.weight_decay and decays(name, p):
            p *= p.dtype.type(1.0 - lr * cfg.weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p -= (lr * update).astype(p.dtype)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the norm before."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= g.dtype.type(scale)
    return total


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    params: ParameterStore
    state: OptimizerState
    metrics: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_eval_acc: float = -1.0
    best_epoch: int = 0
    epochs_to_target: int | None = None


def evaluate(params: ParameterStore, cfg: ModelConfig, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy on ``dataset``."""
    correct = 0
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start:start + batch_size]
        logits, _ = forward(x, params, cfg)
        correct += int(np.sum(logits.argmax(axis=1) == dataset.labels[start:start + batch_size]))
    return correct / max(1, len(dataset))


def _first_nonfinite(loss, logits, grads, params) -> str | None:
    if not np.isfinite(loss):
        return "loss"
    if logits is not None and not np.isfinite(logits).all():
        return "logits"
    for name, g in grads.items():
        if not np.isfinite(g).all():
            return f"grad:{name}"
    for name, p in params.items():
        if not np.isfinite(p).all():
            return f"param:{name}"
    return None


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_set: Dataset, eval_set: Dataset | None = None,
          out_dir: str | os.PathLike | None = None, params: ParameterStore | None = None,
          log: Callable[[dict], None] | None = None, dtype=np.float32) -> TrainResult:
    """Run seeded minibatch AdamW training.

    With ``out_dir``, writes ``metrics.csv`` (one row per epoch),
    ``steps.csv`` (loss per step), ``best.sttc`` whenever eval accuracy
    improves and ``final.sttc`` at the end.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if train_set.num_classes > model_cfg.num_classes:
        raise ValueError(f"dataset has {train_set.num_classes} classes, model {model_cfg.num_classes}")
    params = init_parameters(model_cfg, train_cfg.seed, dtype) if params is None else params
    state = OptimizerState.zeros_like(params)
    bs = min(train_cfg.batch_size, len(train_set))
    steps_per_epoch = math.ceil(len(train_set) / bs)
    out = Path(out_dir) if out_dir is not None else None
    metrics_file = steps_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "metrics.csv", "w", newline="")
        steps_file = open(out / "steps.csv", "w", newline="")
        mw = csv.writer(metrics_file, lineterminator="\n")
        sw = csv.writer(steps_file, lineterminator="\n")
        mw.writerow(METRICS_HEADER)
        sw.writerow(("step", "lr", "loss"))
    result = TrainResult(params, state)
    images = train_set.images
    try:
        step = 0
        for epoch in range(train_cfg.epochs):
            loss_sum, correct, seen = 0.0, 0, 0
            lr = 0.0
            for idx in batch_iter(len(train_set), bs, train_cfg.seed, epoch):
                x = images[idx]
                if train_cfg.hflip:
                    flip = flip_mask(len(idx), train_cfg.seed, step)
                    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
                x = x.astype(dtype, copy=False)
                y = train_set.labels[idx]
                try:
                    loss, grads, logits = loss_and_grads(x, y, params, model_cfg, train_cfg.label_smoothing)
                except T.NonFiniteError as exc:
                    raise TrainingDiverged(f"activation ({exc})", step) from exc
                bad = _first_nonfinite(loss, logits, grads, params)
                if bad is not None:
                    raise TrainingDiverged(bad, step)
                lr = lr_at(step, steps_per_epoch, train_cfg)
                clip_grad_norm(grads, train_cfg.clip_norm)
                adamw_step(params, grads, state, lr, train_cfg)
                bad = _first_nonfinite(0.0, None, {}, params)
                if bad is not None:
                    raise TrainingDiverged(bad, step)
                result.step_losses.append(float(loss))
                if steps_file is not None:
                    sw.writerow((step, repr(lr), repr(float(loss))))
                loss_sum += float(loss) * len(idx)
                correct += int(np.sum(logits.argmax(axis=1) == y))
                seen += len(idx)
                step += 1
                if train_cfg.max_steps and step >= train_cfg.max_steps:
                    break
            eval_acc = evaluate(params, model_cfg, eval_set, train_cfg.eval_batch) if eval_set is not None else float("nan")
            row = {"epoch": epoch + 1, "step": step, "lr": lr, "train_loss": loss_sum / seen,
                   "train_acc": correct / seen, "eval_acc": eval_acc}
            result.metrics.append(row)
            if metrics_file is not None:
                mw.writerow([row[k] if k in ("epoch", "step") else repr(float(row[k])) for k in METRICS_HEADER])
                metrics_file.flush()
                steps_file.flush()
            if log is not None:
                log(row)
            if eval_set is not None and eval_acc > result.best_eval_acc:
                result.best_eval_acc, result.best_epoch = eval_acc, epoch + 1
                if out is not None:
                    save_checkpoint(out / "best.sttc", params, state)
            if train_cfg.target_acc and result.epochs_to_target is None and eval_acc >= train_cfg.target_acc:
                result.epochs_to_target = epoch + 1
                break
            if train_cfg.max_steps and step >= train_cfg.max_steps:
                break
        if out is not None:
            save_checkpoint(out / "final.sttc", params, state)
    finally:
        if metrics_file is not None:
            metrics_file.close()
            steps_file.close()
    return result


# ---------------------------------------------------------------------------
# checkpoints

def _tensor_bytes(name: str, value: np.ndarray) -> bytes:
    if value.dtype == np.float32:
        tag, dt = 0, _DTYPES[0]
    elif value.dtype == np.float64:
        tag, dt = 1, _DTYPES[1]
    else:
        raise TypeError(f"{name}: unsupported dtype {value.dtype}")
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF or value.ndim > 0xFF:
        raise ValueError(f"{name}: name or rank too large for the format")
    head = struct.pack("<H", len(encoded)) + encoded + struct.pack("<BB", tag, value.ndim)
    head += struct.pack(f"<{value.ndim}I", *value.shape)
    return head + np.ascontiguousarray(value, dtype=dt).tobytes()


def checkpoint_bytes(store: ParameterStore, state: OptimizerState | None = None) -> bytes:
    entries = list(store.items())
    if state is not None:
        entries += [(f"opt.m.{k}", v) for k, v in state.m.items()]
        entries += [(f"opt.v.{k}", v) for k, v in state.v.items()]
        entries.append(("opt.step", np.array(float(state.step))))
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    parts += [_tensor_bytes(k, v) for k, v in entries]
    return b"".join(parts)


def save_checkpoint(path: str | os.PathLike, store: ParameterStore, state: OptimizerState | None = None) -> None:
    """Write ``store`` (and optionally optimizer state) atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(store, state))
    os.replace(tmp, path)


def parse_checkpoint(raw: bytes) -> tuple[ParameterStore, OptimizerState | None]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointFormatError(f"truncated while reading {what}", pos)
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    store = ParameterStore()
    opt: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (n,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("name is not UTF-8", start + 2) from None
        tag, rank = take(2, f"{name} header")
        if tag not in _DTYPES:
            raise CheckpointFormatError(f"{name}: unknown dtype tag {tag}", pos - 2)
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} extents"))
        dt = _DTYPES[tag]
        count_el = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(dt.itemsize * count_el, f"{name} data"), dtype=dt)
        value = data.reshape(shape).astype(dt.newbyteorder("="))
        if name.startswith("opt."):
            opt[name] = value
        else:
            if name in store:
                raise CheckpointFormatError(f"duplicate tensor {name}", start)
            store.add(name, value)
    if pos != len(raw):
        raise CheckpointFormatError(f"{len(raw) - pos} trailing bytes", pos)
    state = None
    if opt:
        try:
            state = OptimizerState({k: opt[f"opt.m.{k}"] for k in store}, {k: opt[f"opt.v.{k}"] for k in store},
                                   int(opt["opt.step"]))
        except KeyError as exc:
            raise CheckpointFormatError(f"incomplete optimizer state: missing {exc.args[0]}", pos) from None
    return store, state


def load_checkpoint(path: str | os.PathLike) -> tuple[ParameterStore, OptimizerState | None]:
    """Read a checkpoint; raises :class:`CheckpointFormatError` without returning partial data."""
    return parse_checkpoint(Path(path).read_bytes())
