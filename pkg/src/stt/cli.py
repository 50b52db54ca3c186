"""Command-line entry point: ``stt {train,eval,bench,complexity,gradcheck,params,attn}``.

Configuration is a flat ``key = value`` text file (``#`` starts a comment)
or the name of a built-in run preset, refined with repeatable
``--set key=value``. Keys:

* ``preset``: base model preset (``desk``, ``tiny``, ``stt-s25``, ...)
* ``model.<field>``: any :class:`~stt.config.ModelConfig` field
* ``train.<field>``: any :class:`~stt.trainer.TrainConfig` field
* ``data``: ``synth`` or ``cifar``; ``data.dir``, ``data.train_size``,
  ``data.eval_size``, ``data.seed``

Exit codes: 0 success, 1 a check failed, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import complexity as X
from . import config as C
from . import data as D
from . import gradcheck as G
from . import model as M
from . import trainer as R

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

_SYNTH = {"preset": "desk", "model.num_classes": "2", "model.layerscale_init": "0.1", "data": "synth",
          "data.train_size": "10000", "data.eval_size": "2000", "data.seed": "0",
          "train.base_lr": "0.004", "train.epochs": "50", "train.warmup_epochs": "5", "train.batch_size": "64"}
RUN_PRESETS: dict[str, dict[str, str]] = {
    "synth-stm": {**_SYNTH, "model.mixer": "STM"},
    "synth-none": {**_SYNTH, "model.mixer": "NONE"},
    "synth-msa": {**_SYNTH, "model.mixer": "MSA"},
    "cifar": {"preset": "desk", "model.num_classes": "10", "model.layerscale_init": "0.1", "data": "cifar",
              "data.dir": "cifar-10-batches-bin", "train.base_lr": "0.004", "train.epochs": "50",
              "train.warmup_epochs": "5", "train.batch_size": "64"},
}


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# configuration

def parse_kv_text(text: str, source: str = "<text>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def _coerce(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(type(current[0])(v) for v in value.replace("(", "").replace(")", "").split(",") if v.strip())
    return value


def _apply(obj, prefix: str, keys: dict[str, str]):
    changes = {}
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in keys.items():
        if not key.startswith(prefix):
            continue
        fname = key[len(prefix):]
        if fname not in names:
            raise C.ConfigError(key, "unknown setting")
        try:
            changes[fname] = _coerce(value, getattr(obj, fname))
        except ValueError as exc:
            raise C.ConfigError(key, str(exc)) from None
    return dataclasses.replace(obj, **changes) if changes else obj


@dataclasses.dataclass
class RunSpec:
    model: C.ModelConfig
    train: R.TrainConfig
    data: dict[str, str]
    raw: dict[str, str]


_DATA_KEYS = {"data", "data.dir", "data.train_size", "data.eval_size", "data.seed"}


def resolve_config(source: str | None, overrides: list[str], seed: int | None = None) -> RunSpec:
    """Merge a config file or run preset with ``--set`` overrides."""
    if source is None:
        raw = {}
    elif source in RUN_PRESETS:
        raw = dict(RUN_PRESETS[source])
    elif Path(source).is_file():
        raw = parse_kv_text(Path(source).read_text(), source)
    elif source.lower() in C.PRESETS:
        raw = {"preset": source.lower()}
    else:
        raise UsageError(f"config {source!r} is neither a file nor a preset "
                         f"({', '.join([*RUN_PRESETS, *C.PRESETS])})")
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    if seed is not None:
        raw["train.seed"] = str(seed)
    for key in raw:
        if key != "preset" and key not in _DATA_KEYS and not key.startswith(("model.", "train.")):
            raise C.ConfigError(key, "unknown setting")
    base = C.preset(raw.get("preset", "desk"))
    model = _apply(base, "model.", raw)
    try:
        train = _apply(R.TrainConfig(), "train.", raw)
    except ValueError as exc:
        if isinstance(exc, C.ConfigError):
            raise
        raise C.ConfigError("train", str(exc)) from None
    data = {"data": raw.get("data", "synth"), "data.dir": raw.get("data.dir", ""),
            "data.train_size": raw.get("data.train_size", "10000"),
            "data.eval_size": raw.get("data.eval_size", "2000"), "data.seed": raw.get("data.seed", "0")}
    if data["data"] not in ("synth", "cifar"):
        raise C.ConfigError("data", f"unknown dataset {data['data']!r}")
    return RunSpec(model, train, data, raw)


def manifest_text(spec: RunSpec, command: str, out_dir: str) -> str:
    """Fully resolved run description in the config-file syntax."""
    lines = [f"command = {command}", f"out = {out_dir}", f"seed = {spec.train.seed}"]
    for k, v in spec.model.to_dict().items():
        lines.append(f"model.{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
    for k, v in dataclasses.asdict(spec.train).items():
        lines.append(f"train.{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
    for k, v in spec.data.items():
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def load_datasets(spec: RunSpec) -> tuple[D.Dataset, D.Dataset]:
    cfg = spec.model
    if spec.data["data"] == "cifar":
        path = Path(spec.data["data.dir"])
        if not path.is_dir():
            raise UsageError(f"dataset directory not found: {path}")
        try:
            return D.load_cifar10_binary(path)
        except (FileNotFoundError, D.DataFormatError) as exc:
            raise UsageError(str(exc)) from None
    seed = int(spec.data["data.seed"])
    n_train, n_eval = int(spec.data["data.train_size"]), int(spec.data["data.eval_size"])
    grid = cfg.grid_h
    train = D.synth_crosswindow(n_train, grid, cfg.window, seed, cfg.patch_size)
    # disjoint eval stream: seed offset by 2**32
    evals = D.synth_crosswindow(n_eval, grid, cfg.window, seed + (1 << 32), cfg.patch_size)
    return train, evals


@contextlib.contextmanager
def _threads(n: int | None):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=n or 1):
        yield


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    spec = resolve_config(args.config, args.set, args.seed)
    out = Path(args.out or "runs/train")
    train, evals = load_datasets(spec)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.txt").write_text(manifest_text(spec, "train", str(out)))

    def log(row):
        print(f"epoch {row['epoch']:3d} step {row['step']:6d} lr {row['lr']:.3e} "
              f"loss {row['train_loss']:.4f} train_acc {row['train_acc']:.4f} eval_acc {row['eval_acc']:.4f}",
              flush=True)

    with _threads(args.threads):
        res = R.train(spec.model, spec.train, train, evals, out, log=log)
    print(f"best eval_acc {res.best_eval_acc:.4f} at epoch {res.best_epoch}; outputs in {out}")
    return EXIT_OK


def _spec_for_checkpoint(args) -> RunSpec:
    if args.config is None:
        manifest = Path(args.checkpoint).parent / "manifest.txt"
        if not manifest.is_file():
            raise UsageError("--config is required when no manifest.txt sits next to the checkpoint")
        raw = parse_kv_text(manifest.read_text(), str(manifest))
        keep = {k: v for k, v in raw.items() if k.startswith(("model.", "train.", "data"))}
        sets = [f"{k}={v}" for k, v in keep.items()] + list(args.set)
        return resolve_config(None, sets, args.seed)
    return resolve_config(args.config, args.set, args.seed)


def _load_ckpt(path) -> M.ParameterStore:
    if path is None:
        raise UsageError("--checkpoint is required")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        store, _ = R.load_checkpoint(path)
    except R.CheckpointFormatError as exc:
        raise UsageError(f"{path}: {exc}") from None
    return store


def cmd_eval(args) -> int:
    store = _load_ckpt(args.checkpoint)
    spec = _spec_for_checkpoint(args)
    _, evals = load_datasets(spec)
    with _threads(args.threads):
        acc = R.evaluate(store, spec.model, evals)
    print(f"eval_acc {acc!r} ({len(evals)} samples)")
    return EXIT_OK


def _timings(fn, repeats: int, warmup: int = 3) -> list[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def median_iqr(samples: list[float]) -> tuple[float, float]:
    if len(samples) == 1:
        return samples[0], 0.0
    q = statistics.quantiles(samples, n=4, method="inclusive")
    return statistics.median(samples), q[2] - q[0]


def cmd_bench(args) -> int:
    spec = resolve_config(args.config, args.set, args.seed)
    cfg = spec.model
    if args.repeats < 1 or args.batch < 1:
        raise UsageError("--repeats and --batch must be >= 1")
    x = np.random.default_rng(0).standard_normal(
        (args.batch, cfg.in_channels, cfg.image_height, cfg.image_width)).astype(np.float32)
    stt_params = M.init_parameters(cfg, spec.train.seed)
    base_params = M.init_baseline_parameters(cfg, spec.train.seed)
    with _threads(args.threads):
        t_stt = _timings(lambda: M.forward(x, stt_params, cfg), args.repeats)
        t_base = _timings(lambda: M.baseline_forward(x, base_params, cfg), args.repeats)
    (ms, iqr_s), (mb, iqr_b) = median_iqr(t_stt), median_iqr(t_base)
    ratio = mb / ms
    lines = ["model,median_s,iqr_s,repeats,batch,threads",
             f"stt,{ms!r},{iqr_s!r},{args.repeats},{args.batch},{args.threads or 1}",
             f"baseline,{mb!r},{iqr_b!r},{args.repeats},{args.batch},{args.threads or 1}"]
    print(f"N={cfg.num_tokens} D={cfg.embed_dim} L={cfg.depth} batch={args.batch} threads={args.threads or 1}")
    print(f"stt       median {ms * 1e3:9.2f} ms  IQR {iqr_s * 1e3:8.2f} ms")
    print(f"baseline  median {mb * 1e3:9.2f} ms  IQR {iqr_b * 1e3:8.2f} ms")
    print(f"baseline/stt time ratio {ratio:.3f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text("\n".join(lines) + "\n")
        (out / "manifest.txt").write_text(manifest_text(spec, "bench", str(out)))
    return EXIT_OK


def cmd_complexity(args) -> int:
    spec = resolve_config(args.config, args.set, args.seed)
    report = X.model_cost_report(spec.model)
    print(report.to_table(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "complexity.csv").write_text(report.to_csv())
        (out / "complexity.txt").write_text(report.to_table())
        (out / "manifest.txt").write_text(manifest_text(spec, "complexity", str(out)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = []
    if args.scope in ("op", "all"):
        reports += G.op_suite(fault=args.fault)
    if args.scope in ("model", "all"):
        cfg = resolve_config(args.config or "tiny", args.set).model
        reports += G.model_check(cfg)
    for r in reports:
        print(r)
    failed = [r.op for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_params(args) -> int:
    spec = resolve_config(args.config, args.set, args.seed)
    total, groups = M.parameter_count(M.init_parameters(spec.model, 0))
    for name, n in groups.items():
        print(f"{name:<12}{n:>14,}")
    print(f"{'total':<12}{total:>14,}")
    return EXIT_OK


# --- attention export ----------------------------------------------------

def read_image(path: str | Path, index: int = 0) -> tuple[np.ndarray, str]:
    """Load a uint8 ``[3, H, W]`` image from binary PPM (P6) or a 3073-byte record file."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"image not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"P6":
        fields, pos = [], 2
        while len(fields) < 3:
            while raw[pos:pos + 1].isspace():
                pos += 1
            if raw[pos:pos + 1] == b"#":
                pos = raw.index(b"\n", pos) + 1
                continue
            end = pos
            while not raw[end:end + 1].isspace():
                end += 1
            fields.append(int(raw[pos:end]))
            pos = end
        w, h, maxval = fields
        if maxval != 255:
            raise UsageError(f"{path}: only 8-bit PPM supported")
        pix = np.frombuffer(raw[pos + 1:pos + 1 + 3 * w * h], dtype=np.uint8)
        if pix.size != 3 * w * h:
            raise UsageError(f"{path}: truncated PPM data")
        return pix.reshape(h, w, 3).transpose(2, 0, 1).copy(), path.stem
    try:
        _, pixels = D.parse_records(raw, str(path))
    except D.DataFormatError as exc:
        raise UsageError(str(exc)) from None
    if not 0 <= index < len(pixels):
        raise UsageError(f"record index {index} outside [0, {len(pixels)})")
    return pixels[index], path.stem if len(pixels) == 1 else f"{path.stem}_{index}"


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255)."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def to_gray(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 255]; a constant map becomes all zeros."""
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255).astype(np.uint8)


def attention_maps(trace: M.AttentionTrace, cfg: C.ModelConfig, layer: int,
                   class_layer: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Head-averaged maps on the token grid before normalization.

    Returns ``(window_map [gh, gw], class_map [wh, ww])``: each data token's
    attention to its window's Super token at encoder ``layer``, and the CLS
    row's attention to each Super token at the chosen class layer.
    """
    a = trace[f"encoder.{layer}"][0].mean(axis=1)  # [Ns, T, T]
    to_super = a[:, 1:, 0]  # [Ns, M*M]
    grid = np.empty(cfg.num_tokens, dtype=np.float64)
    grid[M.partition_windows(cfg.grid_h, cfg.grid_w, cfg.window)] = to_super
    j = class_layer or cfg.class_layers
    c = trace[f"class.{j}"][0].mean(axis=0)  # [Ns+1, Ns+1]
    wh, ww = cfg.window_grid
    return grid.reshape(cfg.grid_h, cfg.grid_w), c[0, 1:].reshape(wh, ww)


def cmd_attn(args) -> int:
    store = _load_ckpt(args.checkpoint)
    spec = _spec_for_checkpoint(args)
    cfg = spec.model
    if args.layer is None or not 1 <= args.layer <= cfg.depth:
        raise UsageError(f"--layer must lie in [1, {cfg.depth}]")
    if args.image is None:
        raise UsageError("--image is required")
    pixels, stem = read_image(args.image, args.index)
    if pixels.shape != (cfg.in_channels, cfg.image_height, cfg.image_width):
        raise UsageError(f"image {pixels.shape} does not match config "
                         f"{(cfg.in_channels, cfg.image_height, cfg.image_width)}")
    image = D.Dataset(pixels[None], np.zeros(1), 1).images
    _, trace = M.forward(image, store.astype(np.float64), cfg, trace=True)
    wmap, cmap = attention_maps(trace, cfg, args.layer)
    p = cfg.patch_size
    up_w = np.kron(to_gray(wmap), np.ones((p, p), dtype=np.uint8))
    up_c = np.kron(to_gray(cmap), np.ones((p * cfg.window, p * cfg.window), dtype=np.uint8))
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / f"{stem}_L{args.layer}_window.pgm", up_w)
    write_pgm(out / f"{stem}_class.pgm", up_c)
    written = [f"{stem}_L{args.layer}_window.pgm", f"{stem}_class.pgm"]
    if args.composite:
        comp = wmap * np.kron(cmap, np.ones((cfg.window, cfg.window)))
        write_pgm(out / f"{stem}_L{args.layer}_composite.pgm", np.kron(to_gray(comp), np.ones((p, p), dtype=np.uint8)))
        written.append(f"{stem}_L{args.layer}_composite.pgm")
    for name in written:
        print(out / name)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file or preset name")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a setting")
    common.add_argument("--seed", type=int, help="training/initialization seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint", help="checkpoint file")
    common.add_argument("--layer", type=int, help="encoder layer (1-based)")
    common.add_argument("--threads", type=int, help="BLAS threads (default 1)")

    p = argparse.ArgumentParser(prog="stt", description="Super Token Transformer toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model").set_defaults(func=cmd_train)
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint").set_defaults(func=cmd_eval)
    b = sub.add_parser("bench", parents=[common], help="forward wall time vs full-MSA baseline")
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--repeats", type=int, default=20)
    b.set_defaults(func=cmd_bench)
    sub.add_parser("complexity", parents=[common], help="analytic cost report").set_defaults(func=cmd_complexity)
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--scope", choices=("op", "model", "all"), default="all")
    g.add_argument("--fault", help="sign-flip this op's backward (negative control)")
    g.set_defaults(func=cmd_gradcheck)
    sub.add_parser("params", parents=[common], help="parameter counts").set_defaults(func=cmd_params)
    a = sub.add_parser("attn", parents=[common], help="export attention maps as PGM")
    a.add_argument("--image", help="binary PPM (P6) or 3073-byte record file")
    a.add_argument("--index", type=int, default=0, help="record index within a record file")
    a.add_argument("--composite", action="store_true", help="also write class x window product map")
    a.set_defaults(func=cmd_attn)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"error: invalid config field {exc.field}: {exc}", file=sys.stderr)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
