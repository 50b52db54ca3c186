"""Finite-difference verification suites for the tensor ops and the full model."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .model import init_parameters, loss_and_grads, _forward, softmax_cross_entropy
from .tensor import GradCheckReport, numeric_gradient, rel_error


def _layer_norm_fwd(x, g, b):
    return T.layer_norm(x, g, b)[0]


def _layer_norm_bwd(G, x, g, b):
    return T.layer_norm_backward(G, T.layer_norm(x, g, b)[1])


# name -> (forward, backward, input factory)
OPS = {
    "matmul": (
        T.matmul,
        T.matmul_backward,
        lambda r: [r.standard_normal((5, 7)), r.standard_normal((7, 3))],
    ),
    "matmul_batched": (
        T.matmul,
        T.matmul_backward,
        lambda r: [r.standard_normal((2, 3, 4, 5)), r.standard_normal((2, 3, 5, 4))],
    ),
    "linear": (
        T.linear,
        lambda g, x, w, b: T.linear_backward(g, x, w),
        lambda r: [r.standard_normal((2, 3, 6)), r.standard_normal((6, 4)), r.standard_normal(4)],
    ),
    "softmax_lastdim": (
        T.softmax_lastdim,
        lambda g, x: [T.softmax_lastdim_backward(g, T.softmax_lastdim(x))],
        lambda r: [3.0 * r.standard_normal((4, 6))],
    ),
    "layer_norm": (
        _layer_norm_fwd,
        _layer_norm_bwd,
        lambda r: [r.standard_normal((3, 8)), 1 + 0.5 * r.standard_normal(8), r.standard_normal(8)],
    ),
    "gelu": (
        T.gelu,
        lambda g, x: [T.gelu_backward(g, x)],
        lambda r: [2.0 * r.standard_normal((4, 5))],
    ),
    "conv2d": (
        lambda x, w, b: T.conv2d(x, w, b, 1, 1),
        lambda g, x, w, b: T.conv2d_backward(g, x, w, 1, 1),
        lambda r: [r.standard_normal((3, 6, 6)), r.standard_normal((4, 3, 3, 3)), r.standard_normal(4)],
    ),
    "conv2d_strided": (
        lambda x, w, b: T.conv2d(x, w, b, 4, 2),
        lambda g, x, w, b: T.conv2d_backward(g, x, w, 4, 2),
        lambda r: [r.standard_normal((2, 2, 12, 12)), r.standard_normal((3, 2, 8, 8)), r.standard_normal(3)],
    ),
}


def op_suite(tolerance: float = 1e-6, instances: int = 10, seed: int = 0,
             fault: str | None = None, analytic_dtype=np.float64) -> list[GradCheckReport]:
    """Check every op on ``instances`` random inputs.

    The analytic gradients run in ``analytic_dtype``; the reference is
    always a long-double finite difference. ``fault`` names an op whose
    backward is sign-flipped (negative control). One report per op holds
    the worst error across its instances.
    """
    reports = []
    for name, (fwd, bwd, make) in OPS.items():
        if name == fault:
            bwd = (lambda b: lambda *a: [None if g is None else -g for g in b(*a)])(bwd)
        rng = np.random.default_rng(seed)
        worst, checked = 0.0, 0
        for i in range(instances):
            r = T.gradient_check(name, fwd, bwd, make(rng), tolerance, seed=seed + i,
                                 analytic_dtype=analytic_dtype)
            worst = max(worst, r.max_rel_error)
            checked += r.checked
        reports.append(GradCheckReport(name, worst, checked, tolerance))
    return reports


def _perturbed_parameters(cfg: ModelConfig, seed: int):
    """Initial parameters pushed off their symmetric init values.

    LayerScale at 1e-5 and zero biases make many gradients tiny or
    structurally zero; random values exercise every path at similar scale.
    """
    store = init_parameters(cfg, seed, np.float64)
    rng = np.random.default_rng(seed + 1)
    for name, v in store.items():
        if name.endswith((".ls1", ".ls2")):
            store[name] = rng.uniform(0.5, 1.0, v.shape)
        elif name.endswith("bias"):
            store[name] = 0.1 * rng.standard_normal(v.shape)
        elif v.ndim == 1:  # LN gains
            store[name] = 1.0 + 0.1 * rng.standard_normal(v.shape)
        elif name.startswith("stem"):
            store[name] = v
        else:
            store[name] = rng.standard_normal(v.shape) / np.sqrt(v.shape[0])
    return store


def model_check(cfg: ModelConfig, tolerance: float = 1e-5, seed: int = 0, batch: int = 2,
                max_entries: int | None = 12, directions: int = 2,
                smoothing: float = 0.1, analytic_dtype=np.float64) -> list[GradCheckReport]:
    """Loss gradient of the whole model w.r.t. every parameter tensor.

    Analytic gradients are computed in ``analytic_dtype``; the central
    differences re-run the forward in long double on the same rounded
    parameters and images. Per tensor, up to
    ``max_entries`` randomly chosen entries are probed individually
    (``None`` probes all of them) and ``directions`` random unit directions
    over the whole tensor are probed as directional derivatives, so every
    entry contributes to the check.
    """
    params = _perturbed_parameters(cfg, seed).astype(analytic_dtype)
    rng = np.random.default_rng(seed + 2)
    images = rng.standard_normal((batch, cfg.in_channels, cfg.image_height, cfg.image_width)).astype(analytic_dtype)
    labels = rng.integers(0, cfg.num_classes, batch)
    _, grads, _ = loss_and_grads(images, labels, params, cfg, smoothing)

    ext = params.astype(np.longdouble)
    images_ext = images.astype(np.longdouble)

    def loss():
        logits, _ = _forward(images_ext, ext, cfg)
        return softmax_cross_entropy(logits, labels, smoothing)[0]

    reports = []
    for name, value in ext.items():
        n = value.size
        if max_entries is None or n <= max_entries:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, max_entries, replace=False))
        numeric = numeric_gradient(loss, value, list(idx)).astype(np.float64)
        analytic = grads[name].reshape(-1)[idx].astype(np.float64)
        errs = [rel_error(analytic, numeric)]
        if n > len(idx):
            base = value.copy()
            h = np.longdouble(1e-6) * (np.abs(base).max() + 1)
            for _ in range(directions):
                v = rng.standard_normal(value.shape)
                v /= np.linalg.norm(v)
                value[...] = base + h * v
                fp = loss()
                value[...] = base - h * v
                fm = loss()
                value[...] = base
                num = np.float64((fp - fm) / (2 * h))
                errs.append(rel_error(np.array([np.sum(grads[name] * v, dtype=np.float64)]), np.array([num])))
        err = float(np.concatenate(errs).max())
        reports.append(GradCheckReport(name, err, len(idx) + (directions if n > len(idx) else 0), tolerance))
    return reports
