"""Forward time of the windowed model against a same-size global-attention baseline as N grows.

Run:  python demos/05_throughput.py

Two layers at D=384 keep this to a minute or two; the ratio is set per
layer, so depth mostly rescales both columns. The 25-layer measurement is
``stt bench --config stt-s25 --repeats 20``.
"""
import time

import numpy as np
from threadpoolctl import threadpool_limits

from stt import complexity as X
from stt import config as C
from stt import model as M


def median_time(fn, repeats=5):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


print("  image     N   STT ms  baseline ms   time ratio   MAC ratio")
with threadpool_limits(1):
    for side in (112, 168, 224):
        cfg = C.preset("stt-s25", image_height=side, image_width=side, depth=2, g_start=1)
        x = np.random.default_rng(0).standard_normal((1, 3, side, side)).astype(np.float32)
        stt = M.init_parameters(cfg, 0)
        base = M.init_baseline_parameters(cfg, 0)
        ts = median_time(lambda: M.forward(x, stt, cfg))
        tb = median_time(lambda: M.baseline_forward(x, base, cfg))
        macs = X.model_cost_report(cfg).mac_ratio
        print(f"{side:>4}x{side:<4}{cfg.num_tokens:>5}{ts * 1e3:>9.0f}{tb * 1e3:>13.0f}{tb / ts:>13.2f}{macs:>12.2f}")

# the baseline's attention term grows as N^2 while everything else grows as N,
# so the advantage widens with resolution
