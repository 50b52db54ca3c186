"""Count attention cost analytically, then confirm the count by instrumenting a forward pass.

Run:  python demos/02_complexity.py
"""
from fractions import Fraction

import numpy as np

from stt import complexity as X
from stt import config as C
from stt import model as M
from stt import tensor as T

# --- one layer at ImageNet scale: 784 data tokens, 7x7 windows, D=384, 8 heads
h = 8
window = X.wmsa_cost(784, 7, 384, h)
full = X.msa_cost(784, 384, h)
print("score entries per layer")
print(f"  windowed (16 windows x 50 tokens): {window.score_entries:>12,}")
print(f"  global over 784 tokens           : {full.score_entries:>12,}")
print(f"  ratio {Fraction(window.score_entries, full.score_entries)} = {window.score_entries / full.score_entries:.4f}")

# --- windowed cost grows linearly with N, global cost quadratically
print("\n   N    windowed entries / N    global entries / N^2")
for n in (196, 784, 3136):
    w = X.wmsa_cost(n, 7, 384, h).score_entries
    g = X.msa_cost(n, 384, h).score_entries
    print(f"{n:>5}    {Fraction(w, n)!s:>20}    {Fraction(g, n * n)!s:>20}")

# --- the whole-model report, itemized by component
report = X.model_cost_report(C.preset("stt-s25"))
lines = report.to_table().splitlines()
print("\n" + "\n".join(lines[:6] + ["  ..."] + lines[-8:]))

# --- the op counter sees exactly the same numbers during a real forward pass
cfg = C.preset("tiny")
params = M.init_parameters(cfg, 0)
image = np.zeros((1, 3, 32, 32), np.float32)
with T.count_ops() as counter:
    M.forward(image, params, cfg)
tiny = X.model_cost_report(cfg).total
print(f"\ntiny model: counted {counter.total_macs:,} MACs, analytic {tiny.macs:,}")
print(f"            counted {counter.total_score_entries:,} score entries, analytic {tiny.score_entries:,}")
for prefix in ("stem", "encoder.1", "mixer.2", "class.1", "head"):
    macs, scores = counter.by_prefix(prefix)
    print(f"  {prefix:<10} {macs:>10,} MACs {scores:>8,} score entries")
