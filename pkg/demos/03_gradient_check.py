"""Check every hand-written backward pass against central differences, then break one on purpose.

Run:  python demos/03_gradient_check.py
"""
import numpy as np

from stt import config as C
from stt import gradcheck as G
from stt import tensor as T

# --- a single op by hand: GELU at a few points
x = np.array([-2.0, -0.5, 0.0, 0.7, 3.0])
analytic = T.gelu_backward(np.ones_like(x), x)
numeric = T.numeric_gradient(lambda: float(T.gelu(x).sum()), x)
print("GELU'(x) analytic", np.round(analytic, 8))
print("GELU'(x) numeric ", np.round(numeric, 8))
print("max relative error", T.rel_error(analytic, numeric).max())

# --- the whole suite: each op on ten random inputs, long-double reference
print("\nop suite, tolerance 1e-6")
for report in G.op_suite():
    print(" ", report)

# --- a sign-flipped backward must be caught
print("\nnegative control: softmax backward negated")
for report in G.op_suite(fault="softmax_lastdim"):
    if report.op == "softmax_lastdim":
        print(" ", report)

# --- the full tiny model, sampled entries of every parameter tensor
print("\ntiny model, tolerance 1e-5 (about a minute)")
reports = G.model_check(C.preset("tiny"))
worst = max(reports, key=lambda r: r.max_rel_error)
print(f"  {sum(r.passed for r in reports)}/{len(reports)} tensors pass; worst {worst.op} {worst.max_rel_error:.2e}")
