"""Walk one image through the window layout and watch information move between windows.

Run:  python demos/01_windows_and_super_tokens.py
"""
import numpy as np

from stt import config as C
from stt import model as M

# LayerScale starts near zero, which makes every block almost the identity;
# at 1.0 the signal paths below are easy to see
cfg = C.preset("tiny", layerscale_init=1.0)
params = M.init_parameters(cfg, seed=0, dtype=np.float64)
rng = np.random.default_rng(0)
image = rng.standard_normal((1, 3, cfg.image_height, cfg.image_width))

# --- stem: a 32x32 image becomes a 4x4 grid of D-dim data tokens
tokens = M.conv_stem_tokenize(image, params, cfg)
print("stem output", tokens.shape, f"(N={cfg.num_tokens} tokens of D={cfg.embed_dim})")

# --- windows: 2x2 windows over the 4x4 grid, so Ns=4 windows of M^2=4 tokens each
wmap = M.partition_windows(cfg.grid_h, cfg.grid_w, cfg.window)
print("window map (token index per window slot):")
print(wmap)

# one Super token is prepended to every window
state = M.attach_super_and_positional(tokens, wmap, params["super_tokens"], params["pos_embed"])
print("window tensor", state.windows.shape, "= [batch, Ns, 1 + M^2, D]")

# --- locality: before g_start a window only sees itself
# perturb the data tokens of window 0, run the local layers, compare window 3
poked = state.windows.copy()
poked[:, 0, 1:] += 1.0 * rng.standard_normal(poked[:, 0, 1:].shape)
poked = M.TokenState(poked, wmap)


def run(st, layers):
    for layer in layers:
        st = M.encoder_block(st, layer, params, cfg)
    return st


local = range(1, cfg.g_start)
a, b = run(state, local), run(poked, local)
print(f"\nlayers {list(local)} are window-local (g_start={cfg.g_start}):")
for w in range(cfg.num_windows):
    print(f"  window {w}: max change {np.abs(a.windows[:, w] - b.windows[:, w]).max():.3e}")

# --- from g_start on, the mixer carries window 0's change to every Super token
a, b = run(a, [cfg.g_start]), run(b, [cfg.g_start])
print(f"\nafter layer {cfg.g_start} (mixer={cfg.mixer}):")
for w in range(cfg.num_windows):
    print(f"  Super token {w}: max change {np.abs(a.super_tokens[:, w] - b.super_tokens[:, w]).max():.3e}")

# --- the class block reads only the Super tokens
logits, trace = M.forward(image, params, cfg, trace=True)
print("\nlogits", np.round(logits, 4))
row = trace[f"class.{cfg.class_layers}"][0].mean(axis=0)[0]
print("CLS attention over [CLS, Super 0..3]:", np.round(row, 3), "sum", round(float(row.sum()), 6))
