import numpy as np
import pytest

from stt import config as C
from stt import model as M


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return C.preset("tiny")


@pytest.fixture(scope="session")
def tiny_params(tiny_cfg):
    return M.init_parameters(tiny_cfg, seed=0, dtype=np.float64)


# three small reference configs used by the structural-invariant checks
REFERENCE_CONFIGS = {
    "tiny-stm": C.preset("tiny"),
    "grid6-m3-msa": C.ModelConfig(image_height=48, image_width=48, patch_size=8, window=3, embed_dim=24, heads=3,
                                  depth=4, g_start=2, num_classes=4, mixer="MSA", stem_channels=(4, 8, 8)),
    "rect-stm-alt": C.ModelConfig(image_height=32, image_width=64, patch_size=8, window=2, embed_dim=16, heads=4,
                                  depth=4, g_start=2, num_classes=5, stm_alternate=True, stem_channels=(4, 4, 8)),
}


@pytest.fixture(params=sorted(REFERENCE_CONFIGS))
def ref_cfg(request):
    return REFERENCE_CONFIGS[request.param]


def perturbed(cfg, seed=0, dtype=np.float64):
    """Parameters with LayerScale and biases moved off their init so every path matters."""
    store = M.init_parameters(cfg, seed, dtype)
    r = np.random.default_rng(seed + 7)
    for name, v in store.items():
        if name.endswith((".ls1", ".ls2")):
            store[name] = r.uniform(0.5, 1.0, v.shape).astype(dtype)
        elif v.ndim > 1 and not name.startswith("stem"):
            store[name] = (r.standard_normal(v.shape) / np.sqrt(v.shape[0])).astype(dtype)
    return store


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
