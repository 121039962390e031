import numpy as np
import pytest

from dkdm.diffusion import build_schedule
from dkdm.models import DenoiserSpec, init_model


@pytest.fixture
def sched10():
    return build_schedule("linear", 10)


@pytest.fixture
def sched100():
    return build_schedule("linear", 100)


def small_model(arch="mlp", T=10, seed=0, dtype=np.float32, hidden=None, shape=None, randomize_heads=False):
    """Tiny denoiser; ``randomize_heads`` makes the zero-initialized output layers non-trivial."""
    if shape is None:
        shape = (2,) if arch == "mlp" else (1, 4, 4)
    hidden = hidden or ((16, 16) if arch == "mlp" else (3, 3))
    spec = DenoiserSpec(arch, shape, hidden, 8, T)
    m = init_model(spec, seed, dtype)
    if randomize_heads:
        gen = np.random.default_rng(seed + 100)
        for k, p in m.params.items():
            if k.startswith(("eps.", "var.")) or k.endswith(".b"):
                p.data[...] = (0.3 * gen.standard_normal(p.data.shape)).astype(dtype)
    return m


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
