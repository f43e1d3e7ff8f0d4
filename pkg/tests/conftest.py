import numpy as np
import pytest

from iqt.model import ModelConfig, TransformerConfig
from iqt.backbone import BackboneSpec
from iqt.pipeline import TrainConfig
from iqt.synthetic import distortion_ladder, write_dataset

# Lines appended by tests/test_acceptance.py, echoed in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` w.r.t. every element of float64 array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def tiny_config(dim=8, heads=2, layers=1, ff_dim=16, head_dim=8, channels=2, stages=6, patch=16, routing=None):
    kw = {} if routing is None else {"routing": routing}
    return ModelConfig(
        transformer=TransformerConfig(layers=layers, heads=heads, dim=dim, ff_dim=ff_dim, head_dim=head_dim),
        backbone=BackboneSpec(stages=stages, channels=channels),
        patch_size=patch,
        **kw,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def ladder_manifest(tmp_path_factory):
    return write_dataset(tmp_path_factory.mktemp("ladder"), distortion_ladder(size=16, levels=8, seed=0))


@pytest.fixture(scope="session")
def overfit_cfg():
    return TrainConfig(patch_size=16, batch_size=8, lr0=2e-4, total_steps=2000, seed=0, flip=False, rotate=False)

