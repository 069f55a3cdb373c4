import numpy as np
import pytest
import torch

from encodermi import data as D
from encodermi.encoder import BlackBoxEncoder


class StubEncoder(BlackBoxEncoder):
    """Deterministic encoder defined by a plain function of the image batch."""

    def __init__(self, fn, dim, resolution=None, name="stub"):
        self.fn = fn
        self.dim = dim
        self.resolution = resolution
        self.name = name
        self.calls = 0

    def digest(self):
        return self.name

    def _query(self, batch):
        self.calls += 1
        return self.fn(batch)


def mean_color_encoder(dim=3):
    """Per-channel means, padded; differs across inputs, never zero for non-black images."""
    def fn(batch):
        feats = batch.mean(axis=(1, 2))
        return np.concatenate([feats, np.ones((len(batch), dim - 3))], axis=1)
    return StubEncoder(fn, dim, name=f"mean-color-{dim}")


def constant_encoder(vec=(1.0, 2.0, 3.0)):
    vec = np.asarray(vec, dtype=np.float32)
    return StubEncoder(lambda b: np.tile(vec, (len(b), 1)), len(vec), name="constant")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    return D.make_synthetic_dataset(240, seed=3)


@pytest.fixture(scope="session")
def tiny_splits(tiny_dataset):
    sizes = {"pretrain-member": 40, "eval-member": 20, "eval-nonmember": 20,
             "shadow-member": 40, "shadow-nonmember": 40,
             "downstream-train": 60, "downstream-test": 30}
    return {s.role: s for s in D.make_splits(tiny_dataset, sizes, seed=7)}


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance lines collected by test_acceptance.py, if it ran."""
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(results):
        ok, detail = results[criterion]
        terminalreporter.write_line(f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
