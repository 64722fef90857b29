import os
import sys

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path_factory, monkeypatch):
    # keep flow/weight caches out of the user's home directory
    monkeypatch.setenv("CROSSGAN_CACHE", str(tmp_path_factory.getbasetemp() / "cache"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def textured(h, w, seed=0, period=None):
    """Smooth random texture with wrap-around continuity, uint8 HxWx3."""
    r = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.zeros((h, w))
    for _ in range(8):
        ky, kx = r.integers(1, 5, size=2)
        ph = r.uniform(0, 2 * np.pi)
        img += r.uniform(0.5, 1.0) * np.cos(2 * np.pi * (ky * yy / h + kx * xx / w) + ph)
    img = (img - img.min()) / (img.max() - img.min())
    img = (30 + 195 * img).astype(np.uint8)
    return np.repeat(img[..., None], 3, axis=2)


@pytest.fixture(scope="session")
def synthetic_run(tmp_path_factory):
    from pipeline import run_pipeline
    return run_pipeline(tmp_path_factory.mktemp("pipeline"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
