import numpy as np
import pytest
import torch

from mofcodec.config import ModelConfig
from mofcodec.system import build_model

torch.set_num_threads(1)


def tiny_config(mode="full", lam=0.04):
    return ModelConfig(internal_features=8, latent_features=8, mode=mode, lam=lam)


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_frames(gen, batch=1, height=32, width=32, dtype=torch.float32):
    ref = torch.rand(batch, 3, height, width, generator=gen, dtype=dtype)
    cur = torch.rand(batch, 3, height, width, generator=gen, dtype=dtype)
    return ref, cur


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion number and summary")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", (mark.args[0], mark.args[1])))


def pytest_terminal_summary(terminalreporter):
    results = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call" and key == "passed":
                continue
            crit = dict(getattr(rep, "user_properties", [])).get("criterion")
            if crit is None:
                continue
            ok = key == "passed" and results.get(crit, True)
            results[crit] = ok
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for (n, text), ok in sorted(results.items()):
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {text}")
