import numpy as np
import pytest
import torch

from hoiavatar.dualstream import DualStreamModel, ModelConfig
from hoiavatar.pim import StreamConfig
from hoiavatar.synthworld import WorldConfig, build_dataset

torch.set_num_threads(1)


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        pim=StreamConfig(dim=32, heads=2, layers=2, patch=8, mlp_mult=2),
        aim=StreamConfig(dim=32, heads=2, layers=2, patch=8, mlp_mult=2),
        cond_dim=16, audio_dim=8, audio_hidden=8,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def world():
    return build_dataset(WorldConfig(n_train=8, n_val=2, n_test=6), np.random.default_rng(7))


@pytest.fixture(scope="session")
def hoi_episode(world):
    return next(r for r in world if r.spec.task == "HOI")


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return DualStreamModel(tiny_config())


# -----------------------------------------------------------------------------
# Acceptance summary: one PASS/FAIL line per criterion
# -----------------------------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seen": False, "notes": []})
    entry["seen"] = True
    if rep.failed or rep.skipped:
        entry["ok"] = False
        entry["notes"].append(f"{item.name} {rep.outcome}")
    if rep.when == "call":
        entry["notes"].extend(f"{k}={v}" for k, v in item.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["seen"] else "FAIL"
        notes = "; ".join(e["notes"])
        terminalreporter.write_line(f"[{status}] {number:2d}. {e['title']}" + (f"  ({notes})" if notes else ""))
