import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from voplab.config import ModelSpec
from voplab.encoders import TextBatch, VideoBatch

settings.register_profile("voplab", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("voplab")


@pytest.fixture
def spec():
    return ModelSpec()


def make_batch(spec: ModelSpec, B: int = 4, seed: int = 0, frames: int | None = None):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, spec.vocab, size=(B, spec.N_max))
    eos = rng.integers(1, spec.N_max, size=B)
    F = spec.F if frames is None else frames
    video = rng.standard_normal((B, F, 3, spec.image_side, spec.image_side)).astype(np.float32)
    return TextBatch(ids, eos), VideoBatch(video)


@pytest.fixture
def batch(spec):
    return make_batch(spec)


# -- acceptance reporting: one line per criterion ---------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "passed": True, "tests": 0})
    if rep.when == "call":
        entry["tests"] += 1
    if rep.failed:
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {n} [{status}] {e['title']} ({e['tests']} tests)")
