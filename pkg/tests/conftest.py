import numpy as np
import pytest

from offtrack.synth import GeneratorConfig, generate_scene
from offtrack.types import Observation, Tracklet


def make_track(id, rows, cls="car"):
    """Tracklet from (t, x, y, theta[, vx, vy]) tuples with default box and score."""
    obs = []
    for r in rows:
        t, x, y, th = r[:4]
        vx, vy = (r[4], r[5]) if len(r) > 4 else (0.0, 0.0)
        obs.append(Observation(t, x, y, th, vx=vx, vy=vy))
    return Tracklet(id, cls, obs)


def straight_track(id, t0, t1, x0=0.0, y0=0.0, vx=10.0, vy=0.0, rate=2.0, cls="car"):
    ts = np.arange(round(t0 * rate), round(t1 * rate) + 1) / rate
    th = float(np.arctan2(vy, vx)) if (vx or vy) else 0.0
    return make_track(id, [(t, x0 + vx * (t - t0), y0 + vy * (t - t0), th, vx, vy) for t in ts], cls)


@pytest.fixture(scope="session")
def scene():
    return generate_scene(7)


@pytest.fixture(scope="session")
def curved_scene():
    return generate_scene(11, GeneratorConfig(template="curved"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ----------------------------------------------------
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed or rep.when == "call":
        _CRITERIA[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        line = f"{status} criterion {n:>2}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
