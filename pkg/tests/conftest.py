import dataclasses

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rainbalance.config import RunBlock, SynthConfig
from rainbalance.data import normalize_and_window, synthesize

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# smallest architecture the end-to-end gradient check runs on
TINY = RunBlock(l=8, h=2, K=3, d=4, N=2, hidden_dim=4, input_dim=3)


@pytest.fixture
def tiny_run():
    return TINY


@pytest.fixture(scope="session")
def small_series():
    return synthesize(SynthConfig(length=900, seed=11))


@pytest.fixture(scope="session")
def small_splits(small_series):
    return normalize_and_window(small_series, 12, 2)


@pytest.fixture
def small_run():
    """A fast training configuration matching ``small_splits``."""
    return RunBlock(l=12, h=2, K=3, d=6, N=3, hidden_dim=5, epochs=2, batch_size=32, workers=1)


def rng(seed=0):
    return np.random.default_rng(seed)


def fd_grad(f, x, step=1e-6):
    """Central differences of scalar ``f`` at array ``x``; independent of the tape."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += step
        xm = x.copy()
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2 * step)
    return g


def replace(run, **kw):
    return dataclasses.replace(run, **kw)


# ---------------------------------------------------------------- acceptance summary

_criteria: dict[int, dict] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            entry = _criteria.setdefault(number, {"title": title, "tests": {}})
            entry["tests"][item.nodeid] = None


def pytest_runtest_logreport(report):
    for entry in _criteria.values():
        if report.nodeid in entry["tests"]:
            if report.failed or (report.when == "call" and entry["tests"][report.nodeid] is None):
                entry["tests"][report.nodeid] = (report.outcome, dict(report.user_properties))


def pytest_terminal_summary(terminalreporter):
    ran = {n: e for n, e in _criteria.items() if any(v is not None for v in e["tests"].values())}
    if not ran:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ran):
        entry = ran[number]
        results = [v for v in entry["tests"].values() if v is not None]
        ok = len(results) == len(entry["tests"]) and all(o == "passed" for o, _ in results)
        details = "; ".join(f"{k}={v}" for _, props in results for k, v in props.items())
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {entry['title']}"
        terminalreporter.write_line(line + (f"  [{details}]" if details else ""))
