import numpy as np
import pytest

from stagedik.fixtures import hinge_chain, random_skeleton, two_hand_skeleton
from stagedik.skeleton import PoseState, site_positions


def fd_jacobian(skel, pose, columns, sites=None, h=1e-6):
    """Central differences of stacked site positions over parameter-vector columns."""
    x = pose.vector()
    cols = []
    for c in columns:
        xp, xm = x.copy(), x.copy()
        xp[c] += h
        xm[c] -= h
        fp = site_positions(skel, PoseState.from_vector(skel, xp), sites)
        fm = site_positions(skel, PoseState.from_vector(skel, xm), sites)
        cols.append((fp - fm).reshape(-1) / (2 * h))
    return np.stack(cols, axis=1)


def rel_err(J, F, floor=1e-3):
    return float(np.max(np.abs(J - F) / np.maximum(np.abs(F), floor)))


@pytest.fixture(scope="session")
def hand():
    return two_hand_skeleton()


@pytest.fixture
def chain3():
    return hinge_chain([1.0, 0.5, 0.25])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_random():
    return random_skeleton(np.random.default_rng(7), 5)


def pytest_configure(config):
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    item.config._criteria[mark.args[0]] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(crit):
        status, detail = crit[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
