import math
import time

import numpy as np
import pytest

from collective_steer.sysmod import LinearEnsemble

ACCEPTANCE_MODULE = "test_acceptance.py"
ACCEPTANCE_COUNT = 10
SESSION_BUDGET = 300.0
_LOG_KEY = pytest.StashKey[dict]()
_START_KEY = pytest.StashKey[float]()

OMEGA = np.array([[0.0, -1.0], [1.0, 0.0]])
HALF_SQRT2 = math.sqrt(2.0) / 2.0
ROT45 = np.array([[HALF_SQRT2, -HALF_SQRT2], [HALF_SQRT2, HALF_SQRT2]])


def random_spd(rng, n, floor=0.1):
    M = rng.standard_normal((n, n))
    return M @ M.T + floor * np.eye(n)


def random_rotation(rng, n):
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def random_gl_plus(rng, n):
    M = rng.standard_normal((n, n))
    if np.linalg.det(M) < 0:
        M[0] = -M[0]
    return M


def rel_err(A, B):
    return float(np.linalg.norm(A - B, 2) / max(1.0, np.linalg.norm(B, 2)))


@pytest.fixture
def double_integrator():
    return LinearEnsemble(np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0]]))


@pytest.fixture
def free_particles():
    return LinearEnsemble(np.zeros((2, 2)), np.eye(2))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def simulate_schedule(schedule, rtol=1e-11, atol=1e-12):
    """Independent reference: adaptive DOP853 on each leg of ``Phi' = (A + B K_t) Phi``."""
    import scipy.integrate

    from collective_steer.planner import eval_gain

    n = schedule.n
    A, B = schedule.system.A, schedule.system.B
    Phi = np.eye(n)
    if not schedule.segments:
        legs = [(0.0, schedule.total_time)]
    else:
        legs = [(s, s + seg.duration) for s, seg in zip(schedule.starts, schedule.segments)]
    for k, (a, b) in enumerate(legs):
        if schedule.segments:
            seg = schedule.segments[k]

            def gain(t, seg=seg, a=a):
                return seg.feedback_gain(min(max(t - a, 0.0), seg.duration))
        else:

            def gain(t):
                return eval_gain(schedule, t)

        sol = scipy.integrate.solve_ivp(
            lambda t, y: ((A + B @ gain(t)) @ y.reshape(n, n)).ravel(),
            (a, b), Phi.ravel(), method="DOP853", rtol=rtol, atol=atol,
        )
        Phi = sol.y[:, -1].reshape(n, n)
    return Phi


# ---------------------------------------------------------------- acceptance gate

def pytest_sessionstart(session):
    session.config.stash[_START_KEY] = time.perf_counter()
    session.config.stash[_LOG_KEY] = {}


def pytest_collection_modifyitems(session, config, items):
    """Run the acceptance gate last so the runtime criterion covers the whole session."""
    items.sort(key=lambda item: item.path.name == ACCEPTANCE_MODULE)


def session_elapsed(config):
    return time.perf_counter() - config.stash[_START_KEY]


@pytest.fixture
def acceptance(request):
    """Record ``(criterion, ok, details)`` for the end-of-session pass/fail lines."""
    log = request.config.stash[_LOG_KEY]

    def record(criterion, ok, details):
        log.setdefault(criterion, []).append((bool(ok), details))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_LOG_KEY, {})
    if not log:
        return
    elapsed = session_elapsed(config)
    log.setdefault(ACCEPTANCE_COUNT, []).append(
        (elapsed < SESSION_BUDGET, f"whole session {elapsed:.1f} s < {SESSION_BUDGET:.0f} s"))
    terminalreporter.section("acceptance criteria")
    for k in range(1, ACCEPTANCE_COUNT + 1):
        parts = log.get(k)
        if not parts:
            terminalreporter.write_line(f"criterion {k}: FAIL (did not run to completion)")
            continue
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        details = "; ".join(text for _, text in parts)
        terminalreporter.write_line(f"criterion {k}: {verdict} ({details})")
