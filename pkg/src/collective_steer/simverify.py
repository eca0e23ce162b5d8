"""Independent simulation of gain schedules and plan verification.

The bilinear system ``Phi' = (A + B K_t) Phi`` (and any particle cloud
``X' = (A + B K_t) X``) is integrated with classical fixed-step RK4. Steps
never straddle a leg boundary, and gains are evaluated in closed form at every
stage node, so the result does not rely on the planner's trajectory formulas.
"""

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import IntegrationBlowUp, SteeringError
from .matfun import min_singular_value, symmetrize
from .segment import TAG_CONE, TAG_NORM, check_cone_condition, check_norm_condition

__all__ = [
    "DEFAULT_STEPS",
    "SteeringReport",
    "propagate_transition",
    "propagate_swarm",
    "verify",
    "lyapunov_residual",
    "write_transition_csv",
    "write_swarm_csv",
]

DEFAULT_STEPS = 2000
MIN_STEPS = 100
DEFAULT_TERMINAL_TOL = 1e-6
DEFAULT_LYAPUNOV_TOL = 1e-6


def _rk4_leg(state, t0, h, steps, closed_loop, t_offset):
    """Integrate over one leg; ``closed_loop(tau)`` gives ``A + B K`` for an array of local times."""
    nodes = h * np.arange(2 * steps + 1) / 2.0
    F = closed_loop(nodes)
    times = t0 + h * np.arange(steps + 1)
    out = np.empty((steps + 1,) + state.shape)
    out[0] = state
    X = state
    for j in range(steps):
        F0, Fm, F1 = F[2 * j], F[2 * j + 1], F[2 * j + 2]
        k1 = F0 @ X
        k2 = Fm @ (X + 0.5 * h * k1)
        k3 = Fm @ (X + 0.5 * h * k2)
        k4 = F1 @ (X + h * k3)
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(X)):
            raise IntegrationBlowUp(t_offset + times[j + 1] - t0)
        out[j + 1] = X
    return times, out


def _legs(schedule):
    """``(start, duration, closed_loop)`` for every leg, or the hold when empty."""
    A, B = schedule.system.A, schedule.system.B
    if not schedule.segments:
        A_c = schedule.hold.A_c
        if schedule.total_time <= 0.0:
            return []
        return [(0.0, schedule.total_time,
                 lambda tau: np.broadcast_to(A_c, tau.shape + A_c.shape))]
    return [(start, seg.duration, lambda tau, seg=seg: A + B @ seg.feedback_gain(tau))
            for start, seg in zip(schedule.starts, schedule.segments)]


def _propagate(schedule, X0, steps_per_segment):
    if steps_per_segment < MIN_STEPS:
        raise ValueError(f"steps_per_segment must be at least {MIN_STEPS}")
    times, states = [np.array([0.0])], [X0[None]]
    X = X0
    for start, duration, closed_loop in _legs(schedule):
        h = duration / steps_per_segment
        t, S = _rk4_leg(X, start, h, steps_per_segment, closed_loop, start)
        # the leg's first sample repeats the previous leg's last one
        times.append(t[1:])
        states.append(S[1:])
        X = S[-1]
    return np.concatenate(times), np.concatenate(states)


def propagate_transition(schedule, steps_per_segment=DEFAULT_STEPS):
    """Sampled transition matrix ``Phi_t`` starting from ``I``.

    Returns
    -------
    times : (T,) ndarray
        Includes both endpoints of every leg.
    Phi : (T, n, n) ndarray

    Raises
    ------
    IntegrationBlowUp
        If the state becomes non-finite.
    TrajectoryLeavesGLPlus
        If a gain is requested where the leg's trajectory is singular.
    """
    return _propagate(schedule, np.eye(schedule.n), steps_per_segment)


def propagate_swarm(schedule, X_in, steps_per_segment=DEFAULT_STEPS):
    """Sampled particle states ``X_t`` (n x N, one particle per column) from ``X_in``."""
    X_in = np.asarray(X_in, dtype=float)
    if X_in.ndim != 2 or X_in.shape[0] != schedule.n or X_in.shape[1] < 1:
        raise ValueError(f"X_in must be {schedule.n} x N with N >= 1, got {X_in.shape}")
    if not np.all(np.isfinite(X_in)):
        raise ValueError("X_in has non-finite entries")
    return _propagate(schedule, X_in, steps_per_segment)


def _analytic_samples(schedule, per_leg):
    """Closed-form concatenated trajectory on a uniform grid of every leg."""
    out = []
    for start, seg, prefix in zip(schedule.starts, schedule.segments, schedule.prefixes()):
        tau = np.linspace(0.0, seg.duration, per_leg + 1)
        out.append(seg.optimal_trajectory(tau) @ prefix)
    return np.concatenate(out) if out else np.empty((0, schedule.n, schedule.n))


def lyapunov_residual(schedule, samples_per_leg=64):
    """Largest relative residual of the covariance transport equation.

    With ``Sigma_t = Phi_t Sigma_in Phi_t^T`` and ``Phi_t' = A_c Phi_t + B U_t``
    taken from the open-loop optimum, measures
    ``||Sigma' - F Sigma - Sigma F^T|| / ||Sigma||`` for ``F = A + B K_t``.
    """
    Sigma_in = schedule.covariance["Sigma_in"]
    A, B = schedule.system.A, schedule.system.B
    worst = 0.0
    for seg, prefix in zip(schedule.segments, schedule.prefixes()):
        tau = np.linspace(0.0, seg.duration, samples_per_leg + 1)
        Phi, dPhi, _ = seg.state(tau)
        Phi, dPhi = Phi @ prefix, dPhi @ prefix
        F = A + B @ seg.feedback_gain(tau)
        Sigma = Phi @ Sigma_in @ np.swapaxes(Phi, -1, -2)
        dSigma = dPhi @ Sigma_in @ np.swapaxes(Phi, -1, -2)
        dSigma = dSigma + np.swapaxes(dSigma, -1, -2)
        res = dSigma - F @ Sigma - Sigma @ np.swapaxes(F, -1, -2)
        scale = np.linalg.norm(Sigma, 2, axis=(-2, -1))
        worst = max(worst, float(np.max(np.linalg.norm(res, 2, axis=(-2, -1)) / scale)))
    return worst


@dataclass
class SteeringReport:
    """Outcome of simulating a schedule; failures are recorded, never raised."""

    passed: bool
    terminal_error: float
    min_inv_margin: float
    det_sign_ok: bool
    closed_form_error: float
    per_segment: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)
    failure: str = None
    covariance: dict = None

    def to_dict(self):
        """Plain data; non-finite numbers (from aborted simulations) become ``None``."""
        return _finite_or_none(asdict(self))


def _finite_or_none(obj):
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite_or_none(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _segment_diagnostics(schedule, times, Phi):
    out = []
    ends = schedule.segment_ends()
    for k, (start, seg) in enumerate(zip(schedule.starts, schedule.segments)):
        W = seg.W_end
        if seg.condition_tag == TAG_CONE:
            cond_ok = bool(check_cone_condition(seg.target, W))
        elif seg.condition_tag == TAG_NORM:
            cond_ok = bool(check_norm_condition(seg.target, W))
        else:
            cond_ok = False
        entry = {"index": k, "start": start, "duration": seg.duration,
                 "condition_tag": seg.condition_tag, "condition_ok": cond_ok,
                 "target_det": float(np.linalg.det(seg.target))}
        if Phi is not None:
            mask = (times >= start - 1e-12) & (times <= ends[k] + 1e-12)
            entry["min_inv_margin"] = float(np.min(min_singular_value(Phi[mask])))
        out.append(entry)
    return out


def verify(schedule, terminal_tol=DEFAULT_TERMINAL_TOL, steps_per_segment=DEFAULT_STEPS,
           grid_points=512, lyapunov_tol=DEFAULT_LYAPUNOV_TOL):
    """Simulate ``schedule`` and judge it.

    A plan passes when the simulation completes, the relative Frobenius
    terminal error is at most ``terminal_tol``, the sampled transition matrix
    keeps a positive determinant and positive smallest singular value, every
    leg still passes the reachability test named by its tag, and (for
    covariance plans) the covariance lands within ``lyapunov_tol`` and obeys
    its transport equation.
    """
    settings = {"integrator": "rk4", "steps_per_segment": int(steps_per_segment),
                "terminal_tol": float(terminal_tol), "grid_points": int(grid_points),
                "lyapunov_tol": float(lyapunov_tol)}
    target = np.asarray(schedule.target, dtype=float)
    analytic = _analytic_samples(schedule, grid_points)
    analytic_det_ok = bool(np.all(np.linalg.det(analytic) > 0.0)) if len(analytic) else True
    failure = None
    times = Phi = None
    try:
        times, Phi = propagate_transition(schedule, steps_per_segment)
    except (SteeringError, ValueError, np.linalg.LinAlgError) as exc:
        failure = f"{type(exc).__name__}: {exc}"
    per_segment = _segment_diagnostics(schedule, times, Phi)
    if Phi is None:
        return SteeringReport(False, float("inf"), 0.0, False, float("inf"),
                              per_segment, settings, failure)

    final = Phi[-1]
    terminal_error = float(np.linalg.norm(final - target) / np.linalg.norm(target))
    margins = min_singular_value(Phi)
    min_margin = float(np.min(margins))
    det_sign_ok = bool(np.all(np.linalg.det(Phi) > 0.0)) and analytic_det_ok
    closed = np.array([schedule.trajectory(t) for t in _checkpoints(schedule)])
    simulated = Phi[_checkpoint_indices(schedule, times)]
    closed_form_error = float(np.max(
        np.linalg.norm(simulated - closed, axis=(-2, -1))
        / np.maximum(1.0, np.linalg.norm(closed, axis=(-2, -1)))))
    passed = (terminal_error <= terminal_tol and min_margin > 0.0 and det_sign_ok
              and all(s["condition_ok"] for s in per_segment))

    cov_report = None
    if schedule.covariance is not None:
        Sigma_in = schedule.covariance["Sigma_in"]
        Sigma_fn = schedule.covariance["Sigma_fn"]
        Sigma = Phi @ Sigma_in @ np.swapaxes(Phi, -1, -2)
        sigma_error = float(np.linalg.norm(Sigma[-1] - Sigma_fn) / np.linalg.norm(Sigma_fn))
        sigma_min_eig = float(np.min(np.linalg.eigvalsh(symmetrize(Sigma))[:, 0]))
        try:
            residual = lyapunov_residual(schedule)
        except SteeringError as exc:
            residual, failure = float("inf"), f"{type(exc).__name__}: {exc}"
        cov_report = {"terminal_error": sigma_error, "min_eigenvalue": sigma_min_eig,
                      "lyapunov_residual": residual}
        passed = (passed and sigma_error <= lyapunov_tol and sigma_min_eig > 0.0
                  and residual <= lyapunov_tol)
    return SteeringReport(bool(passed), terminal_error, min_margin, det_sign_ok,
                          closed_form_error, per_segment, settings, failure, cov_report)


def _checkpoints(schedule):
    ends = schedule.segment_ends()
    return [0.0] + ends if ends else [0.0, schedule.total_time]


def _checkpoint_indices(schedule, times):
    return [int(np.argmin(np.abs(times - t))) for t in _checkpoints(schedule)]


def write_transition_csv(path, times, Phi):
    """CSV with header ``t, entry_1_1, ..., entry_n_n`` (row-major entries)."""
    n = Phi.shape[-1]
    header = ["t"] + [f"entry_{i + 1}_{j + 1}" for i in range(n) for j in range(n)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t, P in zip(times, Phi):
            writer.writerow([format(t, ".17g")] + [format(v, ".17g") for v in P.ravel()])


def write_swarm_csv(path, times, X):
    """CSV with header ``t, particle_id, x_1, ..., x_n``; one row per particle and sample."""
    n, N = X.shape[-2], X.shape[-1]
    header = ["t", "particle_id"] + [f"x_{i + 1}" for i in range(n)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t, S in zip(times, X):
            for p in range(N):
                writer.writerow([format(t, ".17g"), p] + [format(v, ".17g") for v in S[:, p]])
