"""Gain-schedule synthesis and plan files.

A task asks for a transition matrix ``target`` in GL+(n) (directly, as
``Phi_fn Phi_in^{-1}``, or from particle arrangements as ``X_fn X_in^{-1}``).
Planners factor the target into pieces that a single leg can reach, run one
leg per piece with one shared periodized system and concatenate: on the k-th
leg the transition matrix is ``Phi^k(t - start_k) @ (target_{k-1} ... target_1)``.
By right invariance the gain on that leg depends only on ``Phi^k``.

Only the zero-mean part of the steering problem is handled; a reference
trajectory for the ensemble mean can be superimposed independently.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConditionNotMet, DomainError, NotInGLPlusError
from .factorizer import (
    STRATEGIES,
    near_identity_factorize,
    ordered_product,
    spd_cone_factorize,
)
from .matfun import as_spd, as_square, expm, operator_norm, spd_power
from .segment import (
    TAG_CONE,
    TAG_NONE,
    TAG_NORM,
    SteeringSegment,
    cone_condition_values,
    norm_condition_value,
)
from .sysmod import (
    GramianEvaluator,
    LinearEnsemble,
    PeriodizedSystem,
    default_rng,
    kalman_rank_ok,
    periodize,
    periodized_with_gain,
)

__all__ = [
    "MODES",
    "SCHEMA_VERSION",
    "SteeringTask",
    "CovarianceTask",
    "GainSchedule",
    "plan_strong",
    "plan_free_time",
    "plan_single_segment",
    "plan_covariance",
    "plan",
    "eval_gain",
    "schedule_to_dict",
    "schedule_from_dict",
    "dumps_deterministic",
]

SCHEMA_VERSION = 1
MODES = ("strong", "free_time", "single_segment", "covariance")
PRODUCT_TOL = 1e-8
DEFAULT_FREE_TIME_PERIOD = 1.0
# Near-identity factors are sized for a slightly smaller epsilon so the strict
# norm test keeps a margin above its own slack.
EPS_SHRINK = 1e-6
_MAX_K_ROUNDS = 20


def _gl_plus(M, what):
    M = as_square(M, what)
    det = np.linalg.det(M)
    if not det > 0.0:
        raise NotInGLPlusError(det, what)
    return M


def _relative_error(A, B):
    return float(operator_norm(A - B) / max(1.0, float(operator_norm(B))))


@dataclass(frozen=True)
class SteeringTask:
    """Request to steer the transition matrix from ``I`` to ``target``.

    Parameters
    ----------
    system : LinearEnsemble
    target : (n, n) array
        Effective target with positive determinant.
    t_fn : float, optional
        Total time; required by ``strong`` and ``single_segment``.
    t_s : float, optional
        Leg period for ``free_time`` (default 1).
    K_c : (m, n) array, optional
        Periodizing gain to use verbatim instead of synthesizing one.
    factorization : {"conjugate", "sandwich"}
        SPD-cone layout used by ``strong``.
    """

    system: LinearEnsemble
    target: np.ndarray
    mode: str = "strong"
    t_fn: float = None
    t_s: float = None
    K_c: np.ndarray = None
    factorization: str = "conjugate"

    def __post_init__(self):
        if self.mode not in MODES or self.mode == "covariance":
            raise DomainError(f"unknown steering mode {self.mode!r}")
        if self.factorization not in STRATEGIES:
            raise DomainError(f"unknown factorization {self.factorization!r}")
        target = _gl_plus(self.target, "target")
        if target.shape[0] != self.system.n:
            raise DomainError(f"target must be {self.system.n}x{self.system.n}")
        target = target.copy()
        target.setflags(write=False)
        object.__setattr__(self, "target", target)
        for name in ("t_fn", "t_s"):
            value = getattr(self, name)
            if value is not None:
                value = float(value)
                if not value > 0.0:
                    raise DomainError(f"{name} must be positive, got {value}")
                object.__setattr__(self, name, value)

    @classmethod
    def from_transitions(cls, system, Phi_in, Phi_fn, **kwargs):
        """Target ``Phi_fn Phi_in^{-1}``."""
        Phi_in = _gl_plus(Phi_in, "Phi_in")
        Phi_fn = as_square(Phi_fn, "Phi_fn")
        return cls(system, np.linalg.solve(Phi_in.T, Phi_fn.T).T, **kwargs)

    @classmethod
    def from_arrangements(cls, system, X_in, X_fn, **kwargs):
        """Target ``X_fn X_in^{-1}`` for ``n`` particles stacked as columns.

        Requires ``X_in`` invertible and ``det(X_fn) det(X_in) > 0``.
        """
        X_in = as_square(X_in, "X_in")
        X_fn = as_square(X_fn, "X_fn")
        d_in, d_fn = np.linalg.det(X_in), np.linalg.det(X_fn)
        if d_in == 0.0:
            raise DomainError("X_in is singular")
        if not d_in * d_fn > 0.0:
            raise NotInGLPlusError(d_in * d_fn, "X_fn X_in^{-1}")
        return cls(system, np.linalg.solve(X_in.T, X_fn.T).T, **kwargs)


@dataclass(frozen=True)
class CovarianceTask:
    """Steer the ensemble covariance from ``Sigma_in`` to ``Sigma_fn`` in ``t_fn``."""

    system: LinearEnsemble
    Sigma_in: np.ndarray
    Sigma_fn: np.ndarray
    t_fn: float
    K_c: np.ndarray = None

    def __post_init__(self):
        n = self.system.n
        for name in ("Sigma_in", "Sigma_fn"):
            S = as_spd(getattr(self, name), name)
            if S.shape != (n, n):
                raise DomainError(f"{name} must be {n}x{n}")
            S.setflags(write=False)
            object.__setattr__(self, name, S)
        t_fn = float(self.t_fn)
        if not t_fn > 0.0:
            raise DomainError(f"t_fn must be positive, got {t_fn}")
        object.__setattr__(self, "t_fn", t_fn)


@dataclass(frozen=True)
class GainSchedule:
    """Consecutive legs tiling ``[0, total_time]``.

    ``hold`` is the periodized system whose constant gain applies when there
    are no legs. Leg intervals are closed on the left; the final instant
    belongs to the last leg.
    """

    system: LinearEnsemble
    segments: tuple
    starts: tuple
    total_time: float
    target: np.ndarray
    hold: PeriodizedSystem
    mode: str
    provenance: dict = field(default_factory=dict)
    covariance: dict = None

    def __post_init__(self):
        if len(self.starts) != len(self.segments):
            raise DomainError("one start time per segment is required")
        t = 0.0
        for start, seg in zip(self.starts, self.segments):
            if not math.isclose(start, t, rel_tol=1e-12, abs_tol=1e-15):
                raise DomainError("segments must tile the horizon without gaps")
            t = start + seg.duration
        if self.segments and not math.isclose(t, self.total_time, rel_tol=1e-12):
            raise DomainError("segments do not end at total_time")

    @property
    def n(self):
        return self.system.n

    def segment_ends(self):
        return [s + seg.duration for s, seg in zip(self.starts, self.segments)]

    def prefixes(self):
        """Products of all earlier leg targets, one per leg."""
        out, acc = [], np.eye(self.n)
        for seg in self.segments:
            out.append(acc)
            acc = seg.target @ acc
        return out

    def final_product(self):
        return ordered_product([seg.target for seg in self.segments], self.n)

    def locate(self, t):
        """Index of the leg active at ``t`` (left-closed intervals)."""
        t = float(t)
        if not -1e-12 * max(1.0, self.total_time) <= t <= self.total_time * (1 + 1e-12) + 1e-15:
            raise DomainError(f"t = {t} outside [0, {self.total_time}]")
        if not self.segments:
            return None
        k = int(np.searchsorted(np.asarray(self.starts), t, side="right")) - 1
        return max(0, min(k, len(self.segments) - 1))

    def trajectory(self, t):
        """Exact concatenated transition matrix at time ``t``."""
        k = self.locate(t)
        if k is None:
            return expm(self.hold.A_c * max(float(t), 0.0))
        seg = self.segments[k]
        tau = min(max(float(t) - self.starts[k], 0.0), seg.duration)
        return seg.optimal_trajectory(tau) @ self.prefixes()[k]


def eval_gain(schedule, t):
    """Feedback gain ``K_t`` (m x n) of the schedule at absolute time ``t``."""
    k = schedule.locate(t)
    if k is None:
        return np.array(schedule.hold.K_c)
    seg = schedule.segments[k]
    tau = min(max(float(t) - schedule.starts[k], 0.0), seg.duration)
    return seg.feedback_gain(tau)


def _periodized(system, t_s, K_c=None, rng=None):
    if not kalman_rank_ok(system):
        raise DomainError("pair (A, B) fails the Kalman rank condition")
    if K_c is not None:
        return periodized_with_gain(system, K_c, t_s)
    return periodize(system, t_s, rng=rng if rng is not None else default_rng())


def _assemble(system, hold, segments, total_time, target, mode, provenance, covariance=None):
    starts, t = [], 0.0
    for seg in segments:
        starts.append(t)
        t += seg.duration
    sched = GainSchedule(system, tuple(segments), tuple(starts), float(total_time),
                         np.array(target), hold, mode, provenance, covariance)
    for seg in segments:
        if seg.condition_tag == TAG_NONE:
            raise DomainError("planner produced an unconditioned segment")
    err = _relative_error(sched.final_product(), np.asarray(target))
    if err > PRODUCT_TOL:
        raise DomainError(f"segment targets do not reproduce the task target (error {err:.3e})")
    return sched


def _cone_factorization(task, t_s, rng):
    system = _periodized(task.system, t_s, task.K_c, rng)
    gram = GramianEvaluator(system)
    fact = spd_cone_factorize(task.target, gram.W_end, strategy=task.factorization)
    return system, gram, fact


def plan_strong(task, rng=None):
    """Reach ``task.target`` in exactly ``task.t_fn`` with SPD-cone legs.

    The leg count K and the Grammian it is factored against depend on each
    other through ``t_s = t_fn / K``. Starting from ``t_fn / 5``, K is updated
    until the factorization at ``t_fn / K`` needs no more than K legs; any
    unused legs are filled with identity targets, whose minimum-energy leg is
    the free periodic motion.
    """
    if task.t_fn is None:
        raise DomainError("strong mode needs t_fn")
    t_fn = task.t_fn
    K = 5
    for _ in range(_MAX_K_ROUNDS):
        system, gram, fact = _cone_factorization(task, t_fn / K, rng)
        if fact.K <= K:
            break
        K = fact.K
    else:
        raise DomainError("factor count did not settle")
    n = task.system.n
    if fact.K == 0:
        hold = _periodized(task.system, t_fn, task.K_c, rng)
        return _assemble(task.system, hold, [], t_fn, task.target, "strong",
                         {"factorization": task.factorization, "K": 0, "padding": 0})
    segments = [SteeringSegment.build(gram, F, condition=TAG_CONE) for F in fact.factors]
    padding = K - fact.K
    segments += [SteeringSegment.build(gram, np.eye(n), condition=TAG_CONE)] * padding
    provenance = {"factorization": task.factorization, "K": fact.K, "padding": padding,
                  "spd_cores": [C.tolist() for C in fact.spd_cores]}
    return _assemble(task.system, system, segments, t_fn, task.target, "strong", provenance)


def plan_free_time(task, t_s=None, rng=None):
    """Near-identity legs of one period each; total time ``N * t_s``.

    Each factor is within ``eps = sqrt(lambda_min(W) / lambda_max(W))`` of the
    identity (``W`` the period Grammian), which makes it pass the norm test.
    """
    t_s = float(t_s if t_s is not None else (task.t_s or DEFAULT_FREE_TIME_PERIOD))
    system = _periodized(task.system, t_s, task.K_c, rng)
    gram = GramianEvaluator(system)
    lam = np.linalg.eigvalsh(gram.W_end)
    eps = math.sqrt(lam[0] / lam[-1]) * (1.0 - EPS_SHRINK)
    fact = near_identity_factorize(task.target, eps)
    segments = [SteeringSegment.build(gram, F, condition=TAG_NORM) for F in fact.factors]
    provenance = {"factorization": "near_identity", "epsilon": eps,
                  "N": fact.N, "N1": fact.N1, "N2": fact.N2}
    return _assemble(task.system, system, segments, fact.N * t_s, task.target,
                     "free_time", provenance)


def single_segment(system, target, t_fn, K_c=None, rng=None, condition="auto"):
    """One leg to ``target`` over ``t_fn`` (``condition`` as in ``SteeringSegment.build``)."""
    periodized = _periodized(system, t_fn, K_c, rng)
    return SteeringSegment.build(GramianEvaluator(periodized), target, condition=condition)


def plan_single_segment(task, rng=None):
    """One minimum-energy leg over ``t_fn``.

    Raises
    ------
    ConditionNotMet
        When the target passes neither the norm nor the cone test. Long-range
        targets need a multi-leg mode; no fallback is attempted.
    """
    if task.t_fn is None:
        raise DomainError("single_segment mode needs t_fn")
    seg = single_segment(task.system, task.target, task.t_fn, task.K_c, rng)
    if seg.condition_tag == TAG_NONE:
        W = seg.W_end
        defect, _, min_eig = cone_condition_values(task.target, W)
        raise ConditionNotMet(norm_condition_value(task.target, W), defect, min_eig)
    return _assemble(task.system, seg.system, [seg], task.t_fn, task.target,
                     "single_segment", {"factorization": "single",
                                        "condition": seg.condition_tag})


def covariance_transition(Sigma_in, Sigma_fn, W):
    """Transition matrix passing the cone test that maps ``Sigma_in`` to ``Sigma_fn``.

    With ``Si = W^{-1/2} Sigma_in W^{-1/2}`` and ``Sf`` likewise, the SPD
    ``T = Si^{-1/2} (Si^{1/2} Sf Si^{1/2})^{1/2} Si^{-1/2}`` solves ``T Si T = Sf``,
    and ``W^{1/2} T W^{-1/2}`` carries ``Sigma_in`` to ``Sigma_fn``.
    """
    W_half, W_ihalf = spd_power(W, 0.5), spd_power(W, -0.5)
    Si = W_ihalf @ Sigma_in @ W_ihalf
    Sf = W_ihalf @ Sigma_fn @ W_ihalf
    Si_half, Si_ihalf = spd_power(Si, 0.5), spd_power(Si, -0.5)
    T = Si_ihalf @ spd_power(Si_half @ Sf @ Si_half, 0.5) @ Si_ihalf
    return W_half @ T @ W_ihalf


def plan_covariance(task, rng=None):
    """Single cone-test leg carrying ``Sigma_in`` to ``Sigma_fn`` in ``t_fn``.

    Under the schedule the covariance evolves as ``Phi_t Sigma_in Phi_t^T``.
    """
    system = _periodized(task.system, task.t_fn, task.K_c, rng)
    gram = GramianEvaluator(system)
    target = covariance_transition(task.Sigma_in, task.Sigma_fn, gram.W_end)
    cov = {"Sigma_in": task.Sigma_in, "Sigma_fn": task.Sigma_fn}
    n = task.system.n
    if operator_norm(target - np.eye(n)) <= 1e-13:
        return _assemble(task.system, system, [], task.t_fn, np.eye(n), "covariance",
                         {"factorization": "covariance"}, cov)
    seg = SteeringSegment.build(gram, target, condition=TAG_CONE)
    return _assemble(task.system, system, [seg], task.t_fn, target, "covariance",
                     {"factorization": "covariance"}, cov)


def plan(task, rng=None):
    """Dispatch on the task mode."""
    if isinstance(task, CovarianceTask):
        return plan_covariance(task, rng)
    return {"strong": plan_strong, "free_time": plan_free_time,
            "single_segment": plan_single_segment}[task.mode](task, rng=rng)


# ---------------------------------------------------------------- plan files

def _to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _emit(obj, indent):
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(k)}: {_emit(obj[k], indent + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list)) for v in obj):
            return "[" + ", ".join(_emit(v, indent + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(inner + _emit(v, indent + 1) for v in obj) + "\n" + pad + "]"
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise DomainError("non-finite value cannot be serialized")
        # adding 0.0 turns -0.0 into 0.0 so zeros print one way
        return format(obj + 0.0, ".17g")
    return json.dumps(obj)


def dumps_deterministic(obj):
    """JSON text with sorted keys and every float written with 17 significant digits."""
    return _emit(_to_jsonable(obj), 0) + "\n"


def schedule_to_dict(schedule):
    """Plain-data plan description (see :func:`schedule_from_dict`)."""
    out = {
        "schema_version": SCHEMA_VERSION,
        "kind": "gain_schedule",
        "mode": schedule.mode,
        "system": schedule.system.to_dict(),
        "total_time": schedule.total_time,
        "target": schedule.target,
        "hold": {"K_c": schedule.hold.K_c, "t_s": schedule.hold.t_s},
        "segments": [
            {"start": start, "duration": seg.duration, "K_c": seg.K_c,
             "t_s": seg.system.t_s, "target": seg.target,
             "condition_tag": seg.condition_tag}
            for start, seg in zip(schedule.starts, schedule.segments)
        ],
        "provenance": schedule.provenance,
    }
    if schedule.covariance is not None:
        out["covariance"] = schedule.covariance
    return _to_jsonable(out)


def schedule_from_dict(data):
    """Rebuild a schedule from :func:`schedule_to_dict` output.

    Segment targets are loaded without re-checking their condition so that a
    damaged plan can still be judged by the verifier.
    """
    if data.get("schema_version") != SCHEMA_VERSION or data.get("kind") != "gain_schedule":
        raise DomainError("not a gain schedule of a supported schema version")
    system = LinearEnsemble.from_dict(data["system"])
    hold = periodized_with_gain(system, data["hold"]["K_c"], data["hold"]["t_s"])
    grams = {}
    segments = []
    for entry in data["segments"]:
        key = (json.dumps(entry["K_c"]), float(entry["t_s"]))
        if key not in grams:
            grams[key] = GramianEvaluator(periodized_with_gain(system, entry["K_c"], entry["t_s"]))
        segments.append(SteeringSegment.unchecked(grams[key], entry["target"],
                                                  entry["condition_tag"]))
    starts = tuple(float(e["start"]) for e in data["segments"])
    cov = data.get("covariance")
    if cov is not None:
        cov = {k: np.array(v, dtype=float) for k, v in cov.items()}
    return GainSchedule(system, tuple(segments), starts, float(data["total_time"]),
                        np.array(data["target"], dtype=float), hold, data["mode"],
                        data.get("provenance", {}), cov)
