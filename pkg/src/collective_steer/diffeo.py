"""Nonlinear rearrangement by a contraction-based feedback law.

Each particle ``x_in`` is sent to ``phi(x_in)`` over one period by its own
minimum-energy input. Written in the scaled coordinate ``y = W^{-1/2} x``
(``W`` the period Grammian), the map ``psi(y) = W^{-1/2} phi(W^{1/2} y) - y``
being a contraction makes the initial point recoverable from the current
state and time through a Banach fixed-point iteration

    y_in = W^{-1/2} expm(-A_c t) x - S_t psi(y_in),   S_t = W^{-1/2} W_t W^{-1/2},

so the open-loop input becomes a state feedback ``u = K(x, t)``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NonContractionError
from .sysmod import GramianEvaluator, default_rng

__all__ = [
    "FP_TOL",
    "MAX_ITERS",
    "DiffeoTask",
    "FixedPointTrace",
    "recover_initial",
    "open_loop_pair",
    "feedback_eval",
    "closed_loop_check",
    "empirical_lipschitz",
    "builtin_map",
    "BUILTIN_MAPS",
]

FP_TOL = 1e-12
MAX_ITERS = 200
LIPSCHITZ_PROBES = 200


def empirical_lipschitz(f, dim, box=1.0, probes=LIPSCHITZ_PROBES, rng=None):
    """Largest ``|f(a) - f(b)| / |a - b|`` over random pairs in ``[-box, box]^dim``.

    A sampled lower bound on the true Lipschitz constant; no global guarantee.
    """
    rng = rng if rng is not None else default_rng()
    a = rng.uniform(-box, box, size=(dim, probes))
    b = rng.uniform(-box, box, size=(dim, probes))
    num = np.linalg.norm(f(a) - f(b), axis=0)
    den = np.linalg.norm(a - b, axis=0)
    keep = den > 0.0
    return float(np.max(num[keep] / den[keep])) if np.any(keep) else 0.0


@dataclass(frozen=True)
class DiffeoTask:
    """Rearrangement ``x -> phi(x)`` over one period of a periodized system.

    ``phi`` must accept arrays of shape ``(n,)`` or ``(n, k)`` (points as
    columns). The contraction hypothesis on ``psi`` is checked empirically on
    ``probe_box`` unless ``lipschitz_hint`` is given.
    """

    system: object
    phi: object
    lipschitz_hint: float = None
    probe_box: float = 1.0
    gram: GramianEvaluator = field(init=False, repr=False)
    lipschitz: float = field(init=False)

    def __post_init__(self):
        gram = GramianEvaluator(self.system)
        object.__setattr__(self, "gram", gram)
        if self.lipschitz_hint is not None:
            L = float(self.lipschitz_hint)
        else:
            L = empirical_lipschitz(self.psi, self.system.n, self.probe_box)
        if not L < 1.0:
            raise NonContractionError("scaled map is not a contraction on the probe box", L)
        object.__setattr__(self, "lipschitz", L)

    @property
    def n(self):
        return self.system.n

    @property
    def t_s(self):
        return self.system.t_s

    def psi(self, y):
        """Scaled displacement ``W^{-1/2} phi(W^{1/2} y) - y``."""
        g = self.gram
        return g.W_end_isqrt @ self.phi(g.W_end_sqrt @ y) - y


def _check_t(task, t):
    t = float(t)
    if not 0.0 <= t <= task.t_s * (1.0 + 1e-12):
        raise DomainError(f"t = {t} outside [0, {task.t_s}]")
    return min(t, task.t_s)


def _input_from(task, x_in, eAcT_neg):
    g = task.gram
    return g.system.base.B.T @ eAcT_neg @ g.solve_end(task.phi(x_in) - x_in)


def open_loop_pair(task, x_in, t):
    """Minimum-energy state and input at time ``t`` for the particle starting at ``x_in``.

    ``x_t = expm(A_c t) (x_in + W_t W^{-1} (phi(x_in) - x_in))`` and
    ``u_t = B^T expm(-A_c^T t) W^{-1} (phi(x_in) - x_in)``; ``x`` ends at
    ``phi(x_in)`` because ``expm(A_c t_s) = I``.
    """
    t = _check_t(task, t)
    x_in = np.asarray(x_in, dtype=float)
    eAc, eAcT_neg, W_t = task.gram.blocks(t)
    x = eAc @ (x_in + W_t @ task.gram.solve_end(task.phi(x_in) - x_in))
    return x, _input_from(task, x_in, eAcT_neg)


@dataclass(frozen=True)
class FixedPointTrace:
    x_in: np.ndarray
    iterations: int
    residuals: tuple


def recover_initial(task, x, t, fp_tol=FP_TOL, max_iters=MAX_ITERS):
    """Initial point of the open-loop trajectory through ``x`` at time ``t``.

    Raises
    ------
    NonContractionError
        If the iteration does not reach ``fp_tol`` within ``max_iters``.
    """
    t = _check_t(task, t)
    return _recover(task, np.asarray(x, dtype=float), task.gram.blocks(t), fp_tol, max_iters)


def _recover(task, x, blocks, fp_tol, max_iters):
    g = task.gram
    _, eAcT_neg, W_t = blocks
    S_t = g.W_end_isqrt @ W_t @ g.W_end_isqrt
    # expm(-A_c t) is the transpose of expm(-A_c^T t)
    rhs = g.W_end_isqrt @ eAcT_neg.T @ x
    y = rhs.copy()
    residuals = []
    for it in range(1, max_iters + 1):
        y_next = rhs - S_t @ task.psi(y)
        step = float(np.max(np.linalg.norm(np.atleast_2d((y_next - y).T), axis=-1)))
        y = y_next
        residuals.append(step)
        if step <= fp_tol * max(1.0, float(np.max(np.abs(y)))):
            return FixedPointTrace(g.W_end_sqrt @ y, it, tuple(residuals))
    raise NonContractionError(f"fixed point not reached in {max_iters} iterations", residuals[-1])


def feedback_eval(task, x, t, fp_tol=FP_TOL, max_iters=MAX_ITERS, trace=False):
    """State-feedback input ``u = K(x, t)``; ``x`` may hold several points as columns."""
    t = _check_t(task, t)
    blocks = task.gram.blocks(t)
    rec = _recover(task, np.asarray(x, dtype=float), blocks, fp_tol, max_iters)
    u = _input_from(task, rec.x_in, blocks[1])
    return (u, rec) if trace else u


def closed_loop_check(task, x_in, steps=2000):
    """Integrate ``x' = A_c x + B K(x, t)`` over one period with RK4.

    Returns ``|x_{t_s} - phi(x_in)|`` (largest over columns when several
    points are given).
    """
    if steps < 1:
        raise DomainError("steps must be positive")
    A_c, B = task.system.A_c, task.system.base.B
    h = task.t_s / steps

    def f(x, t):
        return A_c @ x + B @ feedback_eval(task, x, t)

    x = np.asarray(x_in, dtype=float)
    for j in range(steps):
        t = j * h
        k1 = f(x, t)
        k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
        k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
        k4 = f(x + h * k3, min(t + h, task.t_s))
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    err = x - task.phi(np.asarray(x_in, dtype=float))
    return float(np.max(np.linalg.norm(np.atleast_2d(err.T), axis=-1)))


def _col(v, x):
    v = np.asarray(v, dtype=float)
    return v.reshape((-1,) + (1,) * (np.ndim(x) - 1))


def builtin_map(name, n, param=None):
    """Named map for the command line.

    ``identity``; ``translate`` with offset vector ``param``; ``linear`` with
    matrix ``param``; ``tanh_perturb`` with scalar ``param`` giving
    ``x + param * tanh(x)``.
    """
    if name == "identity":
        return lambda x: np.array(x, dtype=float)
    if name == "translate":
        c = np.asarray(param, dtype=float).reshape(n)
        return lambda x: x + _col(c, x)
    if name == "linear":
        M = np.asarray(param, dtype=float).reshape(n, n)
        return lambda x: M @ x
    if name == "tanh_perturb":
        alpha = float(param)
        return lambda x: x + alpha * np.tanh(x)
    raise DomainError(f"unknown builtin map {name!r}; choose from {BUILTIN_MAPS}")


BUILTIN_MAPS = ("identity", "translate", "linear", "tanh_perturb")
