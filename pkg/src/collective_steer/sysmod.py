"""Plant model, periodizing constant gain and controllability Grammians.

A periodizing gain ``K_c`` makes the closed-loop drift ``A_c = A + B K_c``
satisfy ``expm(A_c t_s) == I``, so the free closed-loop motion returns to the
identity after one period. The Grammian

    W_t = int_0^t expm(-A_c tau) B B^T expm(-A_c^T tau) dtau

is evaluated with a single block-matrix exponential (Van Loan), which also
yields ``expm(A_c t)`` and ``expm(-A_c^T t)`` as by-products.
"""

import math
import os
import warnings
from dataclasses import dataclass, field

import mpmath
import numpy as np
import scipy.linalg
import scipy.signal

from .errors import DomainError, PeriodizationError
from .matfun import as_square, expm, operator_norm, spd_power, symmetrize

__all__ = [
    "LinearEnsemble",
    "PeriodizedSystem",
    "GramianEvaluator",
    "controllability_matrix",
    "kalman_rank_ok",
    "periodic_spectrum",
    "ackermann",
    "periodize",
    "periodized_with_gain",
    "gramian",
    "gramian_ratio",
    "drift_gramian",
    "default_rng",
    "period_tol",
    "periodicity_residual",
]

SEED_ENV = "COLLECTIVE_STEER_SEED"
HEYMANN_DRAWS = 8


def period_tol(n):
    return 1e-8 * n


EXTENDED_DPS = 40


def _residual_extended(A, B, K, t_s):
    n = A.shape[0]
    with mpmath.workdps(EXTENDED_DPS):
        A_c = mpmath.matrix(A.tolist()) + mpmath.matrix(B.tolist()) * mpmath.matrix(K.tolist())
        R = mpmath.expm(A_c * mpmath.mpf(t_s)) - mpmath.eye(n)
        R = np.array(R.tolist(), dtype=float)
    return float(operator_norm(R))


def periodicity_residual(A, B, K_c, t_s, extended=False):
    """``||expm((A + B K_c) t_s) - I||`` in double precision, or with a 40-digit
    matrix exponential (mpmath) when ``extended`` is true.

    For closed loops with badly conditioned eigenvectors the double value can be
    dominated by evaluation error (up to about ``cond(V)^2 * eps * ||A_c t_s||``).
    Acceptance uses the double value, because every later computation on the
    system runs in double precision; the extended value only explains refusals.
    """
    if extended:
        return _residual_extended(A, B, K_c, t_s)
    n = A.shape[0]
    return float(operator_norm(expm((A + B @ K_c) * t_s) - np.eye(n)))


def default_rng(seed=None):
    """RNG for randomized internals, seeded from ``COLLECTIVE_STEER_SEED`` if set."""
    if seed is None:
        seed = int(os.environ.get(SEED_ENV, "0"))
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class LinearEnsemble:
    """Identical linear agents ``x' = A x + B u`` with ``B`` of full column rank."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = as_square(self.A, "A")
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if B.ndim != 2 or B.shape[0] != A.shape[0]:
            raise DomainError(f"B must have {A.shape[0]} rows, got shape {B.shape}")
        if not np.all(np.isfinite(B)):
            raise DomainError("B has non-finite entries")
        if B.shape[1] > B.shape[0] or np.linalg.matrix_rank(B) < B.shape[1]:
            raise DomainError("B must have full column rank")
        A.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @classmethod
    def from_dict(cls, data):
        return cls(np.array(data["A"], dtype=float), np.array(data["B"], dtype=float))

    def to_dict(self):
        return {"A": self.A.tolist(), "B": self.B.tolist()}


def controllability_matrix(A, B):
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def kalman_rank_ok(sys):
    """True iff ``[B, AB, ..., A^{n-1} B]`` has numerical rank ``n``.

    The rank threshold is ``n * ||C|| * 1e-12`` on the singular values.
    """
    C = controllability_matrix(sys.A, sys.B)
    s = np.linalg.svd(C, compute_uv=False)
    return bool(s[-1] > sys.n * s[0] * 1e-12) if s[0] > 0 else False


def periodic_spectrum(n, t_s):
    """Lowest distinct harmonics ``+-2 pi i k / t_s`` (and 0 once when n is odd)."""
    w = 2.0 * math.pi / t_s
    poles = []
    for k in range(1, n // 2 + 1):
        poles.extend([1j * k * w, -1j * k * w])
    if n % 2:
        poles.append(0.0)
    return np.array(poles)


def ackermann(A, b, poles):
    """Row gain ``k`` with ``eig(A + b k) == poles`` for a single-input pair.

    Raises ``DomainError`` when ``(A, b)`` is not controllable.
    """
    n = A.shape[0]
    b = np.asarray(b, dtype=float).reshape(n, 1)
    C = controllability_matrix(A, b)
    s = np.linalg.svd(C, compute_uv=False)
    if s[-1] <= n * s[0] * 1e-12:
        raise DomainError("single-input pair is not controllable")
    coeffs = np.real(np.poly(poles))
    pA = np.zeros_like(A)
    for c in coeffs:
        pA = pA @ A + c * np.eye(n)
    e_last = np.zeros(n)
    e_last[-1] = 1.0
    row = np.linalg.solve(C.T, e_last)
    return -(row @ pA)[None, :]


@dataclass(frozen=True)
class PeriodizedSystem:
    """Plant plus a constant gain whose closed loop is ``t_s``-periodic."""

    base: LinearEnsemble
    K_c: np.ndarray
    t_s: float
    A_c: np.ndarray = field(init=False)
    periodicity_residual: float = field(init=False)

    def __post_init__(self):
        K_c = np.asarray(self.K_c, dtype=float).reshape(self.base.m, self.base.n)
        if not np.all(np.isfinite(K_c)):
            raise DomainError("K_c has non-finite entries")
        t_s = float(self.t_s)
        if not t_s > 0.0:
            raise DomainError(f"period must be positive, got {t_s}")
        A_c = self.base.A + self.base.B @ K_c
        residual = periodicity_residual(self.base.A, self.base.B, K_c, t_s)
        if not residual <= period_tol(self.base.n):
            raise PeriodizationError("closed loop is not periodic", residual)
        K_c.setflags(write=False)
        A_c.setflags(write=False)
        object.__setattr__(self, "K_c", K_c)
        object.__setattr__(self, "t_s", t_s)
        object.__setattr__(self, "A_c", A_c)
        object.__setattr__(self, "periodicity_residual", residual)

    @property
    def n(self):
        return self.base.n

    @property
    def m(self):
        return self.base.m


def periodized_with_gain(sys, K_c, t_s):
    """Wrap a user-supplied ``K_c``; it is residual-checked, never altered."""
    return PeriodizedSystem(sys, np.asarray(K_c, dtype=float), t_s)


def _single_input_gain(A, B, poles, rng):
    n, m = B.shape
    if m == 1:
        return ackermann(A, B, poles)
    # Heymann: a random F makes A + B F cyclic, then a random v makes
    # (A + B F, B v) controllable with probability one.
    last = None
    for _ in range(HEYMANN_DRAWS):
        F = rng.standard_normal((m, n)) / max(1.0, operator_norm(B))
        v = rng.standard_normal((m, 1))
        v /= np.linalg.norm(v)
        A1 = A + B @ F
        b = B @ v
        try:
            k = ackermann(A1, b, poles)
        except DomainError as exc:
            last = exc
            continue
        return F + v @ k
    raise PeriodizationError(f"Heymann reduction failed after {HEYMANN_DRAWS} draws: {last}")


def _robust_gain(A, B, poles):
    # Tits-Yang placement keeps closed-loop eigenvectors well conditioned.
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = scipy.signal.place_poles(A, B, poles, method="YT", maxiter=100)
    return -result.gain_matrix


def periodize(sys, t_s, rng=None):
    """Synthesize ``K_c`` making ``A + B K_c`` diagonalizable with spectrum
    ``{+-2 pi i k / t_s}`` (plus 0 for odd n), hence ``expm(A_c t_s) = I``.

    Single-input pairs use Ackermann's formula. Multi-input pairs use robust
    (Tits-Yang) eigenstructure assignment, with the Heymann reduction to single
    input followed by Ackermann as fallback. Every candidate is judged by the
    periodicity residual ``||expm(A_c t_s) - I||``; the best one is returned if
    it is within ``1e-8 n``. A refusal message also states the 40-digit
    residual, which tells an inaccurate gain apart from an ill-conditioned
    closed loop (see :func:`periodicity_residual`).

    Raises
    ------
    DomainError
        If ``(A, B)`` fails the Kalman rank test or ``t_s <= 0``.
    PeriodizationError
        If no candidate meets the residual tolerance.
    """
    t_s = float(t_s)
    if not t_s > 0.0:
        raise DomainError(f"period must be positive, got {t_s}")
    if not kalman_rank_ok(sys):
        raise DomainError("pair (A, B) fails the Kalman rank condition")
    if rng is None:
        rng = default_rng()
    n = sys.n
    # Place poles in normalized time tau = t / t_s; the gain is unchanged.
    A_n, B_n = sys.A * t_s, sys.B * t_s
    poles_n = periodic_spectrum(n, t_s) * t_s

    def candidates():
        if sys.m == 1:
            yield lambda: ackermann(A_n, B_n, poles_n)
            return
        yield lambda: _robust_gain(A_n, B_n, poles_n)
        for _ in range(HEYMANN_DRAWS):
            yield lambda: _single_input_gain(A_n, B_n, poles_n, rng)

    best_residual, best_K, failure = math.inf, None, None
    for make in candidates():
        try:
            K = make()
            residual = float(operator_norm(expm((sys.A + sys.B @ K) * t_s) - np.eye(n)))
        except (DomainError, PeriodizationError, ValueError, OverflowError,
                np.linalg.LinAlgError) as exc:
            failure = exc
            continue
        if residual < best_residual:
            best_residual, best_K = residual, K
        if best_residual <= 1e-3 * period_tol(n):
            break
    if best_K is None:
        raise PeriodizationError(f"pole placement failed: {failure}")
    if not best_residual <= period_tol(n):
        exact = periodicity_residual(sys.A, sys.B, best_K, t_s, extended=True)
        if exact <= period_tol(n):
            reason = (f"gain is accurate (40-digit residual {exact:.3e}) but the closed loop "
                      "is too ill-conditioned to evaluate in double precision")
        else:
            reason = f"pole placement not accurate enough (40-digit residual {exact:.3e})"
        raise PeriodizationError(reason, best_residual)
    return PeriodizedSystem(sys, best_K, t_s)


def _van_loan_generator(A_c, B):
    n = A_c.shape[0]
    gen = np.zeros((2 * n, 2 * n))
    gen[:n, :n] = A_c
    gen[:n, n:] = B @ B.T
    gen[n:, n:] = -A_c.T
    return gen


def _van_loan_blocks(gen, t):
    """``(expm(A_c t), expm(-A_c^T t), W_t)`` for a 1-D array of times."""
    n = gen.shape[0] // 2
    E = expm(t[:, None, None] * gen)
    F11 = E[:, :n, :n]
    F12 = E[:, :n, n:]
    F22 = E[:, n:, n:]
    W = symmetrize(np.swapaxes(F22, -1, -2) @ F12)
    return F11, F22, W


def drift_gramian(A_c, B, t):
    """Grammian ``W_t`` of an arbitrary drift ``A_c``, periodic or not.

    Same block exponential as ``GramianEvaluator``; useful for loops such as
    the open-loop double integrator that no periodizing gain describes.

    Parameters
    ----------
    A_c : (n, n) array
    B : (n, m) array
    t : float
        Positive horizon.

    Returns
    -------
    (n, n) ndarray
        Symmetric; positive definite when ``(A_c, B)`` is controllable.
    """
    A_c = as_square(A_c, "A_c")
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or B.shape[0] != A_c.shape[0]:
        raise DomainError(f"B must have {A_c.shape[0]} rows")
    t = float(t)
    if not t > 0.0:
        raise DomainError(f"Grammian needs t > 0, got {t}")
    return _van_loan_blocks(_van_loan_generator(A_c, B), np.array([t]))[2][0]


class GramianEvaluator:
    """Grammian and transition blocks of a periodized system.

    Everything expensive (the block generator, ``W_{t_s}``, its SPD powers and
    Cholesky factor) is computed at construction; queries are pure.

    For ``t >= 0`` the exponential of ``[[A_c, B B^T], [0, -A_c^T]] t`` has
    blocks ``F11 = expm(A_c t)``, ``F22 = expm(-A_c^T t)`` and ``F12``, and
    ``W_t = F22^T F12``.
    """

    def __init__(self, system):
        self.system = system
        self._gen = _van_loan_generator(system.A_c, system.base.B)
        self._gen.setflags(write=False)
        W = self._blocks_checked(np.array([system.t_s]))[2][0]
        lam = np.linalg.eigvalsh(W)
        if lam[0] <= 0.0:
            raise DomainError("Grammian is not positive definite; Kalman rank violated")
        self.W_end = W
        self.W_end_sqrt = spd_power(W, 0.5)
        self.W_end_isqrt = spd_power(W, -0.5)
        self.W_end_cho = scipy.linalg.cho_factor(W)
        for arr in (self.W_end, self.W_end_sqrt, self.W_end_isqrt):
            arr.setflags(write=False)

    @property
    def n(self):
        return self.system.n

    @property
    def t_s(self):
        return self.system.t_s

    def _blocks_checked(self, t):
        return _van_loan_blocks(self._gen, t)

    def blocks(self, t):
        """Return ``(expm(A_c t), expm(-A_c^T t), W_t)`` for scalar or array ``t >= 0``."""
        scalar = np.ndim(t) == 0
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < 0.0):
            raise DomainError("time must be non-negative")
        F11, F22, W = self._blocks_checked(t)
        if scalar:
            return F11[0], F22[0], W[0]
        return F11, F22, W

    def gramian(self, t):
        """``W_t`` for ``t > 0``; symmetric positive definite."""
        t = float(t)
        if not t > 0.0:
            raise DomainError(f"Grammian needs t > 0, got {t}")
        W = self.blocks(t)[2]
        if np.linalg.eigvalsh(W)[0] <= 0.0:
            raise DomainError(f"Grammian at t = {t} is not positive definite")
        return W

    def solve_end(self, rhs):
        """``W_{t_s}^{-1} rhs`` through the Cholesky factor."""
        return scipy.linalg.cho_solve(self.W_end_cho, rhs)


def gramian(g, t):
    """Grammian ``W_t`` of the evaluator's periodized system."""
    return g.gramian(t)


def gramian_ratio(g, t, t_s=None):
    """``W_t W_{t_s}^{-1}`` via an SPD solve; ``0`` at ``t = 0`` and ``I`` at ``t = t_s``.

    ``t_s`` defaults to the evaluator's period.
    """
    t = float(t)
    if t_s is None:
        t_s = g.t_s
    t_s = float(t_s)
    if not 0.0 <= t <= t_s:
        raise DomainError(f"need 0 <= t <= t_s, got t = {t}, t_s = {t_s}")
    if t == 0.0:
        return np.zeros((g.n, g.n))
    W_t = g.blocks(t)[2]
    if t_s == g.t_s:
        cho = g.W_end_cho
    else:
        cho = scipy.linalg.cho_factor(g.gramian(t_s))
    # W_t W_s^{-1} = (W_s^{-1} W_t)^T since both are symmetric.
    return scipy.linalg.cho_solve(cho, W_t).T
