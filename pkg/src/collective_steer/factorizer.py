"""Factor a target in GL+(n) into pieces that a single steering leg can reach.

Two families are produced:

* near-identity factors ``expm(M/N)`` with ``||factor - I|| < eps``, built from
  the polar split ``target = expm(M2) expm(M1)`` (``M2`` symmetric, ``M1``
  skew). With ``eps = sqrt(lambda_min(W) / lambda_max(W))`` each factor passes
  the norm test against ``W``.
* SPD-cone factors ``W^{1/2} S W^{-1/2}`` with ``S`` SPD, which pass the cone
  test against ``W`` and are therefore reachable in any time.

Factor lists are ordered by application: ``factors[0]`` acts first, so the
target is ``factors[-1] @ ... @ factors[0]`` (see :func:`ordered_product`).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NotInGLPlusError
from .matfun import (
    as_spd,
    as_square,
    expm,
    logm_rotation,
    logm_spd,
    operator_norm,
    polar,
    right_polar,
    spd_power,
    symmetrize,
)
from .segment import check_cone_condition, check_norm_condition

__all__ = [
    "NearIdentityFactorization",
    "SpdConeFactorization",
    "ordered_product",
    "two_exponential_split",
    "near_identity_factorize",
    "rotation_to_three_spd",
    "givens_angles",
    "spd_cone_factorize",
    "SPLIT_THRESHOLD",
    "STRATEGIES",
    "plane_rotation",
    "factorization_report",
]

# Plane rotations at least this close to a right angle are split into pieces of
# at most pi/4 so that sigma stays well away from 0.
SPLIT_THRESHOLD = math.pi / 2 - 0.1
_SPLIT_PIECE = math.pi / 4
_ANGLE_SKIP = 1e-14
_IDENTITY_SKIP = 1e-13


def ordered_product(factors, n=None):
    """``factors[-1] @ ... @ factors[0]``; the identity for an empty list."""
    if not factors:
        if n is None:
            raise DomainError("dimension needed for an empty product")
        return np.eye(n)
    out = np.array(factors[0], dtype=float)
    for F in factors[1:]:
        out = F @ out
    return out


def _relative_error(A, B):
    return float(operator_norm(A - B) / max(1.0, float(operator_norm(B))))


def _check_gl_plus(target):
    target = as_square(target, "target")
    det = np.linalg.det(target)
    if not det > 0.0:
        raise NotInGLPlusError(det, "target")
    return target


def two_exponential_split(target):
    """Return ``(M1, M2)`` with ``M1`` skew, ``M2`` symmetric and
    ``expm(M2) @ expm(M1) == target``.

    Obtained from the left polar decomposition ``target = P Q`` as
    ``M2 = log P`` and ``M1 = log Q``.
    """
    target = _check_gl_plus(target)
    P, Q = polar(target)
    return logm_rotation(Q), logm_spd(P)


def _copies_needed(M, eps):
    norm = float(operator_norm(M))
    if norm <= _IDENTITY_SKIP:
        return 0
    # smallest integer strictly above norm / log(1 + eps)
    return int(math.floor(norm / math.log1p(eps))) + 1


@dataclass(frozen=True)
class NearIdentityFactorization:
    """``N1`` copies of ``expm(M1/N1)`` followed by ``N2`` copies of ``expm(M2/N2)``."""

    factors: tuple
    epsilon: float
    N1: int
    N2: int
    M1: np.ndarray
    M2: np.ndarray

    @property
    def N(self):
        return self.N1 + self.N2

    def product(self):
        return ordered_product(list(self.factors), self.M1.shape[0])

    def to_dict(self):
        return {
            "kind": "near_identity",
            "epsilon": self.epsilon,
            "N": self.N,
            "N1": self.N1,
            "N2": self.N2,
            "M1": self.M1.tolist(),
            "M2": self.M2.tolist(),
            "factors": [F.tolist() for F in self.factors],
        }


def near_identity_factorize(target, epsilon):
    """Split ``target`` into factors each within ``epsilon`` of the identity.

    With ``target = expm(M2) expm(M1)``, ``N_l`` is the least integer above
    ``||M_l|| / log(1 + epsilon)`` (zero when ``||M_l||`` is at rounding
    level), so ``||expm(M_l/N_l) - I|| <= exp(||M_l||/N_l) - 1
    < epsilon``. The identity target gives an empty list.
    """
    epsilon = float(epsilon)
    if not epsilon > 0.0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    M1, M2 = two_exponential_split(target)
    N1, N2 = _copies_needed(M1, epsilon), _copies_needed(M2, epsilon)
    factors = []
    if N1:
        factors += [expm(M1 / N1)] * N1
    if N2:
        factors += [expm(M2 / N2)] * N2
    for F in factors:
        F.setflags(write=False)
    return NearIdentityFactorization(tuple(factors), epsilon, N1, N2, M1, M2)


def _sigma(theta):
    # positive root of 2 s^2 + 3 s tan(theta) - 1 = 0
    t = math.tan(theta)
    return (-3.0 * t + math.sqrt(9.0 * t * t + 8.0)) / 4.0


def rotation_to_three_spd(theta):
    """Three SPD 2x2 matrices whose product ``S3 @ S2 @ S1`` is the rotation by ``theta``.

    ``S1 = [[1, s], [s, 2 s^2]]`` and ``S2 = [[2 s^2, s], [s, 1]]`` with ``s > 0``
    chosen so that the orthogonal polar factor of ``S2 S1`` is the rotation,
    which happens exactly when ``tan(theta) = (1 - 2 s^2) / (3 s)``. Then
    ``S3 = (S2 S1^2 S2)^{-1/2}`` strips the SPD polar factor.

    The cores become ill-conditioned as ``|theta|`` approaches ``pi/2``: the
    product error in double precision is about ``3e-13 * tan(theta)^2``, so
    callers keep ``|theta| <= SPLIT_THRESHOLD``.

    Parameters
    ----------
    theta : float
        Angle with ``0 < |theta| < pi/2``.
    """
    theta = float(theta)
    if not (0.0 < abs(theta) < math.pi / 2):
        raise DomainError(f"need 0 < |theta| < pi/2, got {theta}")
    s = _sigma(theta)
    S1 = np.array([[1.0, s], [s, 2.0 * s * s]])
    S2 = np.array([[2.0 * s * s, s], [s, 1.0]])
    M = S2 @ S1
    S3 = spd_power(symmetrize(M @ M.T), -0.5)
    return S1, S2, S3


def plane_rotation(n, i, j, theta):
    """Rotation by ``theta`` in the coordinate plane ``(i, j)`` of R^n."""
    G = np.eye(n)
    c, s = math.cos(theta), math.sin(theta)
    G[i, i] = G[j, j] = c
    G[i, j] = -s
    G[j, i] = s
    return G


def givens_angles(Q):
    """Plane rotations ``[(i, j, angle), ...]`` whose ordered product is ``Q``.

    Below-diagonal entries are eliminated column by column. Each elimination
    ``G`` acts on rows ``(c, r)``; since ``G_L ... G_1 Q = I`` for ``Q`` in SO(n),
    ``Q = G_1^T ... G_L^T`` and the returned list is in application order
    (``G_L^T`` first). Rotations with negligible angle are dropped.
    """
    R = np.array(Q, dtype=float)
    n = R.shape[0]
    eliminations = []
    for c in range(n - 1):
        for r in range(c + 1, n):
            a, b = R[c, c], R[r, c]
            if b == 0.0 and a >= 0.0:
                continue
            phi = math.atan2(b, a)
            # rows (c, r) rotated by -phi zero out R[r, c]
            R = plane_rotation(n, c, r, -phi) @ R
            eliminations.append((c, r, phi))
    return [(c, r, phi) for c, r, phi in reversed(eliminations) if abs(phi) > _ANGLE_SKIP]


def _split_angle(phi):
    if abs(phi) < SPLIT_THRESHOLD:
        return [phi]
    pieces = int(math.ceil(abs(phi) / _SPLIT_PIECE))
    return [phi / pieces] * pieces


def _embed(n, i, j, S):
    E = np.eye(n)
    E[np.ix_([i, j], [i, j])] = S
    return E


def _cores_of(M):
    """SPD cores whose ordered product is ``M`` (any matrix in GL+)."""
    n = M.shape[0]
    Q, P = right_polar(M)
    cores = []
    if operator_norm(P - np.eye(n)) > _IDENTITY_SKIP:
        cores.append(P)
    for i, j, phi in givens_angles(Q):
        for piece in _split_angle(phi):
            cores.extend(_embed(n, i, j, S) for S in rotation_to_three_spd(piece))
    return cores


@dataclass(frozen=True)
class SpdConeFactorization:
    """Factors ``W^{1/2} S_k W^{-1/2}`` in application order, with their SPD cores ``S_k``."""

    factors: tuple
    spd_cores: tuple
    W: np.ndarray
    strategy: str

    @property
    def K(self):
        return len(self.factors)

    def product(self):
        return ordered_product(list(self.factors), self.W.shape[0])

    def to_dict(self):
        return {
            "kind": "spd_cone",
            "strategy": self.strategy,
            "K": self.K,
            "W": self.W.tolist(),
            "factors": [F.tolist() for F in self.factors],
            "spd_cores": [S.tolist() for S in self.spd_cores],
        }


STRATEGIES = ("conjugate", "sandwich")


def spd_cone_factorize(target, W, strategy="conjugate"):
    """Factor ``target`` into matrices that each pass the cone test against ``W``.

    Parameters
    ----------
    target : (n, n) array_like
        Matrix with positive determinant.
    W : (n, n) array_like
        SPD conjugating matrix (normally the period Grammian).
    strategy : {"conjugate", "sandwich"}
        ``"conjugate"`` decomposes ``W^{-1/2} target W^{1/2} = Q P`` (right
        polar), giving cores ``[P]`` plus three SPD matrices per plane rotation
        of ``Q``. ``"sandwich"`` writes ``target = W^{-1/2} (W^{1/2} T W^{-1/2}) W^{1/2}``
        and decomposes ``target`` itself, giving cores
        ``[W^{1/2}, cores of target..., W^{-1/2}]``; for a single plane rotation
        this yields five factors.

    Returns
    -------
    SpdConeFactorization
        Empty for the identity target.
    """
    target = _check_gl_plus(target)
    W = as_spd(W, "W")
    n = target.shape[0]
    if W.shape != target.shape:
        raise DomainError("W and target must have the same shape")
    if strategy not in STRATEGIES:
        raise DomainError(f"unknown strategy {strategy!r}")
    if operator_norm(target - np.eye(n)) <= _IDENTITY_SKIP:
        return SpdConeFactorization((), (), W, strategy)
    W_half, W_ihalf = spd_power(W, 0.5), spd_power(W, -0.5)
    if strategy == "conjugate":
        cores = _cores_of(W_ihalf @ target @ W_half)
    else:
        cores = [W_half] + _cores_of(target) + [W_ihalf]
    cores = [symmetrize(C) for C in cores]
    factors = [W_half @ C @ W_ihalf for C in cores]
    for arr in cores + factors:
        arr.setflags(write=False)
    return SpdConeFactorization(tuple(factors), tuple(cores), W, strategy)


def factorization_report(fact, target, W=None):
    """Product error and per-factor condition results for a factorization."""
    target = np.asarray(target, dtype=float)
    n = target.shape[0]
    out = {"product_error": _relative_error(fact.product(), target)}
    if W is not None:
        out["norm_condition"] = [bool(check_norm_condition(F, W)) for F in fact.factors]
        out["cone_condition"] = [bool(check_cone_condition(F, W)) for F in fact.factors]
    out["n"] = n
    return out
