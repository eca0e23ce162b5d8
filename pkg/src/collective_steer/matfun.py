"""Dense matrix functions: exponential, structured logarithms, SPD powers, polar.

Only the SPD and SO(n) branches of the logarithm are provided; a general real
logarithm is never needed because every group element is handled through its
polar factors.

``expm`` accepts stacks of matrices with shape ``(..., n, n)`` so that gain
schedules can be evaluated on a whole time grid in one call.
"""

import math

import numpy as np
import scipy.linalg

from .errors import DomainError, MatrixOverflowError, NotInGLPlusError

__all__ = [
    "SYM_TOL",
    "ORTH_TOL",
    "expm",
    "logm_spd",
    "logm_rotation",
    "sqrtm_spd",
    "spd_power",
    "polar",
    "right_polar",
    "min_singular_value",
    "operator_norm",
    "symmetrize",
    "as_square",
    "as_spd",
    "as_rotation",
    "symmetry_defect",
]

SYM_TOL = 1e-8
ORTH_TOL = 1e-8
PI_BRANCH_TOL = 1e-10

# Diagonal Pade coefficients and 1-norm thresholds (Higham 2005).
_PADE = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0, 960960.0,
         16380.0, 182.0, 1.0),
}
_THETA = ((3, 1.495585217958292e-2), (5, 2.539398330063230e-1),
          (7, 9.504178996162932e-1), (9, 2.097847961257068e0))
_THETA13 = 5.371920351148152


def as_square(M, name="matrix"):
    """Return ``M`` as a float array of square matrices with finite entries."""
    M = np.asarray(M, dtype=float)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2] or M.shape[-1] < 1:
        raise DomainError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise DomainError(f"{name} has non-finite entries")
    return M


def symmetrize(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def operator_norm(M):
    """Induced 2-norm (largest singular value); broadcasts over stacks."""
    M = np.asarray(M, dtype=float)
    return np.linalg.svd(M, compute_uv=False)[..., 0]


def min_singular_value(M):
    """Smallest singular value; broadcasts over stacks."""
    M = np.asarray(M, dtype=float)
    return np.linalg.svd(M, compute_uv=False)[..., -1]


def symmetry_defect(M):
    return operator_norm(M - np.swapaxes(M, -1, -2))


def as_spd(P, name="matrix", tol=SYM_TOL):
    """Validate ``P`` as symmetric positive definite and return its symmetrization.

    Symmetry is accepted within ``tol * (1 + ||P||)``; the returned matrix is
    exactly symmetric.
    """
    P = as_square(P, name)
    scale = 1.0 + operator_norm(P)
    if np.any(symmetry_defect(P) > tol * scale):
        raise DomainError(f"{name} is not symmetric")
    P = symmetrize(P)
    if np.any(np.linalg.eigvalsh(P)[..., 0] <= 0.0):
        raise DomainError(f"{name} is not positive definite")
    return P


def as_rotation(Q, name="matrix", tol=ORTH_TOL):
    """Validate ``Q`` as a member of SO(n) and return it re-orthonormalized."""
    Q = as_square(Q, name)
    n = Q.shape[-1]
    if operator_norm(Q.T @ Q - np.eye(n)) > tol:
        raise DomainError(f"{name} is not orthogonal")
    det = np.linalg.det(Q)
    if det <= 0.0:
        raise NotInGLPlusError(det, name)
    U, _, Vt = np.linalg.svd(Q)
    return U @ Vt


def _pade_terms(M, m):
    n = M.shape[-1]
    ident = np.broadcast_to(np.eye(n), M.shape)
    b = _PADE[m]
    M2 = M @ M
    if m == 13:
        M4 = M2 @ M2
        M6 = M4 @ M2
        U = M @ (M6 @ (b[13] * M6 + b[11] * M4 + b[9] * M2)
                 + b[7] * M6 + b[5] * M4 + b[3] * M2 + b[1] * ident)
        V = (M6 @ (b[12] * M6 + b[10] * M4 + b[8] * M2)
             + b[6] * M6 + b[4] * M4 + b[2] * M2 + b[0] * ident)
        return U, V
    powers = [ident, M2]
    while len(powers) < (m + 1) // 2:
        powers.append(powers[-1] @ M2)
    U = M @ sum(b[2 * k + 1] * P for k, P in enumerate(powers))
    V = sum(b[2 * k] * P for k, P in enumerate(powers))
    return U, V


def _choose_degree(norm1):
    for m, theta in _THETA:
        if norm1 <= theta:
            return m, 0
    s = max(0, int(math.ceil(math.log2(norm1 / _THETA13)))) if norm1 > 0 else 0
    return 13, s


def expm(M):
    """Matrix exponential by scaling and squaring with a diagonal Pade approximant.

    Parameters
    ----------
    M : array_like, shape (..., n, n)
        Real square matrix or stack of matrices with finite entries.

    Returns
    -------
    ndarray, shape (..., n, n)

    Raises
    ------
    MatrixOverflowError
        If the exponential is not representable in double precision.
    """
    M = as_square(M)
    shape = M.shape
    n = shape[-1]
    flat = M.reshape(-1, n, n)
    out = np.empty_like(flat)
    norms = np.abs(flat).sum(axis=-2).max(axis=-1)
    plans = [_choose_degree(v) for v in norms]
    for plan in sorted(set(plans)):
        idx = [i for i, p in enumerate(plans) if p == plan]
        m, s = plan
        X = flat[idx] / (2.0 ** s)
        with np.errstate(over="ignore", invalid="ignore"):
            U, V = _pade_terms(X, m)
            R = np.linalg.solve(V - U, V + U)
            for _ in range(s):
                R = R @ R
        out[idx] = R
    if not np.all(np.isfinite(out)):
        raise MatrixOverflowError("matrix exponential overflows double precision")
    return out.reshape(shape)


def spd_power(P, p, name="matrix"):
    """``P**p`` for SPD ``P`` computed through the symmetric eigendecomposition."""
    P = as_spd(P, name)
    lam, V = np.linalg.eigh(P)
    out = (V * lam[..., None, :] ** p) @ np.swapaxes(V, -1, -2)
    return symmetrize(out)


def sqrtm_spd(P):
    """Unique SPD square root of an SPD matrix."""
    return spd_power(P, 0.5)


def logm_spd(P):
    """Symmetric logarithm ``S`` of an SPD matrix, ``expm(S) == P``."""
    P = as_spd(P)
    lam, V = np.linalg.eigh(P)
    return symmetrize((V * np.log(lam)[..., None, :]) @ np.swapaxes(V, -1, -2))


def logm_rotation(Q):
    """Principal skew-symmetric logarithm of a rotation matrix.

    Computed from the real Schur form, which for an orthogonal matrix is block
    diagonal with 2x2 rotation blocks and +-1 entries. Rotation angles lie in
    (-pi, pi]; an angle of exactly pi is taken as +pi, where the logarithm is
    not unique. Pairs of -1 eigenvalues that Schur leaves as 1x1 blocks are
    combined into half-turns in the plane of their Schur vectors.
    """
    Q = as_rotation(Q)
    n = Q.shape[0]
    T, Z = scipy.linalg.schur(Q, output="real")
    L = np.zeros((n, n))
    minus_ones = []
    i = 0
    while i < n:
        if i + 1 < n and abs(T[i + 1, i]) > 0.0:
            theta = math.atan2(0.5 * (T[i + 1, i] - T[i, i + 1]),
                               0.5 * (T[i, i] + T[i + 1, i + 1]))
            if abs(abs(theta) - math.pi) <= PI_BRANCH_TOL:
                theta = math.pi
            L[i, i + 1] = -theta
            L[i + 1, i] = theta
            i += 2
        else:
            if T[i, i] < 0.0:
                minus_ones.append(i)
            i += 1
    if len(minus_ones) % 2:
        raise DomainError("rotation has an unpaired -1 eigenvalue")
    for a, b in zip(minus_ones[::2], minus_ones[1::2]):
        L[a, b] = -math.pi
        L[b, a] = math.pi
    S = Z @ L @ Z.T
    return 0.5 * (S - S.T)


def polar(M):
    """Left polar decomposition ``M = P @ Q`` of a matrix with positive determinant.

    ``P = sqrtm_spd(M M^T)`` and ``Q = P^{-1} M``; both are obtained from one SVD
    ``M = U diag(s) V^T`` as ``P = U diag(s) U^T`` and ``Q = U V^T``.

    Raises
    ------
    NotInGLPlusError
        If ``det(M) <= 0``.
    """
    M = as_square(M)
    det = np.linalg.det(M)
    if det <= 0.0:
        raise NotInGLPlusError(det)
    U, s, Vt = np.linalg.svd(M)
    P = symmetrize((U * s) @ U.T)
    Q = U @ Vt
    return P, Q


def right_polar(M):
    """Right polar decomposition ``M = Q @ P`` with ``P = sqrtm_spd(M^T M)``."""
    M = as_square(M)
    det = np.linalg.det(M)
    if det <= 0.0:
        raise NotInGLPlusError(det)
    U, s, Vt = np.linalg.svd(M)
    P = symmetrize((Vt.T * s) @ Vt)
    Q = U @ Vt
    return Q, P
