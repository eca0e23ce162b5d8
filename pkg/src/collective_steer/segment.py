"""Single minimum-energy steering leg and its reachability tests.

With ``expm(A_c t_s) = I`` the minimum-energy input that moves the linear
matrix system ``Phi' = A_c Phi + B U`` from ``I`` to ``target`` in time ``t_s``
is ``U_t = B^T expm(-A_c^T t) W_{t_s}^{-1} (target - I)`` with trajectory
``Phi_t = expm(A_c t) (I + W_t W_{t_s}^{-1} (target - I))``. While ``Phi_t``
stays invertible the same motion is produced by the feedback gain
``K_t = U_t Phi_t^{-1} + K_c`` on the bilinear system ``Phi' = (A + B K_t) Phi``.

Two sufficient tests guarantee invertibility along the whole leg:

* norm test: ``||W^{-1/2} target W^{1/2} - I|| < 1``;
* cone test: ``W^{-1/2} target W^{1/2}`` is symmetric positive definite. This
  one holds for any period, so such targets are reachable arbitrarily fast.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NotInGLPlusError, TrajectoryLeavesGLPlus
from .matfun import SYM_TOL, as_square, min_singular_value, operator_norm, symmetrize
from .sysmod import GramianEvaluator

__all__ = [
    "COND_SLACK",
    "INV_MARGIN",
    "TAG_NORM",
    "TAG_CONE",
    "TAG_NONE",
    "SteeringSegment",
    "conjugate",
    "norm_condition_value",
    "cone_condition_values",
    "check_norm_condition",
    "check_cone_condition",
    "singularity_scan",
]

COND_SLACK = 1e-9
INV_MARGIN = 1e-9
TAG_NORM = "norm"
TAG_CONE = "cone"
TAG_NONE = "none"
_TAGS = (TAG_NORM, TAG_CONE, TAG_NONE)


def conjugate(target, W):
    """``W^{-1/2} target W^{1/2}`` with ``W`` symmetric positive definite."""
    lam, V = np.linalg.eigh(symmetrize(np.asarray(W, dtype=float)))
    if lam[0] <= 0.0:
        raise DomainError("W is not positive definite")
    root = np.sqrt(lam)
    Vt_target_V = V.T @ np.asarray(target, dtype=float) @ V
    return V @ (Vt_target_V * root[None, :] / root[:, None]) @ V.T


def norm_condition_value(target, W):
    """``||W^{-1/2} target W^{1/2} - I||`` (induced 2-norm)."""
    Psi = conjugate(target, W)
    return float(operator_norm(Psi - np.eye(Psi.shape[0])))


def cone_condition_values(target, W):
    """Symmetry defect ``||Psi - Psi^T||``, its tolerance and ``lambda_min(sym(Psi))``."""
    Psi = conjugate(target, W)
    defect = float(operator_norm(Psi - Psi.T))
    tol = SYM_TOL * (1.0 + float(operator_norm(Psi)))
    min_eig = float(np.linalg.eigvalsh(symmetrize(Psi))[0])
    return defect, tol, min_eig


def check_norm_condition(target, W):
    """True iff ``||W^{-1/2} target W^{1/2} - I|| < 1 - COND_SLACK``.

    The boundary case (norm exactly 1) is rejected.
    """
    return norm_condition_value(target, W) < 1.0 - COND_SLACK


def check_cone_condition(target, W):
    """True iff ``W^{-1/2} target W^{1/2}`` is symmetric (to tolerance) and positive definite."""
    defect, tol, min_eig = cone_condition_values(target, W)
    return defect <= tol and min_eig > 0.0


@dataclass(frozen=True)
class SteeringSegment:
    """One minimum-energy leg from ``I`` to ``target`` over one period of ``gram.system``.

    Use :meth:`build` to construct; it validates the target and assigns the
    condition tag. ``unchecked`` skips validation and exists only so that
    corrupted plan files can still be loaded and judged by the verifier.
    """

    gram: GramianEvaluator
    target: np.ndarray
    condition_tag: str
    _coef: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, gram, target, condition="auto"):
        """Create a segment.

        Parameters
        ----------
        condition : {"auto", "norm", "cone", "none"}
            ``"auto"`` tags the target with the cone test if it passes, else the
            norm test, else ``"none"``. An explicit ``"norm"`` or ``"cone"`` is
            verified and raises ``DomainError`` if the test fails. ``"none"``
            forces an unconditioned leg (used to exhibit singular trajectories).
        """
        target = as_square(target, "target")
        if target.shape[0] != gram.n:
            raise DomainError(f"target must be {gram.n}x{gram.n}")
        det = np.linalg.det(target)
        if not det > 0.0:
            raise NotInGLPlusError(det, "target")
        W = gram.W_end
        if condition == "auto":
            if check_cone_condition(target, W):
                tag = TAG_CONE
            elif check_norm_condition(target, W):
                tag = TAG_NORM
            else:
                tag = TAG_NONE
        elif condition == TAG_CONE:
            if not check_cone_condition(target, W):
                raise DomainError("target fails the cone condition")
            tag = TAG_CONE
        elif condition == TAG_NORM:
            if not check_norm_condition(target, W):
                raise DomainError("target fails the norm condition")
            tag = TAG_NORM
        elif condition == TAG_NONE:
            tag = TAG_NONE
        else:
            raise DomainError(f"unknown condition {condition!r}")
        return cls.unchecked(gram, target, tag)

    @classmethod
    def unchecked(cls, gram, target, condition_tag):
        if condition_tag not in _TAGS:
            raise DomainError(f"unknown condition tag {condition_tag!r}")
        target = np.array(target, dtype=float)
        coef = gram.solve_end(target - np.eye(gram.n))
        target.setflags(write=False)
        coef.setflags(write=False)
        return cls(gram, target, condition_tag, coef)

    @property
    def system(self):
        return self.gram.system

    @property
    def duration(self):
        return self.gram.t_s

    @property
    def W_end(self):
        return self.gram.W_end

    @property
    def K_c(self):
        return self.gram.system.K_c

    def _check_time(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0) or np.any(t > self.duration * (1.0 + 1e-12)):
            raise DomainError(f"time outside [0, {self.duration}]")
        return np.clip(t, 0.0, self.duration)

    def optimal_input(self, t):
        """Minimum-energy input ``U_t`` (m x n); vectorized over ``t``."""
        t = self._check_time(t)
        _, eAcT_neg, _ = self.gram.blocks(t)
        return self.gram.system.base.B.T @ eAcT_neg @ self._coef

    def optimal_trajectory(self, t):
        """Minimum-energy trajectory ``Phi_t`` (n x n); vectorized over ``t``."""
        t = self._check_time(t)
        eAc, _, W_t = self.gram.blocks(t)
        return eAc @ (np.eye(self.gram.n) + W_t @ self._coef)

    def state(self, t):
        """``(Phi_t, Phi_t', U_t)`` with ``Phi_t' = A_c Phi_t + B U_t``."""
        t = self._check_time(t)
        eAc, eAcT_neg, W_t = self.gram.blocks(t)
        Phi = eAc @ (np.eye(self.gram.n) + W_t @ self._coef)
        U = self.gram.system.base.B.T @ eAcT_neg @ self._coef
        dPhi = self.gram.system.A_c @ Phi + self.gram.system.base.B @ U
        return Phi, dPhi, U

    def feedback_gain(self, t):
        """Feedback gain ``K_t = U_t Phi_t^{-1} + K_c`` (m x n); vectorized over ``t``.

        Raises
        ------
        TrajectoryLeavesGLPlus
            If ``sigma_min(Phi_t) <= INV_MARGIN * max(||Phi_t||, 1)`` at some requested
            time. The floor of 1 is the size of ``Phi_0 = I``; without it a
            trajectory collapsing uniformly towards 0 would go unnoticed.
        """
        t = self._check_time(t)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        Phi, _, U = self.state(t)
        s = np.linalg.svd(Phi, compute_uv=False)
        bad = s[:, -1] <= INV_MARGIN * np.maximum(s[:, 0], 1.0)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise TrajectoryLeavesGLPlus(t[i], s[i, -1])
        # K - K_c = U Phi^{-1}  <=>  Phi^T (K - K_c)^T = U^T
        KT = np.linalg.solve(np.swapaxes(Phi, -1, -2), np.swapaxes(U, -1, -2))
        K = np.swapaxes(KT, -1, -2) + self.K_c
        return K[0] if scalar else K

    def closed_loop_matrix(self, t):
        """``A + B K_t``; vectorized over ``t``."""
        return self.gram.system.base.A + self.gram.system.base.B @ self.feedback_gain(t)


def _refine_sign_change(f, a, b, fa, tol):
    while b - a > tol:
        mid = 0.5 * (a + b)
        fm = f(mid)
        if fm == 0.0:
            return mid
        if (fm > 0.0) == (fa > 0.0):
            a, fa = mid, fm
        else:
            b = mid
    return 0.5 * (a + b)


def _refine_minimum(f, a, b, tol):
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def singularity_scan(seg, grid_points=512, touch_tol=1e-11):
    """Times in ``[0, duration]`` where ``det(Phi_t)`` vanishes.

    ``det(Phi_t)`` is sampled on a uniform grid and each sign change is refined
    by bisection to ``1e-9 * duration``. Zeros of even multiplicity do not change
    sign, so local minima of ``sigma_min(Phi_t)`` are also refined by golden
    section down to rounding level and reported when the refined minimum is
    below ``touch_tol * max ||Phi_t||``. At a true zero the refined value is
    of rounding size; a trajectory that merely becomes ill-conditioned keeps a
    positive floor.

    Returns a sorted list of crossing times; empty means the sampled trajectory
    stays in GL+.
    """
    if grid_points < 16:
        raise DomainError("grid_points must be at least 16")
    T = seg.duration
    tol = 1e-9 * T
    t = np.linspace(0.0, T, grid_points + 1)
    Phi = seg.optimal_trajectory(t)
    det = np.linalg.det(Phi)
    s = np.linalg.svd(Phi, compute_uv=False)
    smin, scale = s[:, -1], float(np.max(s[:, 0]))

    def det_at(x):
        return float(np.linalg.det(seg.optimal_trajectory(x)))

    def smin_at(x):
        return float(min_singular_value(seg.optimal_trajectory(x)))

    roots = []
    for i in range(grid_points):
        if det[i] == 0.0:
            roots.append(t[i])
        elif det[i] * det[i + 1] < 0.0:
            roots.append(_refine_sign_change(det_at, t[i], t[i + 1], det[i], tol))
    if det[-1] == 0.0:
        roots.append(t[-1])
    fine_tol = 1e-15 * T
    for i in range(1, grid_points):
        if smin[i] <= smin[i - 1] and smin[i] <= smin[i + 1]:
            x = _refine_minimum(smin_at, t[i - 1], t[i + 1], fine_tol)
            if smin_at(x) <= touch_tol * scale:
                roots.append(x)
    roots.sort()
    merged = []
    for r in roots:
        if not merged or r - merged[-1] > 10.0 * tol:
            merged.append(float(r))
    return merged
