"""Exception hierarchy.

Mathematically meaningful rejections (``ConditionNotMet``, ``NotInGLPlusError``)
are kept apart from operational failures so the CLI can map them to distinct
exit codes.
"""


class SteeringError(Exception):
    """Base class for every error raised by this package."""


class DomainError(SteeringError, ValueError):
    """An argument lies outside the domain of the requested operation."""


class NotInGLPlusError(DomainError):
    """A matrix that must have positive determinant does not."""

    def __init__(self, det, what="matrix"):
        self.det = float(det)
        super().__init__(f"{what} not in GL+ (det = {self.det:.6g})")


class MatrixOverflowError(SteeringError, OverflowError):
    """Result magnitude is not representable in double precision."""


class PeriodizationError(SteeringError):
    """No acceptable periodizing gain could be produced."""

    def __init__(self, message, residual=float("nan")):
        self.residual = float(residual)
        super().__init__(f"{message} (periodicity residual = {self.residual:.3e})")


class TrajectoryLeavesGLPlus(SteeringError):
    """The minimum-energy trajectory is (numerically) singular at time ``t``."""

    def __init__(self, t, margin=float("nan")):
        self.t = float(t)
        self.margin = float(margin)
        super().__init__(
            f"trajectory leaves GL+ at t = {self.t:.12g} "
            f"(min singular value {self.margin:.3e})"
        )


class ConditionNotMet(SteeringError):
    """A single-leg request whose target passes neither reachability test."""

    def __init__(self, norm_value, cone_defect, cone_min_eig):
        self.norm_value = float(norm_value)
        self.cone_defect = float(cone_defect)
        self.cone_min_eig = float(cone_min_eig)
        super().__init__(
            "condition not met: conjugated norm = "
            f"{self.norm_value:.12g} (needs < 1), cone symmetry defect = "
            f"{self.cone_defect:.3e}, cone min eigenvalue = {self.cone_min_eig:.6g}"
        )


class NonContractionError(SteeringError):
    """Fixed-point iteration for the nonlinear feedback did not converge."""

    def __init__(self, message, residual=float("nan")):
        self.residual = float(residual)
        super().__init__(f"{message} (residual = {self.residual:.3e})")


class IntegrationBlowUp(SteeringError):
    """The simulated state became non-finite."""

    def __init__(self, t):
        self.t = float(t)
        super().__init__(f"integration blew up at t = {self.t:.12g}")
