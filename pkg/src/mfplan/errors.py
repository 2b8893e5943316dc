"""Exception types shared across the solver modules."""


class MFPlanError(Exception):
    """Base class for all package errors; carries a machine-readable payload."""

    def payload(self) -> dict:
        return {"type": type(self).__name__, "message": str(self)}


class ShapeMismatchError(MFPlanError, ValueError):
    """Field shapes do not match the grid they claim to live on."""


class MassMismatchError(MFPlanError, ValueError):
    """Endpoint densities do not carry equal discrete mass."""


class DomainError(MFPlanError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class UnsupportedStrategyError(MFPlanError, ValueError):
    """Requested strategy is not available for this grid dimension."""


class StepSizeError(MFPlanError, ValueError):
    """Primal/dual step sizes violate the operator-norm stability condition."""


class ProxNewtonError(MFPlanError, RuntimeError):
    """Cellwise proximal Newton solve failed to converge."""

    def __init__(self, message, cells=None):
        super().__init__(message)
        self.cells = cells

    def payload(self) -> dict:
        out = super().payload()
        if self.cells is not None:
            out["cells"] = [tuple(int(c) for c in cell) for cell in self.cells]
        return out


class GrowthBoundError(MFPlanError, ValueError):
    """A structural growth bound fails at a sampled point."""

    def __init__(self, message, bound=None, point=None, slack=None):
        super().__init__(message)
        self.bound = bound
        self.point = point
        self.slack = slack

    def payload(self) -> dict:
        out = super().payload()
        out.update({"bound": self.bound, "point": self.point, "slack": self.slack})
        return out


class PositivityError(MFPlanError, ValueError):
    """Model violates the nonnegativity convention required for path costs."""
