"""Exception types shared across the package."""


class StackgameError(Exception):
    """Base class for all package errors."""

    def payload(self):
        return {"error": type(self).__name__, "message": str(self)}


class MalformedSpec(StackgameError):
    """Dimensions or values of a game specification are inconsistent."""


class ValidationFailed(StackgameError):
    """A specification parsed but failed one of the standing assumptions."""

    def __init__(self, report):
        super().__init__("specification failed validation")
        self.report = report

    def payload(self):
        out = super().payload()
        out["report"] = self.report.to_dict()
        return out


class ProjectionNotConverged(StackgameError):
    """The iterative projection fallback hit its iteration cap."""


class NotConverged(StackgameError):
    """A fixed-point or descent iteration did not reach its tolerance."""

    def __init__(self, message, history=None, alpha=None):
        super().__init__(message)
        self.history = list(history or [])
        self.alpha = alpha

    def payload(self):
        out = super().payload()
        out["history"] = [float(h) for h in self.history[-50:]]
        if self.alpha is not None:
            out["alpha"] = float(self.alpha)
        return out


class SingularMatrix(StackgameError):
    """A linear solve met a matrix whose condition number exceeds the guard."""


class BlowUp(StackgameError):
    """A Riccati solution escaped to infinity before reaching t = 0."""

    def __init__(self, message, escape_time):
        super().__init__(message)
        self.escape_time = escape_time

    def payload(self):
        out = super().payload()
        out["escape_time"] = float(self.escape_time)
        return out


class AssumptionViolated(StackgameError):
    """Structural assumptions needed by a transform do not hold."""

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = list(failures or [])

    def payload(self):
        out = super().payload()
        out["failures"] = [str(f) for f in self.failures]
        return out
