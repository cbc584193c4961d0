"""Exception hierarchy shared by every module of the package."""


class SpdeExitError(Exception):
    """Base class for all errors raised by :mod:`spde_exit`."""


class NonElliptic(SpdeExitError, ValueError):
    pass


class ShapeMismatch(SpdeExitError, ValueError):
    pass


class SingularSystem(SpdeExitError, ArithmeticError):
    pass


class EigenUnavailable(SpdeExitError, RuntimeError):
    """Raised when a spectral feature is requested but the eigenbasis was skipped."""


class NonFiniteOutput(SpdeExitError, FloatingPointError):
    pass


class SingularDiffusion(SpdeExitError, ArithmeticError):
    pass


class BlowUp(SpdeExitError, RuntimeError):
    """The discrete state left the sup-norm ball of radius ``threshold``."""

    def __init__(self, time, norm, threshold):
        self.time = float(time)
        self.norm = float(norm)
        self.threshold = float(threshold)
        super().__init__(
            f"state sup-norm {self.norm:.3g} exceeded {self.threshold:.3g} at t={self.time:.6g}"
            " (time step likely too large)"
        )


class NoMerge(SpdeExitError, RuntimeError):
    pass


class NoConvergence(SpdeExitError, RuntimeError):
    pass


class LineSearchFailure(SpdeExitError, RuntimeError):
    pass


class AllDiverged(SpdeExitError, RuntimeError):
    pass


class InsufficientData(SpdeExitError, ValueError):
    pass


class ConfigError(SpdeExitError, ValueError):
    """Invalid experiment configuration; ``field`` is the dotted path of the culprit."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class TaskError(SpdeExitError, RuntimeError):
    pass


class UnknownTask(SpdeExitError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown task"
