"""Exception types raised across the package."""


class CJepaError(Exception):
    """Base class for all errors raised by this package."""


class NonFinite(CJepaError, ValueError):
    pass


class NonSymmetric(CJepaError, ValueError):
    pass


class ConvergenceError(CJepaError, RuntimeError):
    pass


class BatchTooSmall(CJepaError, ValueError):
    pass


class ShapeMismatch(CJepaError, ValueError):
    pass


class TooFewBlocks(CJepaError, ValueError):
    pass


class GridTooSmall(CJepaError, ValueError):
    pass


class EmptyContext(CJepaError, RuntimeError):
    pass


class EmptyTargets(CJepaError, ValueError):
    pass


class NoCachedForward(CJepaError, RuntimeError):
    pass


class MomentumOutOfRange(CJepaError, ValueError):
    pass


class NegativeEigenvalue(CJepaError, ValueError):
    pass


class StepTooLarge(CJepaError, ValueError):
    pass


class StepOutOfRange(CJepaError, ValueError):
    pass


class NonFiniteLoss(CJepaError, FloatingPointError):
    """Training produced a NaN/Inf loss; carries the failing step."""

    def __init__(self, step, message="non-finite loss", snapshot=None):
        super().__init__(f"{message} at step {step}")
        self.step = step
        self.snapshot = snapshot


class MisalignedLogs(CJepaError, ValueError):
    pass


class ConfigError(CJepaError, ValueError):
    pass


class LogParseError(CJepaError, ValueError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class RankDeficientWarning(UserWarning):
    """A correlation eigenvalue fell below the rank tolerance during simulation."""
