"""Exception hierarchy shared by every fanet module."""


class FanetError(Exception):
    """Base class for all library errors."""


class ShapeError(FanetError, ValueError):
    """Operand extents are incompatible with an operation."""


class ConfigError(FanetError, ValueError):
    """A configuration value is invalid or inconsistent."""


class LabelError(FanetError, ValueError):
    """A class id or mask colour is outside the declared label set."""


class PairingError(FanetError, ValueError):
    """An image has no matching mask (or vice versa)."""


class GradientError(FanetError, RuntimeError):
    """Misuse of the differentiation engine, e.g. backward from a non-scalar."""


class DegenerateStatisticsError(FanetError, ValueError):
    """Batch statistics requested over fewer than two elements."""


class TrainingDiverged(FanetError, RuntimeError):
    """Loss became NaN or infinite during training."""

    def __init__(self, epoch: int, step: int, lr: float, loss: float):
        self.epoch, self.step, self.lr, self.loss = epoch, step, lr, loss
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, step {step} (lr={lr:.6g})"
        )
