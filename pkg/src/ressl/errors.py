"""Exception types raised by ressl."""

from typing import List, Optional


class ResslError(Exception):
    """Base class for all ressl errors."""


class ConfigError(ResslError):
    """Configuration is invalid. Carries every violation found, not just the first."""

    def __init__(self, violations: List[str], path: Optional[str] = None):
        self.violations = list(violations)
        self.path = path
        where = f" in {path}" if path else ""
        lines = "\n".join(f"  - {v}" for v in self.violations)
        super().__init__(f"{len(self.violations)} config violation(s){where}:\n{lines}")


class DatasetError(ResslError):
    """Dataset missing, corrupt, or with unexpected cardinality."""


class ShapeError(ResslError, ValueError):
    """Tensor shape does not match what the operation expects."""


class CheckpointError(ResslError):
    """Checkpoint cannot be used."""


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint file is truncated or its digest does not match."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written with a different schema version."""


class ConfigMismatchError(CheckpointError):
    """Checkpoint belongs to a run with a different config hash."""


class TrainingDivergedError(ResslError):
    """Loss became non-finite during a train step."""

    def __init__(self, step: int, lr: float, alpha: float, grad_norm: float, loss: float):
        self.step = step
        self.lr = lr
        self.alpha = alpha
        self.grad_norm = grad_norm
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss} at step {step} (lr={lr:.6g}, alpha={alpha:.4f}, grad_norm={grad_norm:.6g})"
        )
