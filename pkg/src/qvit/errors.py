"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class CorruptionError(RuntimeError):
    """A dataset or checkpoint file does not match its manifest."""


class MetricError(ValueError):
    """A metric cannot be computed from the given inputs."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, lr: float, grad_norm: float):
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
        super().__init__(
            f"non-finite loss at step {step} (lr={lr:.3e}, grad_norm={grad_norm:.3e})"
        )
