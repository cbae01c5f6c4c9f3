"""Exception hierarchy shared across the engine."""


class DragEditError(Exception):
    """Base class for all engine errors."""


class ConfigError(DragEditError):
    """Invalid configuration: bad shapes, ranks, layer indices, metadata."""


class NumericsError(DragEditError):
    """Non-finite values encountered where finite values are required."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class InstructionError(DragEditError):
    """Contradictory or malformed drag instruction."""


class PropagationError(DragEditError):
    """Point or mask propagation failed on a frame."""

    def __init__(self, message, frame=None):
        super().__init__(message if frame is None else f"{message} (frame {frame})")
        self.frame = frame


class TrackingError(DragEditError):
    """Embedded point tracking could not produce a position."""


class OptimizationError(DragEditError):
    """Latent optimization failed (non-finite gradient or loss)."""


class TrainingError(DragEditError):
    """Adapter training diverged."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class MetricError(DragEditError):
    """Flow estimation or scoring failed."""


class PairingError(DragEditError):
    """Paired denoising received latents at mismatched steps."""


class StageError(DragEditError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
