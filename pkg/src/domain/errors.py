from typing import Optional


class VitokError(Exception):
    """Base class for errors raised by the pipeline."""


class ImageFormatError(VitokError, ValueError):
    """Unreadable, unsupported or zero-sized image file."""


class ShapeError(VitokError, ValueError):
    """Tensor shape or grid geometry does not match what the operation expects."""


class CheckpointError(VitokError, ValueError):
    """Malformed VTKF container."""


class NonFiniteError(VitokError, RuntimeError):
    """A loss term or gradient went NaN/Inf."""

    def __init__(self, name: str, value: Optional[float] = None):
        self.name = name
        self.value = value
        super().__init__(f"non-finite value in '{name}'" + (f": {value}" if value is not None else ""))


class TrainingAbortedError(VitokError, RuntimeError):
    """Training stopped on a non-finite loss; the last good checkpoint is kept."""

    def __init__(self, step: int, cause: NonFiniteError, last_checkpoint: Optional[str]):
        self.step = step
        self.cause = cause
        self.last_checkpoint = last_checkpoint
        super().__init__(
            f"training aborted at step {step} ({cause}); last good checkpoint: {last_checkpoint}")
