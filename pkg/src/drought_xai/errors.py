"""Exception and warning types raised across the pipeline."""


class PipelineError(Exception):
    """Base class for every error the pipeline raises on purpose."""


class MalformedAnnotation(PipelineError):
    pass


class UnknownLabel(PipelineError):
    pass


class InconsistentDimensions(PipelineError):
    pass


class ImageReadError(PipelineError):
    pass


class EmptyClass(PipelineError):
    pass


class WeightsUnavailable(PipelineError):
    pass


class ShapeMismatch(PipelineError):
    pass


class LengthMismatch(PipelineError):
    pass


class DivergenceDetected(PipelineError):
    """Validation loss went non-finite; ``history`` holds the epochs completed so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class EmptyMatrix(PipelineError):
    pass


class EmptyReport(PipelineError):
    pass


class NonFiniteGradient(PipelineError):
    pass


class LayerNotFound(PipelineError):
    pass


class WriteError(PipelineError):
    pass


class ConfigError(PipelineError):
    pass


class DegenerateBoxWarning(UserWarning):
    """A box collapsed to zero area after clamping and was skipped."""


class ConstantMapWarning(UserWarning):
    """A heatmap had (numerically) zero spread and was standardized to zeros."""
