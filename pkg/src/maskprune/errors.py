"""Exception types shared across the toolkit."""


class MaskpruneError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MaskpruneError, ValueError):
    """Tensor or parameter shapes are incompatible for the requested op."""


class ConfigError(MaskpruneError, ValueError):
    """A configuration value is missing, unknown, or out of range."""


class GraphError(MaskpruneError, ValueError):
    """A network spec does not describe a valid layer graph."""


class StateError(MaskpruneError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class DivergenceError(MaskpruneError, RuntimeError):
    """Training produced a non-finite loss."""


class EvaluationError(MaskpruneError, ValueError):
    """Metric evaluation is impossible (e.g. empty valid mask)."""


class FormatError(MaskpruneError, ValueError):
    """A binary file does not conform to the expected format."""
