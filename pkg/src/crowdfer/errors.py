"""Exception hierarchy shared across the toolkit."""


class CrowdFerError(Exception):
    """Base class for all toolkit errors."""


class MalformedAnnotationError(CrowdFerError, ValueError):
    """Annotation list is empty or holds an out-of-range category."""


class UnusableItemError(CrowdFerError, ValueError):
    """Vote counts are all zero, so no distribution can be formed."""


class ShapeMismatchError(CrowdFerError, ValueError):
    def __init__(self, layer_index, message):
        self.layer_index = layer_index
        super().__init__(f"layer {layer_index}: {message}")


class StaleCacheError(CrowdFerError, RuntimeError):
    """Backward called with a missing cache or one from an older parameter state."""


class GradientCheckRefused(CrowdFerError, RuntimeError):
    """Finite differences are meaningless when the loss is stochastic."""


class DatasetFormatError(CrowdFerError, ValueError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class CheckpointError(CrowdFerError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
