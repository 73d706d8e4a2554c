"""Exception hierarchy shared across the package."""


class DocoError(Exception):
    """Base class for all package errors."""


class DimensionError(DocoError, ValueError):
    pass


class DegenerateFeatureError(DocoError, ValueError):
    pass


class DegenerateBoxError(DocoError, ValueError):
    pass


class ConfigurationError(DocoError, ValueError):
    pass


class IngestionError(DocoError, ValueError):
    pass


class AnnotationError(DocoError, ValueError):
    pass


class MissingAssetError(DocoError, FileNotFoundError):
    pass


class IncompatibleCheckpointError(DocoError):
    pass


class CorruptCheckpointError(DocoError):
    pass


class DeterminismError(DocoError):
    pass


class UninitializedGradientError(DocoError):
    pass


class DivergenceError(DocoError):
    """Raised when the training loss becomes non-finite.

    ``store`` holds the last parameter state whose loss was finite.
    """

    def __init__(self, message, store=None, step=None):
        super().__init__(message)
        self.store = store
        self.step = step
