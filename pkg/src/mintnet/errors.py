"""Exception hierarchy shared across the package."""


class MintError(Exception):
    """Base class for every error raised by mintnet."""


class ShapeError(MintError, ValueError):
    pass


class ConfigError(MintError, ValueError):
    pass


class DivergenceError(MintError, ArithmeticError):
    """A fixed-point iterate went non-finite."""

    def __init__(self, message, iteration=None, layer=None):
        super().__init__(message)
        self.iteration = iteration
        self.layer = layer


class BracketError(MintError, ArithmeticError):
    pass


class NonFiniteError(MintError, ArithmeticError):
    pass


class IDXFormatError(MintError, ValueError):
    pass


class IDXTruncatedError(MintError, ValueError):
    pass


class IDXDimensionError(MintError, ValueError):
    pass


class CheckpointError(MintError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class MissingTensorError(CheckpointError, FileNotFoundError):
    pass


class CheckpointShapeError(CheckpointError, ShapeError):
    pass
