"""Exception hierarchy shared by every module."""


class AOTError(Exception):
    """Base class for all package errors."""


class DimensionError(AOTError, ValueError):
    pass


class NumericError(AOTError, ArithmeticError):
    pass


class ContractError(AOTError, ValueError):
    pass


class TapeError(AOTError, RuntimeError):
    pass


class ConfigError(AOTError, ValueError):
    pass


class CapacityError(AOTError, ValueError):
    """More objects than identities in the bank."""


class MaskError(AOTError, ValueError):
    pass


class StateError(AOTError, RuntimeError):
    pass


class AttentionDegenerateError(AOTError, ValueError):
    """A query row has every key masked out."""


class GenerationError(AOTError, RuntimeError):
    pass


class FormatError(AOTError, ValueError):
    """A raster, record or checkpoint file could not be parsed."""
