"""Exception types shared across the package."""


class LrfError(Exception):
    """Base class for all library errors."""


class InvalidInputError(LrfError, ValueError):
    pass


class EmptyPatchError(LrfError):
    """A neighborhood query produced no usable points."""


class DegenerateGeometryError(LrfError):
    """Points are too collinear/coincident/symmetric for a unique axis."""


class InsufficientDataError(LrfError):
    pass


class TrainingDivergedError(LrfError, FloatingPointError):
    pass


class PoseFailureError(LrfError):
    pass


class ChecksumError(LrfError):
    """A serialized network failed its integrity check."""


class ConfigError(LrfError, ValueError):
    pass
