"""Exception hierarchy shared by every pixelveil module"""


class PixelVeilError(Exception):
    """Base class for all pixelveil failures"""

    exit_code = 1


class UsageError(PixelVeilError):
    """Command-line policy violation (missing seed, unknown config key)"""

    exit_code = 2


class DataError(PixelVeilError):
    """I/O or file-format problem"""

    exit_code = 3


class ValidationError(PixelVeilError, ValueError):
    """Parameter or invariant violation"""

    exit_code = 4


# data_io

class MagicMismatchError(DataError):
    pass


class TruncatedPayloadError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class UnsupportedVariantError(DataError):
    pass


class UnsupportedMaxvalError(DataError):
    pass


class TruncatedRasterError(DataError):
    pass


class InvalidChannelsError(ValidationError):
    pass


class EmptyDatasetError(ValidationError):
    pass


# trigger

class InfeasibleLayoutError(ValidationError):
    pass


class InvalidSpecError(ValidationError):
    pass


class ChannelMismatchError(ValidationError):
    pass


class ManifestError(DataError):
    """Malformed or incomplete manifest; `field` names the culprit when known"""

    def __init__(self, message: str, field: str = None):
        super().__init__(message)
        self.field = field


# poison / imageops

class DimensionMismatchError(ValidationError):
    pass


class PlanError(ValidationError):
    pass


class PatchBoundsError(ValidationError):
    pass


class WindowRangeError(ValidationError):
    pass


# nn

class ShapeMismatchError(ValidationError):
    pass


class TrainingDivergedError(PixelVeilError):
    pass


# metrics / defenses

class InvalidDistributionError(ValidationError):
    pass


class DegenerateFeaturesError(ValidationError):
    pass


class InsufficientSamplesError(ValidationError):
    pass


class EmptyPoolError(ValidationError):
    pass
