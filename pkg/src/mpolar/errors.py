"""Exception hierarchy shared across the toolkit."""


class MpolarError(Exception):
    """Base class for all toolkit errors."""


class FormatError(MpolarError):
    """Container or file does not follow the expected layout."""


class CorruptionError(FormatError):
    """Container header and payload disagree (truncated or padded file)."""


class UnsupportedDtypeError(FormatError):
    """Container declares a dtype outside the supported set."""


class ParameterError(MpolarError, ValueError):
    """A scalar argument is outside its documented domain."""


class CalibrationError(MpolarError):
    """Calibration data is missing, malformed or unusable."""


class ManifestError(MpolarError):
    """Weight manifest failed validation; message names the offending layer."""


class MetricError(MpolarError):
    """A score is undefined for the given inputs (empty mask, zero range)."""
