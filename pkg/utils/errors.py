class LabelFusionError(Exception):
    """Base class for every error raised by the toolkit."""

    exit_code = 1


class ValidationError(LabelFusionError):
    """Bad arguments: out-of-range labels or decay, too few models, ..."""

    exit_code = 1


class ShapeMismatchError(ValidationError):
    """Volumes or parameter vectors that should line up don't."""

    exit_code = 1


class VolumeIOError(LabelFusionError):
    """A file could not be read or written."""

    exit_code = 2


class VolumeFormatError(VolumeIOError):
    """A file was read but its content is not what we accept."""

    exit_code = 2


def exit_code_for(exc):
    """Exit status for an exception escaping a flow: 1 validation, 2 I/O or format."""
    if isinstance(exc, LabelFusionError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return 2
    return 1
