"""Exception hierarchy shared by every stage of the pipeline."""


class FsslError(Exception):
    """Base class for all package errors."""


class EmptyFlow(FsslError):
    pass


class NonPositiveLength(FsslError):
    pass


class ParseError(FsslError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidProfile(FsslError):
    pass


class ShapeMismatch(FsslError, ValueError):
    pass


class NumericError(FsslError, FloatingPointError):
    pass


class InvalidClassCount(FsslError, ValueError):
    pass


class ArchitectureMismatch(FsslError):
    pass


class FormatError(FsslError):
    pass


class EmptyClientDataset(FsslError):
    pass


class DegenerateLabels(FsslError):
    pass


class LengthMismatch(FsslError, ValueError):
    pass


class LabelOutOfRange(FsslError, ValueError):
    pass


class EmptyMatrix(FsslError, ValueError):
    pass


class EmptyTestSet(FsslError, ValueError):
    pass


class ConfigError(FsslError, ValueError):
    pass


class StageError(FsslError):
    """Wraps an error raised inside a pipeline stage with the stage name."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
