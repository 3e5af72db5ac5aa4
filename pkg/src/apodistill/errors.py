"""Exception hierarchy shared by every module."""


class DistillError(Exception):
    """Base class for all package errors."""


# core
class ZeroProbabilityToken(DistillError):
    pass


class PredictiveMismatch(DistillError):
    pass


class AbsoluteContinuityViolation(DistillError):
    pass


class UnknownContext(DistillError, KeyError):
    pass


# teachers
class UnknownTeacherIndex(DistillError, IndexError):
    pass


# drift
class NoSharedContexts(DistillError):
    pass


class InsufficientHistory(DistillError):
    pass


# distill
class EmptyAlignmentSet(DistillError):
    pass


class ContextOverflow(DistillError):
    pass


# apo
class DivergenceDetected(DistillError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


# io
class ParseError(DistillError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SchemaError(DistillError):
    def __init__(self, message, line=None, missing=()):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
        self.missing = tuple(missing)


class HeterogeneousRows(DistillError):
    pass


class ManifestMismatch(DistillError):
    pass


# cli
class ConfigError(DistillError):
    pass


class VocabMismatch(DistillError):
    pass


class MissingStageArtifact(DistillError):
    pass
