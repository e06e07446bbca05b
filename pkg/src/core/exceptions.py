"""
Gradus QR v1.0 - Error Types
Single exception hierarchy for the rewriting-difficulty toolkit
"""

from typing import Any, Dict


class GradusError(Exception):
    """Base class for every error raised by the toolkit"""

    def __init__(self, message: str = "", **context: Any):
        super().__init__(message or self.__class__.__name__)
        self.message = message or self.__class__.__name__
        self.context = context

    def to_dict(self) -> Dict[str, Any]:
        """Machine-readable form used by the CLI on stderr"""
        payload = {"error": self.__class__.__name__, "message": self.message}
        payload.update({k: v for k, v in self.context.items() if v is not None})
        return payload


# Text metrics
class EmptyText(GradusError, ValueError):
    pass


class InvalidOrder(GradusError, ValueError):
    pass


# Corpus
class ParseError(GradusError, ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}", line=line)
        self.line = line


class SchemaError(GradusError, ValueError):
    def __init__(self, message: str, line: int, field: str = None):
        super().__init__(f"line {line}: {message}", line=line, field=field)
        self.line = line
        self.field = field


class ScoreRange(GradusError, ValueError):
    pass


class InvalidScheme(GradusError, ValueError):
    pass


class TooFewRecords(GradusError, ValueError):
    pass


class UnknownRecord(GradusError, KeyError):
    pass


class DuplicateRecord(GradusError, ValueError):
    def __init__(self, record_id: str):
        super().__init__(f"record '{record_id}' appears more than once", record_id=record_id)
        self.record_id = record_id


# Tensor core
class ShapeError(GradusError, ValueError):
    pass


class NotScalar(GradusError, ValueError):
    pass


class NondeterministicFunction(GradusError, RuntimeError):
    pass


# Model
class OOVToken(GradusError, ValueError):
    pass


class SequenceTooLong(GradusError, ValueError):
    pass


class ConfigError(GradusError, ValueError):
    pass


class IntegrityError(GradusError, RuntimeError):
    pass


# Training / ensembles
class EmptyCorpus(GradusError, ValueError):
    pass


class FrozenBaseViolated(GradusError, RuntimeError):
    pass


class FrozenModelViolated(GradusError, RuntimeError):
    pass


class MissingGoldLabel(GradusError, LookupError):
    pass


# Harness
class StageError(GradusError, RuntimeError):
    def __init__(self, stage: str, message: str = ""):
        super().__init__(message or f"stage '{stage}' failed", stage=stage)
        self.stage = stage


class EmptyClass(GradusError, ValueError):
    def __init__(self, index: int, label: str = None):
        super().__init__(f"class {index} has no records", index=index, label=label)
        self.index = index
        self.label = label
