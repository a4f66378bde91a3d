from __future__ import annotations


class SketchSegError(Exception):
    pass


class DimensionError(SketchSegError, ValueError):
    """Shapes that an operation cannot combine."""

    def __init__(self, message: str, *shapes) -> None:
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class ContractError(SketchSegError, ValueError):
    pass


class ConfigError(SketchSegError, ValueError):
    pass


class DatasetLoadError(SketchSegError):
    pass


class DatasetShapeError(DatasetLoadError, DimensionError):
    pass


class GenerationError(SketchSegError):
    pass


class EmbeddingLoadError(SketchSegError):
    pass


class NumericError(SketchSegError, ArithmeticError):
    """A non-finite value appeared; `term` names the loss term or op that produced it."""

    def __init__(self, message: str, term: str | None = None) -> None:
        self.term = term
        if term:
            message = f"{message} (term: {term})"
        super().__init__(message)


class CheckpointError(SketchSegError):
    def __init__(self, message: str, parameter: str | None = None) -> None:
        self.parameter = parameter
        if parameter:
            message = f"{message} (parameter: {parameter})"
        super().__init__(message)


class EvaluationError(SketchSegError, ValueError):
    pass


__all__ = [
    "SketchSegError",
    "DimensionError",
    "ContractError",
    "ConfigError",
    "DatasetLoadError",
    "DatasetShapeError",
    "GenerationError",
    "EmbeddingLoadError",
    "NumericError",
    "CheckpointError",
    "EvaluationError",
]
