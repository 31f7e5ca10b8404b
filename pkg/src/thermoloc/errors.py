"""Exception hierarchy.

Everything deriving from ``ValidationError`` maps to CLI exit code 2;
``TrainingDivergenceError`` maps to exit code 3.
"""


class ThermoLocError(Exception):
    pass


class ValidationError(ThermoLocError, ValueError):
    pass


class InvalidParameterError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class DegenerateQuaternionError(ValidationError):
    pass


class InvalidQuaternionError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class MissingAssetError(ValidationError, FileNotFoundError):
    pass


class DataIntegrityError(ValidationError):
    pass


class EmptySequenceError(ValidationError):
    pass


class TrainingDivergenceError(ThermoLocError, RuntimeError):
    def __init__(self, message, epoch=None, checkpoint=None):
        super().__init__(message)
        self.epoch = epoch
        self.checkpoint = checkpoint
