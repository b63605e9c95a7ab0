"""Exception hierarchy shared across the package."""


class GaitSTRError(Exception):
    """Base class for all package errors."""


class InvalidInputError(GaitSTRError, ValueError):
    """Shapes, tags or values do not satisfy an operation's contract."""


class DegeneratePoseError(InvalidInputError):
    """A frame has zero vertical extent and cannot be normalized."""


class InsufficientFramesError(InvalidInputError):
    pass


class GeometryError(InvalidInputError):
    """Encoder geometry is inconsistent (e.g. indivisible pooling strips)."""


class InvalidBatchError(InvalidInputError):
    """A batch cannot form any anchor/positive/negative triplet."""


class ProtocolError(GaitSTRError):
    """An evaluation protocol cannot be satisfied by the given split."""


class ConfigError(GaitSTRError, ValueError):
    pass


class TrainingDivergedError(GaitSTRError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
