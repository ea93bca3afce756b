"""Exception hierarchy shared by every poolleak module."""


class PoolLeakError(Exception):
    """Base class for all library errors."""


class LengthMismatch(PoolLeakError, ValueError):
    pass


class OutOfBounds(PoolLeakError, IndexError):
    pass


class RankError(PoolLeakError, ValueError):
    pass


class ShapeMismatch(PoolLeakError, ValueError):
    pass


class ShapeError(ShapeMismatch):
    """Shape inference failed, e.g. a pooling window no longer fits."""


class AlignmentError(PoolLeakError, ValueError):
    pass


class InsufficientInputs(PoolLeakError, ValueError):
    pass


class EmptyInput(PoolLeakError, ValueError):
    pass


class LengthError(PoolLeakError, ValueError):
    pass


class RangeError(PoolLeakError, ValueError):
    pass


class MissingData(PoolLeakError, KeyError):
    pass


class DegenerateInput(PoolLeakError, ValueError):
    pass


class TooFewRows(PoolLeakError, ValueError):
    pass


class FormatError(PoolLeakError, ValueError):
    """A serialized artifact could not be decoded."""


class ParseError(PoolLeakError, ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ValidationError(PoolLeakError, ValueError):
    pass
