"""Exception types shared across the package."""


class EoslabError(Exception):
    """Base class for all package errors."""


class ShapeError(EoslabError, ValueError):
    pass


class NumericError(EoslabError, ArithmeticError):
    pass


class EncodingError(EoslabError, ValueError):
    def __init__(self, char: str, offset: int):
        super().__init__(f"unsupported character {char!r} at offset {offset}")
        self.char = char
        self.offset = offset


class SequenceLengthError(EoslabError, ValueError):
    pass


class EmptySequenceError(EoslabError, ValueError):
    pass


class InsufficientDataError(EoslabError):
    pass


class ParseError(EoslabError, ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class AlignmentError(EoslabError):
    def __init__(self, missing_in_preds, missing_in_refs):
        self.missing_in_preds = sorted(missing_in_preds)
        self.missing_in_refs = sorted(missing_in_refs)
        super().__init__(
            f"ids missing from predictions: {self.missing_in_preds}; "
            f"ids missing from references: {self.missing_in_refs}"
        )


class DivergenceError(EoslabError):
    def __init__(self, step: int, last_good: str | None):
        super().__init__(f"loss became non-finite at step {step}; last good checkpoint: {last_good}")
        self.step = step
        self.last_good = last_good
