"""Exception hierarchy shared by every dhl module."""


class DhlError(Exception):
    """Base class for all library errors."""


class ShapeError(DhlError, ValueError):
    pass


class NumericOverflowError(DhlError, ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class NonScalarRootError(DhlError, ValueError):
    pass


class DataError(DhlError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class LengthMismatchError(DataError):
    def __init__(self, dialog_id: str, lengths: dict):
        detail = ", ".join(f"{k}={v}" for k, v in lengths.items())
        super().__init__(f"dialog {dialog_id!r}: goal sequences differ in length ({detail})")
        self.dialog_id = dialog_id


class SequenceTooShortError(DataError):
    def __init__(self, dialog_id: str, length: int):
        super().__init__(f"dialog {dialog_id!r}: needs at least 2 goals, got {length}")
        self.dialog_id = dialog_id


class VocabularyError(DataError):
    """Unknown goal names or ids outside a vocabulary."""


class FractionSumError(DataError):
    pass


class DegenerateGradientError(DhlError, ArithmeticError):
    pass


class CheckpointError(DhlError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class MagicMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeTableError(CheckpointError):
    def __init__(self, name: str, message: str):
        super().__init__(f"tensor {name!r}: {message}")
        self.name = name


class NonFiniteTensorError(CheckpointError, ValueError):
    def __init__(self, name: str):
        super().__init__(f"tensor {name!r} contains NaN or Inf; refusing to save")
        self.name = name
