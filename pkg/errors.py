from enum import Enum


class ErrorCode(Enum):
    """
    An enumeration of pipeline error conditions and their corresponding messages.

    This class provides a centralized way to report and format failures.
    Each enum member represents a specific error condition, including:
    - The process exit status the CLI returns for it.
    - A descriptive error message (which can be dynamically formatted).

    Usage:
    - Raise a `ReportGenError` subclass; it carries one of these members.
    - Use the `format_message` method to dynamically insert values into error messages.
    """
    OK = (0, "OK")
    INTERNAL = (1, "Internal error: {}")
    DIMENSION = (3, "Dimension mismatch: {}")
    CONTRACT = (4, "Contract violated: {}")
    DEGENERATE_BATCH = (5, "Degenerate batch: {}")
    EMPTY_CORPUS = (6, "Empty corpus: {}")
    VOCAB_FORMAT = (7, "Malformed vocab file: {}")
    ID_RANGE = (8, "Id out of range: {}")
    SEQUENCE_LENGTH = (9, "Sequence too long: {}")
    DEGENERATE_SAMPLE = (10, "Degenerate sample: {}")
    DIVERGENCE = (11, "Training diverged: {}")
    DEGENERATE_IDF = (12, "Degenerate IDF: {}")
    LENGTH_MISMATCH = (13, "Length mismatch: {}")
    LAYOUT = (14, "Ontology layout error: {}")
    CHECKPOINT = (15, "Malformed checkpoint: {}")
    CONFIG = (16, "Invalid configuration: {}")
    FILE_FORMAT = (17, "Malformed file: {}")
    MISSING_PATH = (18, "Path does not exist: {}")

    def __init__(self, exit_code, message):
        self.exit_code = exit_code
        self.message = message

    def format_message(self, *args):
        """Dynamically formats the error message with provided arguments."""
        if not args:
            return self.message
        return self.message.format(*args)


class ReportGenError(Exception):
    """
    Base class of every error raised by the report generation pipeline.

    Attributes:
        code (ErrorCode): The error condition, which also fixes the CLI exit status.
        detail (str): Human readable detail inserted into the code's message template.
        path (str, optional): The file the error refers to.
        offset (int, optional): Line number or byte offset inside `path`.
    """
    code = ErrorCode.INTERNAL

    def __init__(self, detail="", path=None, offset=None):
        self.detail = detail
        self.path = path
        self.offset = offset
        super().__init__(self.code.format_message(detail))

    def one_line(self):
        """Renders the error as a single machine-parsable line."""
        message = str(self).replace("\n", " ")
        line = f"error code={self.code.name} exit={self.code.exit_code} message={message}"
        if self.path is not None:
            line += f" path={self.path}"
        if self.offset is not None:
            line += f" offset={self.offset}"
        return line


class DimensionError(ReportGenError, ValueError):
    code = ErrorCode.DIMENSION


class ContractError(ReportGenError, ValueError):
    code = ErrorCode.CONTRACT


class DegenerateBatchError(ReportGenError, ValueError):
    code = ErrorCode.DEGENERATE_BATCH


class EmptyCorpusError(ReportGenError, ValueError):
    code = ErrorCode.EMPTY_CORPUS


class VocabFormatError(ReportGenError, ValueError):
    code = ErrorCode.VOCAB_FORMAT


class IdRangeError(ReportGenError, IndexError):
    code = ErrorCode.ID_RANGE


class SequenceLengthError(ReportGenError, ValueError):
    code = ErrorCode.SEQUENCE_LENGTH


class DegenerateSampleError(ReportGenError, ValueError):
    code = ErrorCode.DEGENERATE_SAMPLE


class DivergenceError(ReportGenError, ArithmeticError):
    """Raised when a batch produces a non-finite loss."""
    code = ErrorCode.DIVERGENCE

    def __init__(self, batch_index, detail=""):
        self.batch_index = batch_index
        super().__init__(f"batch {batch_index}: {detail}" if detail else f"batch {batch_index}")


class DegenerateIdfError(ReportGenError, ValueError):
    code = ErrorCode.DEGENERATE_IDF


class LengthMismatchError(ReportGenError, ValueError):
    code = ErrorCode.LENGTH_MISMATCH


class LayoutError(ReportGenError, ValueError):
    code = ErrorCode.LAYOUT


class CheckpointError(ReportGenError, ValueError):
    code = ErrorCode.CHECKPOINT


class ConfigError(ReportGenError, ValueError):
    code = ErrorCode.CONFIG


class FileFormatError(ReportGenError, ValueError):
    code = ErrorCode.FILE_FORMAT


class MissingPathError(ReportGenError, FileNotFoundError):
    code = ErrorCode.MISSING_PATH
