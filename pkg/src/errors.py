"""Exception types shared across the toolkit."""

from typing import Optional


class FormatError(ValueError):
    """Raised when an input file cannot be parsed.

    Args:
        message (str): What is wrong.
        path (str, optional): File being read.
        line (int, optional): 1-based line number of the problem.
        byte_offset (int, optional): Byte offset of the problem.
    """

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        line: Optional[int] = None,
        byte_offset: Optional[int] = None,
    ):
        self.path = path
        self.line = line
        self.byte_offset = byte_offset
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if byte_offset is not None:
            where.append(f"byte {byte_offset}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class EstimationError(RuntimeError):
    """Raised when a numeric estimator cannot produce a usable result."""
