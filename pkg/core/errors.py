from typing import Optional


class HDCError(Exception):
    """Base error. Carries the process exit code the CLI reports for it."""

    exit_code: int = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class VerificationError(HDCError):
    exit_code = 1


class ContractError(HDCError, ValueError):
    """A precondition of an operation was violated by its caller."""

    exit_code = 2


class UsageError(HDCError):
    exit_code = 2


class FormatError(HDCError):
    """A file was readable but its bytes do not follow the expected format."""

    exit_code = 3

    def __init__(self, detail: str, offset: Optional[int] = None, path: Optional[str] = None):
        where = []
        if path is not None:
            where.append(f"path={path}")
        if offset is not None:
            where.append(f"offset={offset}")
        if where:
            detail = f"{detail} ({', '.join(where)})"
        super().__init__(detail)
        self.offset = offset
        self.path = path


class DataIOError(HDCError, OSError):
    exit_code = 3


class NumericError(HDCError, ArithmeticError):
    exit_code = 4
