from enum import IntEnum
from pathlib import Path


class ExitCode(IntEnum):
    """
    Process exit codes of the command line tool.

    SUCCESS: The command finished.
    CONFIG: The configuration file or a flag is invalid.
    NUMERIC: A contract or numeric domain check failed.
    IO: An asset could not be read or written.
    """

    SUCCESS = 0
    CONFIG = 2
    NUMERIC = 3
    IO = 4


class FaceFitError(Exception):
    exit_code: ExitCode = ExitCode.NUMERIC


class ContractViolation(FaceFitError, ValueError):
    exit_code = ExitCode.NUMERIC


class DomainError(FaceFitError, ArithmeticError):
    exit_code = ExitCode.NUMERIC


class ConfigError(FaceFitError):
    exit_code = ExitCode.CONFIG


class AssetIOError(FaceFitError, OSError):
    exit_code = ExitCode.IO

    def __init__(self, path: str | Path, reason: str) -> None:
        super().__init__(f"{path}: {reason}")
        self.path: Path = Path(path)
        self.reason: str = reason
