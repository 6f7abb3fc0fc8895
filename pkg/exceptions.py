"""Error types raised by the extremal dependence services.

Every error carries the process exit code the CLI reports for it.
"""


class TailDepError(Exception):
    exit_code = 1


class DataValidationError(TailDepError):
    """Invalid input, violated invariant or failed precondition"""
    exit_code = 2


class ConvergenceFailure(TailDepError):
    """Optimizer or root finder did not converge"""
    exit_code = 3


class DataIOError(TailDepError):
    """Unreadable input or missing prerequisite stage output"""
    exit_code = 4


class StageError(TailDepError):
    """A pipeline stage failed; keeps the exit code of the underlying error"""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, 'exit_code', 1)
        super().__init__(f"stage '{stage}' failed: {cause}")
