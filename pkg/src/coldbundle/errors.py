"""Exception hierarchy shared by all modules.

ContractError-family exceptions map to CLI exit code 2, plain I/O
problems (OSError, FileNotFoundError) to exit code 1.
"""


class ColdBundleError(Exception):
    pass


class ContractError(ColdBundleError):
    """A precondition or invariant of an operation was violated."""


class ShapeError(ContractError):
    pass


class ParseError(ColdBundleError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class BoundsError(ContractError):
    pass


class DegenerateSplitError(ContractError):
    pass


class OrderingError(ContractError):
    """A pipeline stage was invoked before its prerequisite stage."""


class DivergenceError(ColdBundleError):
    """Training produced a non-finite loss or parameter."""
