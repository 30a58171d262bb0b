"""Exception hierarchy shared by every mergeforge module."""


class MergeForgeError(Exception):
    """Base class for all mergeforge errors."""


class ContractViolation(MergeForgeError, ValueError):
    """A precondition of an operation does not hold (bad shape, bad range...)."""


class ManifestMismatch(ContractViolation):
    """Two parameter sets do not share names and shapes."""


class UnknownRuleError(ContractViolation):
    """A task rule or transformation name is not registered."""


class DegenerateTaskError(ContractViolation):
    """A task cannot be normalised, e.g. its fine-tuned score is zero."""

    def __init__(self, task_id, message=None):
        self.task_id = task_id
        super().__init__(message or "degenerate task: {}".format(task_id))


class NumericError(MergeForgeError, ArithmeticError):
    """A NaN or infinite value showed up where a finite one is required."""


class ConvergenceError(NumericError):
    """An iterative procedure hit its iteration limit."""
