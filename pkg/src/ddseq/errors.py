"""Exception types shared across the package."""


class DdseqError(Exception):
    """Base class for all errors raised by this package."""


class NotSpdError(DdseqError):
    """Raised when a Cholesky factorization hits a non-positive pivot.

    The ``pivot_index`` attribute carries the offending row/column in the
    original (unpermuted) numbering.
    """

    def __init__(self, pivot_index):
        self.pivot_index = int(pivot_index)
        super().__init__(
            f"matrix not symmetric positive definite: "
            f"non-positive pivot at index {self.pivot_index}"
        )


class PencilNotDefiniteError(DdseqError):
    """Raised when the right-hand matrix of a symmetric pencil is not
    positive definite even after the regularization shift."""


class InsufficientCoarseDofsError(DdseqError):
    """Raised when a subdomain carries too few constraints for its local
    saddle-point system to be nonsingular."""

    def __init__(self, subdomain, detail=""):
        self.subdomain = int(subdomain)
        msg = f"insufficient coarse dofs on subdomain {self.subdomain}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class ConfigError(DdseqError):
    """Raised for unknown keys or malformed values in experiment configs."""


class ConvergenceError(DdseqError):
    """Raised when an iterative solve inside a larger algorithm fails and
    there is no sensible way to continue (e.g. a momentum substep)."""

    def __init__(self, msg, report=None):
        self.report = report
        super().__init__(msg)


class ContractError(DdseqError):
    """Raised when input data violates a documented precondition."""
