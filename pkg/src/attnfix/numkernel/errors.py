class ContractError(ValueError):
    """A documented precondition was violated."""


class DimensionError(ContractError):
    """Tensor shapes do not line up."""


class NumericError(ArithmeticError):
    """NaN or Inf appeared where only finite values are allowed."""


class TapeReuseError(RuntimeError):
    """A tape was replayed or recorded on after its backward pass."""
