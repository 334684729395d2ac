"""Local Lipschitz bounds for certifiably robust feedforward networks."""

from liplocal.errors import ContractError, DomainError, FormatError, ParseError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DomainError",
    "FormatError",
    "ParseError",
    "ShapeError",
    "__version__",
]
