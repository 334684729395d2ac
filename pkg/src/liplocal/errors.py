class ShapeError(ValueError):
    """Operand shapes do not compose."""


class DomainError(ValueError):
    """Argument outside its mathematical domain (e.g. negative radius)."""


class ContractError(ValueError):
    """Caller broke a precondition that is not a shape or domain issue."""


class ParseError(ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class FormatError(ValueError):
    """Malformed binary or text file. ``offset`` is the byte/line position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
