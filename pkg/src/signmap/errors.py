"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition or value range."""


class ParseError(ValidationError):
    """A file could not be parsed; carries the offending location."""

    def __init__(self, message: str, path=None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + message)
        self.path = path
        self.line = line
