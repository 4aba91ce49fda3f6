"""Exception types shared across the package."""


class FedLabError(Exception):
    """Base class for all errors raised by fedlab."""


class InvalidInput(FedLabError, ValueError):
    pass


class Unsupported(FedLabError):
    pass


class ParseError(FedLabError):
    """Malformed input file. ``location`` names the file and offset/line."""

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{location}: {message}"
        super().__init__(message)


class ConfigError(FedLabError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericalDivergence(FedLabError):
    """A non-finite iterate appeared; carries where it happened."""

    def __init__(self, message, round=None, step=None, client=None):
        self.round = round
        self.step = step
        self.client = client
        where = ", ".join(
            f"{k}={v}" for k, v in (("round", round), ("step", step), ("client", client))
            if v is not None
        )
        super().__init__(f"{message} ({where})" if where else message)
