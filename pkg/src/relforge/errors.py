"""Exception hierarchy shared across the pipeline."""


class RelforgeError(Exception):
    """Base class for all errors raised by relforge."""


class SchemaError(RelforgeError):
    """A structured input is missing a required field or has the wrong shape."""

    def __init__(self, source, field, message=None, line=None):
        self.source = str(source)
        self.field = field
        self.line = line
        where = self.source if line is None else f"{self.source}:{line}"
        super().__init__(message or f"{where}: missing or invalid field {field!r}")


class ConfigError(RelforgeError):
    """Run configuration is invalid."""


class ClientError(RelforgeError):
    """Transport or authentication failure talking to the chat endpoint."""

    def __init__(self, message, attempts=0, last_error=None):
        self.attempts = attempts
        self.last_error = last_error
        super().__init__(message)
