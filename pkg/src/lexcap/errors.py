"""Exception types shared across the toolkit."""


class LexcapError(Exception):
    """Base class for all toolkit errors."""


class FormatError(LexcapError):
    """A data file does not parse; carries the offending line number."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class LadderTruncatedError(LexcapError):
    """Frequency list too short for the full size ladder."""

    def __init__(self, available: int, achievable: list[int]):
        self.available = available
        self.achievable = achievable
        super().__init__(
            f"frequency list has only {available} entries; "
            f"achievable ladder sizes: {achievable}"
        )


class UnknownTokenError(LexcapError):
    """A context token is not part of the model's inventory."""

    def __init__(self, token: str):
        self.token = token
        super().__init__(f"unknown token in context: {token!r}")


class RetryableTransportError(LexcapError):
    """A remote call failed at the transport level and may be retried."""


class ProtocolError(LexcapError):
    """A remote endpoint returned a malformed or out-of-contract payload."""


class CorruptLogError(LexcapError):
    """A keystroke event stream is internally inconsistent."""


class NoCapacityError(LexcapError):
    """The assignment plan has no room for another session."""


class ConflictError(LexcapError):
    """A request targets a session or question that is not current."""


class IntegrityError(LexcapError):
    """A submitted response does not match the replayed keystroke log."""
