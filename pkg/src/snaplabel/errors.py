"""Exception taxonomy shared across the pipeline."""


class DomainError(ValueError):
    """Input violates a documented precondition or invariant."""


class FormatError(ValueError):
    """A file failed to parse under its declared format.

    Carries enough location info (path, line or byte offset) to find the
    offending record.
    """

    def __init__(self, message, path=None, line=None, offset=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if line is not None:
            loc.append(f"line {line}")
        if offset is not None:
            loc.append(f"byte {offset}")
        prefix = ":".join(loc)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.offset = offset


class ConfigError(ValueError):
    """Bad or inconsistent pipeline configuration."""


class TransportError(RuntimeError):
    """Detector provider unreachable or a request failed in transit (retryable)."""


class ProtocolError(ValueError):
    """Detector response violates the detection wire protocol.

    The message includes an excerpt of the offending payload.
    """

    @classmethod
    def from_payload(cls, message, payload):
        excerpt = repr(payload)
        if len(excerpt) > 200:
            excerpt = excerpt[:200] + "..."
        return cls(f"{message} (payload: {excerpt})")
