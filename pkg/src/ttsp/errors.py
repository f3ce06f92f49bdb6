"""Exception hierarchy for the TTSP engine."""


class TTSPError(Exception):
    """Base class for all engine errors."""


class ConfigError(TTSPError, ValueError):
    """Invalid run configuration or CLI/config-file value."""


class DegenerateBox(TTSPError, ValueError):
    """Bounding box has (near) zero area after clamping."""


class TinyRegion(TTSPError, ValueError):
    """Crop region cannot be expanded to the minimum pixel size."""


class BadImageIndex(TTSPError, IndexError):
    """Tool call referenced an image that does not exist in the trace."""


class EmptyTrace(TTSPError, ValueError):
    """Reliability requested for a trace without generated tokens."""


class NoVotes(TTSPError):
    """No trace carried a parseable answer."""


class InvalidTransition(TTSPError):
    """Memory transition violates the two-tier contract."""


class MissingBinding(TTSPError, KeyError):
    """Prompt assembly was missing placeholder bindings."""

    def __init__(self, template: str, missing):
        self.template = template
        self.missing = sorted(missing)
        super().__init__(f"template {template!r} missing bindings: {', '.join(self.missing)}")

    def __str__(self):
        return self.args[0]


class TemplateError(TTSPError, ValueError):
    """Template text references placeholders it does not declare."""


class RoundFailed(TTSPError):
    """Every rollout of a round degraded."""


class AllRoundsFailed(TTSPError):
    """No round produced a completed trace."""


# backend


class BackendError(TTSPError):
    """Base class for transport / model endpoint failures."""


class EndpointUnavailable(BackendError):
    pass


class MissingLogprobs(BackendError):
    pass


class MalformedToolCall(BackendError):
    pass


class ContextOverflow(BackendError):
    pass


# harness


class ParseError(TTSPError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class MissingImage(TTSPError, FileNotFoundError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"image not found or unreadable: {self.path}")

    def __str__(self):
        return self.args[0]
