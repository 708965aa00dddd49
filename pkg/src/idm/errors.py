"""Shared exception hierarchy for the pipeline."""


class IdmError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(IdmError):
    """Invalid or unresolvable configuration."""


class GatewayError(IdmError):
    """Backend-unavailable or transport-level failure."""


class ScriptExhausted(GatewayError):
    """The scripted backend has no reply left for a routing key."""


class NoParsableScore(IdmError):
    """No completion contained a value from the score scale."""


class DegenerateScale(IdmError):
    """Score scale with max == min cannot be normalized."""


class StageError(IdmError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
