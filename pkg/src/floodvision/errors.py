"""Exception hierarchy shared across the package."""

from __future__ import annotations


class FloodVisionError(Exception):
    """Base class for every error raised by this package."""


# knowledge graph


class KgError(FloodVisionError):
    pass


class KgParseError(KgError):
    """The KG document is not well-formed JSON or lacks the required layout."""


class KgValidationError(KgError):
    """The KG document parsed but violates one or more graph invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations)
        super().__init__(f"{len(self.violations)} KG violation(s): {lines}")


class UnknownEntityError(KgError, KeyError):
    def __init__(self, entity_id: str):
        self.entity_id = entity_id
        super().__init__(f"unknown entity: {entity_id!r}")

    def __str__(self) -> str:
        return self.args[0]


class PendingEntryError(KgError, ValueError):
    """add_pending precondition failed."""


# VLM gateway


class VlmError(FloodVisionError):
    pass


class ImagePayloadError(VlmError, ValueError):
    pass


class TransportError(VlmError):
    """The backend could not be reached within the retry budget."""

    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempt(s))")


class BackendTimeoutError(TransportError):
    pass


class HttpStatusError(VlmError):
    def __init__(self, status: int, body: str, attempts: int = 1):
        self.status = status
        self.body = body
        self.attempts = attempts
        super().__init__(f"backend returned HTTP {status}: {body[:500]}")


class MissingFixtureError(VlmError, FileNotFoundError):
    def __init__(self, probed):
        self.probed = [str(p) for p in probed]
        super().__init__("no mock fixture found; probed " + ", ".join(self.probed))

    def __str__(self) -> str:
        return self.args[0]


class ObservationParseError(VlmError, ValueError):
    """Reply is not parseable JSON. Retryable by the orchestrator."""


class SchemaViolationError(ObservationParseError):
    """Reply parsed but does not satisfy the response schema."""

    def __init__(self, field: str, value, reason: str):
        self.field = field
        self.value = value
        self.reason = reason
        super().__init__(f"{field} {reason} (got {value!r})")


# depth engine / evaluation / simulation


class EmptyInputError(FloodVisionError, ValueError):
    pass


class ManifestError(FloodVisionError, ValueError):
    pass


class UndefinedCorrelationError(FloodVisionError, ArithmeticError):
    """Pearson r is undefined for n < 2 or zero variance."""


class SimConfigError(FloodVisionError, ValueError):
    pass


class InsufficientKgError(SimConfigError):
    pass


class ConfigError(FloodVisionError, ValueError):
    pass
