"""Exception hierarchy shared across the framework.

Every error carries a stable ``code`` string which is what appears in
wire-level error responses and task reports, so remote and local callers
see the same vocabulary.
"""


class CingalError(Exception):
    """Base class for all framework errors."""

    code = "Error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class MalformedDocument(CingalError):
    code = "MalformedDocument"


class SchemaViolation(CingalError):
    code = "SchemaViolation"


class DatumNotFound(CingalError):
    code = "DatumNotFound"


class KeyNotFound(CingalError):
    code = "KeyNotFound"


class NotBound(CingalError):
    code = "NotBound"


class CapabilityDenied(CingalError):
    code = "CapabilityDenied"


class DuplicateEntity(CingalError):
    code = "DuplicateEntity"


class EntityNotFound(CingalError):
    code = "EntityNotFound"


class UnknownEntity(CingalError):
    code = "UnknownEntity"


class BadSignature(CingalError):
    code = "BadSignature"


class InvalidKey(CingalError):
    code = "InvalidKey"


class PeerClosed(CingalError):
    code = "PeerClosed"


class FrameTooLarge(CingalError):
    code = "FrameTooLarge"


class NameAlreadyBound(CingalError):
    code = "NameAlreadyBound"


class NameNotBound(CingalError):
    code = "NameNotBound"


class ConnectFailed(CingalError):
    code = "ConnectFailed"


class UnknownEntryPoint(CingalError):
    code = "UnknownEntryPoint"


class DuplicateEntry(CingalError):
    code = "DuplicateEntry"


class ResourceExhausted(CingalError):
    code = "ResourceExhausted"


class PortInUse(CingalError):
    code = "PortInUse"


class CorruptState(CingalError):
    code = "CorruptState"


class DanglingReference(CingalError):
    code = "DanglingReference"


class ControlError(CingalError):
    """A machine-channel control request was rejected by the peer."""

    code = "ControlError"

    def __init__(self, error_code: str, message: str = ""):
        super().__init__(message or error_code)
        self.error_code = error_code


class PhaseFailed(CingalError):
    """A deployment phase failed on some node; ``record`` holds actual states."""

    code = "PhaseFailed"

    def __init__(self, phase: str, node: str, detail: str, record=None):
        super().__init__(f"phase:{phase} node:{node} {detail}")
        self.phase = phase
        self.node = node
        self.detail = detail
        self.record = record


class AssertionFailed(CingalError):
    """A scenario assertion failed at a given step."""

    code = "AssertionFailed"

    def __init__(self, step: int, detail: str):
        super().__init__(f"step {step}: {detail}")
        self.step = step
        self.detail = detail


# Maps wire-level error codes back to exception classes so remote errors
# re-raise as the same type the local API would have produced.
_CODE_MAP = {
    cls.code: cls
    for cls in [
        MalformedDocument, SchemaViolation, DatumNotFound, KeyNotFound,
        NotBound, CapabilityDenied, DuplicateEntity, EntityNotFound,
        UnknownEntity, BadSignature, InvalidKey, PeerClosed, FrameTooLarge,
        NameAlreadyBound, NameNotBound, ConnectFailed, UnknownEntryPoint,
        DuplicateEntry, ResourceExhausted, PortInUse, CorruptState,
        DanglingReference,
    ]
}


def error_for_code(code: str, message: str = "") -> CingalError:
    cls = _CODE_MAP.get(code)
    if cls is None:
        return ControlError(code, message)
    return cls(message)
