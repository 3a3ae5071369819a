"""Exception hierarchy shared by every layer of the bridge.

Every error carries a stable ``code`` (the class name) so it can travel over
the RPC socket and be re-raised on the client side.
"""

from __future__ import annotations


class BridgeError(Exception):
    """Base class for all domain errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# manifest


class ManifestError(BridgeError):
    pass


class MalformedManifest(ManifestError):
    pass


class UnsupportedKind(ManifestError):
    pass


class MissingField(ManifestError):
    pass


class InvalidField(ManifestError):
    pass


class MalformedWalltime(ManifestError):
    pass


class MalformedDirective(ManifestError):
    pass


class UnknownVariable(ManifestError):
    pass


# registry / placement


class RegistryError(BridgeError):
    pass


class DuplicateQueue(RegistryError):
    pass


class NoSuchQueue(RegistryError):
    pass


class NoFeasibleQueue(RegistryError):
    def __init__(self, message: str, violations: list | None = None) -> None:
        super().__init__(message)
        self.violations = list(violations or [])


# backend


class BackendError(BridgeError):
    pass


class BackendUnavailable(BackendError):
    def __init__(self, message: str, stderr: str = "") -> None:
        super().__init__(message)
        self.stderr = stderr


class AdmissionRejected(BackendError):
    """The backend refused a submission because it exceeds queue limits."""


class WalltimeExceedsQueue(AdmissionRejected):
    pass


class NodesExceedQueue(AdmissionRejected):
    pass


class MalformedConfig(BridgeError):
    pass


# jobs


class NoSuchJob(BridgeError):
    pass


class DuplicateJob(BridgeError):
    pass


class IllegalTransition(BridgeError):
    def __init__(self, state, event) -> None:
        super().__init__(f"no transition from {state} on {event}")
        self.state = state
        self.event = event


# results transfer


class TransferError(BridgeError):
    pass


class SourceMissing(TransferError):
    pass


class DestinationUnwritable(TransferError):
    pass


# wire


class FrameError(BridgeError):
    pass


class MalformedFrame(FrameError):
    pass


class OversizedFrame(FrameError):
    pass


def error_class(code: str) -> type[BridgeError]:
    """Look up an error class by its ``code``; unknown codes map to BridgeError."""
    stack: list[type[BridgeError]] = [BridgeError]
    while stack:
        cls = stack.pop()
        if cls.__name__ == code:
            return cls
        stack.extend(cls.__subclasses__())
    return BridgeError
