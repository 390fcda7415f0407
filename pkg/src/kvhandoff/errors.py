"""Exception hierarchy.

Every error raised by the package derives from :class:`KVHandoffError`.
Decode failures of the on-disk/wire formats derive from :class:`FormatError`;
framing and session failures derive from :class:`ProtocolError`, so a
corrupted card inside an intact frame is distinguishable from a corrupted
frame.
"""


class KVHandoffError(Exception):
    """Base class for all package errors."""


class ParameterError(KVHandoffError, ValueError):
    """An argument or configuration value is out of its legal range."""


class DimensionError(KVHandoffError, ValueError):
    """Array shapes or lengths disagree."""


class SizeError(KVHandoffError, ValueError):
    """A requested tensor exceeds the configured element cap."""


class DataError(KVHandoffError, ValueError):
    """Input data is unusable (non-finite values, zero-norm vectors)."""


class CodeRangeError(KVHandoffError, ValueError):
    """An integer code does not fit in the requested bit width."""


class ModelError(KVHandoffError):
    """Controller weights are malformed or non-finite."""


class CompatibilityError(KVHandoffError):
    """A card was produced for a different model than the receiver."""


class TopologyError(KVHandoffError):
    """The agent graph is malformed or unsupported for the operation."""


class FormatError(KVHandoffError):
    """Base class for binary decode failures."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class PayloadSizeError(FormatError):
    """Payload length disagrees with the dimensions declared in the header."""


class ProtocolError(KVHandoffError):
    """Base class for transport failures."""


class FrameError(ProtocolError):
    pass


class FrameChecksumError(FrameError):
    pass


class OversizeFrameError(FrameError):
    pass


class UnknownFrameTypeError(FrameError):
    pass


class ShortReadError(FrameError):
    pass


class SessionStateError(ProtocolError):
    pass


class SessionClosed(ProtocolError):
    """The peer sent ``bye``."""


class RemoteError(ProtocolError):
    """The peer answered with an ``error`` frame."""

    def __init__(self, code: int, message: str):
        super().__init__(f"remote error {code}: {message}")
        self.code = code
        self.message = message


class HandshakeRejected(ProtocolError):
    """Handshake failed; ``reason`` is a :class:`kvhandoff.transport.Reason`."""

    def __init__(self, reason, message: str = ""):
        name = getattr(reason, "name", reason)
        super().__init__(f"handshake rejected ({name}): {message}" if message else f"handshake rejected ({name})")
        self.reason = reason
