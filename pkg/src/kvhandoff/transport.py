"""Framed, CRC-checked CacheCard transfer over a reliable byte stream.

Frame layout (little-endian)::

    type     u8
    length   u32   payload byte count, at most 2**31
    payload  length bytes
    crc32    u32   over type, length and payload

A session opens with hello / hello_ack, carries card frames, and ends with
bye. Errors detected by the peer travel as error frames.
"""

from __future__ import annotations

import enum
import socket
import struct
import time
import zlib
from dataclasses import dataclass

from .cachecard import CacheCard, decode_card, encode_card
from .errors import (
    FrameChecksumError,
    FrameError,
    HandshakeRejected,
    OversizeFrameError,
    ParameterError,
    RemoteError,
    SessionClosed,
    SessionStateError,
    ShortReadError,
    UnknownFrameTypeError,
)
from .quantizer import BIT_WIDTHS

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 2**31

_HEAD = struct.Struct("<BI")
_CRC = struct.Struct("<I")


class FrameType(enum.IntEnum):
    HELLO = 1
    HELLO_ACK = 2
    CARD = 3
    ERROR = 4
    BYE = 5


class Reason(enum.IntEnum):
    """Handshake outcome codes carried in hello_ack."""

    ACCEPTED = 0
    VERSION_MISMATCH = 1
    MODEL_MISMATCH = 2


class ErrorCode(enum.IntEnum):
    PROTOCOL = 1
    CARD = 2


@dataclass(frozen=True)
class Frame:
    type: FrameType
    payload: bytes


def frame_encode(ftype, payload: bytes = b"") -> bytes:
    ftype = FrameType(ftype)
    if len(payload) > MAX_PAYLOAD:
        raise OversizeFrameError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    head = _HEAD.pack(int(ftype), len(payload))
    return head + payload + _CRC.pack(zlib.crc32(payload, zlib.crc32(head)))


def _read_exact(reader, size: int) -> bytes:
    """Read exactly ``size`` bytes from a file-like object or socket."""
    chunks, remaining = [], size
    recv = getattr(reader, "recv", None)
    while remaining:
        chunk = recv(min(remaining, 1 << 20)) if recv else reader.read(remaining)
        if not chunk:
            raise ShortReadError(f"stream ended {remaining} bytes short of a {size}-byte read")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def frame_decode(reader) -> Frame:
    """Read one frame; the stream is left positioned at the next frame."""
    head = _read_exact(reader, _HEAD.size)
    ftype, length = _HEAD.unpack(head)
    if length > MAX_PAYLOAD:
        raise OversizeFrameError(f"frame declares {length} payload bytes")
    if ftype not in FrameType._value2member_map_:
        raise UnknownFrameTypeError(f"unknown frame type {ftype}")
    payload = _read_exact(reader, length)
    (crc,) = _CRC.unpack(_read_exact(reader, _CRC.size))
    if zlib.crc32(payload, zlib.crc32(head)) != crc:
        raise FrameChecksumError("frame CRC32 mismatch")
    return Frame(FrameType(ftype), payload)


# -- handshake -------------------------------------------------------------------


def _put_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    if not 1 <= len(raw) <= 255:
        raise ParameterError("identifiers must be 1..255 UTF-8 bytes")
    return bytes([len(raw)]) + raw


class _Cursor:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FrameError("handshake payload truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def string(self) -> str:
        raw = self.take(self.take(1)[0])
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FrameError("handshake identifier is not UTF-8") from None


@dataclass(frozen=True)
class Handshake:
    agent_id: str
    model_id: str
    widths: tuple[int, ...] = BIT_WIDTHS
    version: int = PROTOCOL_VERSION

    def __post_init__(self):
        if not self.agent_id or not self.model_id:
            raise ParameterError("handshake ids must be non-empty")
        if not set(self.widths) <= set(BIT_WIDTHS):
            raise ParameterError(f"widths must come from {BIT_WIDTHS}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    def to_bytes(self) -> bytes:
        return (struct.pack("<H", self.version) + _put_str(self.agent_id)
                + _put_str(self.model_id) + bytes([len(self.widths), *self.widths]))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Handshake":
        cur = _Cursor(data)
        (version,) = struct.unpack("<H", cur.take(2))
        agent, model = cur.string(), cur.string()
        widths = tuple(cur.take(cur.take(1)[0]))
        if cur.pos != len(data):
            raise FrameError("trailing bytes in handshake")
        try:
            return cls(agent, model, widths, version)
        except ParameterError as exc:
            raise FrameError(f"malformed handshake: {exc}") from None


@dataclass(frozen=True)
class SessionDescriptor:
    local: Handshake
    remote: Handshake
    version: int
    model_id: str
    widths: tuple[int, ...]


def negotiate(local: Handshake, remote: Handshake) -> SessionDescriptor:
    """Accept iff protocol versions and model ids agree."""
    if local.version != remote.version:
        raise HandshakeRejected(Reason.VERSION_MISMATCH,
                                f"protocol {local.version} vs {remote.version}")
    if local.model_id != remote.model_id:
        raise HandshakeRejected(Reason.MODEL_MISMATCH,
                                f"model {local.model_id!r} vs {remote.model_id!r}")
    widths = tuple(w for w in local.widths if w in remote.widths)
    return SessionDescriptor(local, remote, local.version, local.model_id, widths)


handshake_exchange = negotiate


def _reason_of(local: Handshake, remote: Handshake) -> Reason:
    try:
        negotiate(local, remote)
    except HandshakeRejected as exc:
        return exc.reason
    return Reason.ACCEPTED


# -- sessions --------------------------------------------------------------------


class Session:
    """One handoff session over a stream.

    ``reader`` needs ``read(n)`` or ``recv(n)``; ``writer`` needs ``write`` or
    ``sendall``. A connected socket can serve as both.
    """

    def __init__(self, reader, writer, local: Handshake):
        self._reader = reader
        self._writer = writer
        self.local = local
        self.descriptor: SessionDescriptor | None = None
        self.closed = False
        self.last_transfer_ms = 0.0

    @classmethod
    def over_socket(cls, sock: socket.socket, local: Handshake) -> "Session":
        return cls(sock, sock, local)

    def _write(self, data: bytes) -> int:
        send = getattr(self._writer, "sendall", None)
        if send:
            send(data)
        else:
            self._writer.write(data)
            flush = getattr(self._writer, "flush", None)
            if flush:
                flush()
        return len(data)

    def _send(self, ftype: FrameType, payload: bytes = b"") -> int:
        return self._write(frame_encode(ftype, payload))

    def _expect(self, *types: FrameType) -> Frame:
        frame = frame_decode(self._reader)
        if frame.type == FrameType.ERROR:
            code = frame.payload[0] if frame.payload else 0
            raise RemoteError(code, frame.payload[1:].decode("utf-8", "replace"))
        if frame.type == FrameType.BYE and FrameType.BYE not in types:
            self.closed = True
            raise SessionClosed("peer closed the session")
        if frame.type not in types:
            raise SessionStateError(f"expected {[t.name for t in types]}, got {frame.type.name}")
        return frame

    def connect(self) -> SessionDescriptor:
        """Initiator side: send hello, wait for hello_ack."""
        self._send(FrameType.HELLO, self.local.to_bytes())
        frame = self._expect(FrameType.HELLO_ACK)
        if not frame.payload:
            raise FrameError("empty hello_ack")
        status = frame.payload[0]
        remote = Handshake.from_bytes(frame.payload[1:])
        if status != Reason.ACCEPTED:
            raise HandshakeRejected(Reason(status), f"peer {remote.agent_id!r} (model {remote.model_id!r}, "
                                    f"protocol {remote.version}) rejected the handshake")
        self.descriptor = negotiate(self.local, remote)
        return self.descriptor

    def accept(self) -> SessionDescriptor:
        """Responder side: wait for hello, answer with hello_ack."""
        remote = Handshake.from_bytes(self._expect(FrameType.HELLO).payload)
        reason = _reason_of(self.local, remote)
        self._send(FrameType.HELLO_ACK, bytes([reason]) + self.local.to_bytes())
        self.descriptor = negotiate(self.local, remote)
        return self.descriptor

    def _require_open(self) -> None:
        if self.closed:
            raise SessionStateError("session is closed")
        if self.descriptor is None:
            raise SessionStateError("handshake has not completed")

    def send_card(self, card: CacheCard) -> int:
        self._require_open()
        if card.model_id != self.descriptor.model_id:
            raise SessionStateError(f"card model {card.model_id!r} does not match the session")
        t0 = time.perf_counter()
        sent = self._send(FrameType.CARD, encode_card(card))
        self.last_transfer_ms = (time.perf_counter() - t0) * 1000.0
        return sent

    def receive_card(self) -> CacheCard:
        """Next card from the peer; card decode failures propagate as format errors."""
        self._require_open()
        t0 = time.perf_counter()
        frame = self._expect(FrameType.CARD)
        self.last_transfer_ms = (time.perf_counter() - t0) * 1000.0
        return decode_card(frame.payload)

    def send_error(self, code: ErrorCode, message: str) -> int:
        return self._send(FrameType.ERROR, bytes([code]) + message.encode("utf-8"))

    def close(self) -> None:
        if not self.closed:
            self._send(FrameType.BYE)
            self.closed = True

    def wait_bye(self) -> None:
        self._expect(FrameType.BYE)
        self.closed = True
