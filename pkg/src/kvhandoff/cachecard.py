"""CacheCard: the self-contained quantized handoff artifact and its QKVC encoding.

QKVC layout (little-endian, no padding)::

    magic            4   b"QKVC"
    version          u16 (1)
    flags            u16 (0)
    model_id         u8 length + UTF-8 bytes
    sender_id        u8 length + UTF-8 bytes
    L, H, n, d       4 x u32
    group_size       u16
    reserved         u16 (0)
    position_offset  i32 (carried verbatim)
    token_bits       n x u8
    average_bits     f64
    payload_bytes    u64
    fp16_equiv_bytes u64
    compression      f64
    payload          key section then value section (see kvhandoff.quantizer)
    crc32            u32 over every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    DimensionError,
    FormatError,
    ParameterError,
    PayloadSizeError,
    TruncatedError,
    UnsupportedVersionError,
)
from .quantizer import BIT_WIDTHS, QuantizedKV, payload_size, quantized_from_payload

QKVC_MAGIC = b"QKVC"
QKVC_VERSION = 1

_DIMS = struct.Struct("<IIIIHHi")
_STATS = struct.Struct("<dQQd")
_CRC = struct.Struct("<I")

#: Bytes per element used for the FP16-equivalent size.
FP16_BYTES = 2


@dataclass(frozen=True)
class CardStats:
    average_bits: float
    payload_bytes: int
    fp16_equivalent_bytes: int
    compression_ratio: float


@dataclass(frozen=True)
class CacheCard:
    model_id: str
    sender_id: str
    quantized: QuantizedKV
    stats: CardStats
    position_offset: int = 0
    version: int = QKVC_VERSION

    @property
    def token_bits(self) -> np.ndarray:
        return self.quantized.token_bits

    @property
    def sequence_length(self) -> int:
        return self.quantized.shape[2]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.quantized.shape


def fp16_equivalent_bytes(layers: int, heads: int, tokens: int, head_dim: int) -> int:
    """``2 * L * H * n * d * 2``: keys and values at two bytes per element."""
    return 2 * layers * heads * tokens * head_dim * FP16_BYTES


def compute_stats(q: QuantizedKV) -> CardStats:
    L, H, n, d = q.shape
    payload = q.payload_nbytes()
    fp16 = fp16_equivalent_bytes(L, H, n, d)
    return CardStats(q.average_bits, payload, fp16, payload / fp16)


def _check_id(name: str, value: str) -> bytes:
    raw = value.encode("utf-8")
    if len(raw) > 255:
        raise ParameterError(f"{name} is {len(raw)} bytes, limit 255")
    return raw


def build_card(q: QuantizedKV, model_id: str, sender_id: str, position_offset: int = 0) -> CacheCard:
    _check_id("model_id", model_id)
    _check_id("sender_id", sender_id)
    if q.shape[2] < 1:
        raise ParameterError("a card needs at least one token")
    if not -(2**31) <= position_offset < 2**31:
        raise ParameterError("position offset must fit in a signed 32-bit integer")
    return CacheCard(model_id, sender_id, q, compute_stats(q), int(position_offset))


def card_stats(card: CacheCard) -> CardStats:
    return card.stats


def encode_card(card: CacheCard) -> bytes:
    q = card.quantized
    L, H, n, d = q.shape
    parts = [QKVC_MAGIC, struct.pack("<HH", card.version, 0)]
    for name in ("model_id", "sender_id"):
        raw = _check_id(name, getattr(card, name))
        parts += [bytes([len(raw)]), raw]
    parts.append(_DIMS.pack(L, H, n, d, q.group_size, 0, card.position_offset))
    parts.append(q.token_bits.astype(np.uint8).tobytes())
    s = card.stats
    parts.append(_STATS.pack(s.average_bits, s.payload_bytes, s.fp16_equivalent_bytes,
                             s.compression_ratio))
    parts.append(q.to_payload())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.pos = 0
        self.end = end

    def take(self, size: int) -> bytes:
        if self.pos + size > self.end:
            raise TruncatedError(f"card truncated at offset {self.pos} (needed {size} bytes)")
        out = self.data[self.pos:self.pos + size]
        self.pos += size
        return out

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))


def decode_card(data: bytes) -> CacheCard:
    """Decode a QKVC byte string.

    The header is parsed first so a short buffer reports truncation; the
    CRC is verified before any payload is interpreted.
    """
    data = bytes(data)
    if len(data) < 4:
        raise TruncatedError("card shorter than its magic")
    if data[:4] != QKVC_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {QKVC_MAGIC!r}")
    r = _Reader(data, len(data))
    r.take(4)
    version, _flags = r.unpack(struct.Struct("<HH"))
    if version != QKVC_VERSION:
        raise UnsupportedVersionError(f"QKVC version {version} not supported")
    raw_ids = []
    for _ in range(2):
        (length,) = r.take(1)
        raw_ids.append(r.take(length))
    L, H, n, d, group_size, _, offset = r.unpack(_DIMS)
    token_raw = r.take(n)
    stats_raw = r.take(_STATS.size)
    header_end = r.pos
    token_bits = np.frombuffer(token_raw, dtype=np.uint8)
    valid_bits = np.isin(token_bits, BIT_WIDTHS).all()
    if min(L, H, n, d, group_size) >= 1 and valid_bits:
        expected = header_end + payload_size((L, H, n, d), token_bits, group_size) + _CRC.size
        if len(data) < expected:
            raise TruncatedError(f"card has {len(data)} bytes, header implies {expected}")
        if len(data) > expected:
            raise PayloadSizeError(f"{len(data) - expected} trailing bytes after the card")
    (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if len(data) < header_end + _CRC.size or zlib.crc32(data[:-_CRC.size]) != crc:
        raise ChecksumError("card CRC32 mismatch")
    if min(L, H, n, d, group_size) < 1:
        raise DimensionError(f"card declares empty dimension {(L, H, n, d, group_size)}")
    if not valid_bits:
        raise FormatError("token bit widths outside {2, 4, 8, 16}")
    try:
        ids = [raw.decode("utf-8") for raw in raw_ids]
    except UnicodeDecodeError as exc:
        raise FormatError(f"identifier is not UTF-8: {exc}") from None
    payload = data[header_end:len(data) - _CRC.size]
    q = quantized_from_payload((L, H, n, d), token_bits, group_size, payload)
    stats = CardStats(*_STATS.unpack(stats_raw))
    if stats != compute_stats(q):
        raise FormatError("stored statistics disagree with the payload")
    return CacheCard(ids[0], ids[1], q, stats, offset, version)
