"""Group-wise asymmetric uniform quantization of KV caches.

Keys are grouped per channel (runs of up to ``group_size`` tokens for one
channel), values per token (runs of up to ``group_size`` dims for one token).
A value group uses its token's bit width; a key group spans several tokens
and takes the maximum width among them.

Group record layout (normative, little-endian):

* ``bits < 16``: ``scale`` f32, ``zero_point`` f32, then ``ceil(g*bits/8)``
  bytes of codes packed LSB-first within each byte.
* ``bits == 16``: ``g`` raw float32 values, no scale or zero point.

Key groups are concatenated in ``[layer][head][channel][token-chunk]`` order,
value groups in ``[layer][head][token][dim-chunk]`` order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    CodeRangeError,
    DataError,
    DimensionError,
    ParameterError,
    PayloadSizeError,
    TruncatedError,
)
from .tensorio import KVCache

BIT_WIDTHS = (2, 4, 8, 16)
GROUP_SIZE = 32

_F4 = np.dtype("<f4")


def _check_bits(bits: int, allowed=BIT_WIDTHS) -> int:
    bits = int(bits)
    if bits not in allowed:
        raise ParameterError(f"bit width {bits} not in {allowed}")
    return bits


def packed_length(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def record_size(bits: int, length: int) -> int:
    """Bytes one group of ``length`` elements occupies at ``bits``."""
    if bits == 16:
        return 4 * length
    return 8 + packed_length(length, bits)


def chunk_bounds(length: int, group_size: int = GROUP_SIZE) -> list[tuple[int, int]]:
    """Split ``[0, length)`` into runs of ``group_size`` with a shorter tail."""
    return [(s, min(s + group_size, length)) for s in range(0, length, group_size)]


# -- code packing -----------------------------------------------------------


def _pack_rows(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack the last axis of ``codes``; returns uint8 ``[..., ceil(g*bits/8)]``."""
    per_byte = 8 // bits
    g = codes.shape[-1]
    nbytes = packed_length(g, bits)
    pad = nbytes * per_byte - g
    c = codes.astype(np.uint8, copy=False)
    if pad:
        c = np.concatenate([c, np.zeros(c.shape[:-1] + (pad,), dtype=np.uint8)], axis=-1)
    c = c.reshape(c.shape[:-1] + (nbytes, per_byte))
    out = np.zeros(c.shape[:-1], dtype=np.uint8)
    for j in range(per_byte):
        out |= c[..., j] << np.uint8(j * bits)
    return out


def _unpack_rows(packed: np.ndarray, bits: int, count: int) -> np.ndarray:
    per_byte = 8 // bits
    mask = np.uint8((1 << bits) - 1)
    parts = [(packed >> np.uint8(j * bits)) & mask for j in range(per_byte)]
    c = np.stack(parts, axis=-1).reshape(packed.shape[:-1] + (packed.shape[-1] * per_byte,))
    return c[..., :count]


def pack_codes(codes, bits: int) -> bytes:
    """Pack integer codes LSB-first; ``len(result) == ceil(len(codes)*bits/8)``."""
    bits = _check_bits(bits, (2, 4, 8))
    c = np.asarray(codes).reshape(-1)
    if c.size == 0:
        return b""
    if c.dtype.kind not in "iu" and not np.array_equal(c, np.floor(c)):
        raise CodeRangeError("codes must be integers")
    if c.min() < 0 or c.max() > (1 << bits) - 1:
        raise CodeRangeError(f"codes outside [0, {(1 << bits) - 1}]")
    return _pack_rows(c.astype(np.uint8)[None, :], bits)[0].tobytes()


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    bits = _check_bits(bits, (2, 4, 8))
    need = packed_length(count, bits)
    if len(data) < need:
        raise TruncatedError(f"{count} codes at {bits} bits need {need} bytes, got {len(data)}")
    if count == 0:
        return np.zeros(0, dtype=np.uint8)
    buf = np.frombuffer(bytes(data[:need]), dtype=np.uint8)
    return _unpack_rows(buf[None, :], bits, count)[0]


# -- affine quantization -----------------------------------------------------


def _affine_rows(x: np.ndarray, bits: int):
    """Quantize the last axis of float32 ``x``; returns (scale, zero, codes)."""
    qmax = (1 << bits) - 1
    lo = x.min(axis=-1)
    hi = x.max(axis=-1)
    zero = lo.astype(np.float32)
    scale = ((hi.astype(np.float64) - lo.astype(np.float64)) / qmax).astype(np.float32)
    # a non-constant group whose scale underflows keeps the smallest positive scale
    tiny = (scale == 0) & (hi > lo)
    if tiny.any():
        scale = np.where(tiny, np.nextafter(np.float32(0), np.float32(1)), scale)
    s = scale.astype(np.float64)[..., None]
    safe = np.where(s > 0, s, 1.0)
    v = (x.astype(np.float64) - zero.astype(np.float64)[..., None]) / safe
    # round half away from zero; v >= 0 up to rounding
    codes = np.clip(np.floor(v + 0.5), 0, qmax)
    codes = np.where(s > 0, codes, 0).astype(np.uint8)
    return scale, zero, codes


def _affine_restore(scale: np.ndarray, zero: np.ndarray, codes: np.ndarray) -> np.ndarray:
    return zero.astype(np.float64) + scale.astype(np.float64) * codes


@dataclass(frozen=True)
class QuantizedGroup:
    """One quantized group. For ``bits == 16`` codes hold raw float32 and scale/zero are 0."""

    bits: int
    scale: float
    zero_point: float
    codes: bytes
    length: int

    @property
    def nbytes(self) -> int:
        return record_size(self.bits, self.length)

    def to_bytes(self) -> bytes:
        if self.bits == 16:
            return self.codes
        return np.array([self.scale, self.zero_point], dtype=_F4).tobytes() + self.codes


def quantize_group(x, bits: int) -> QuantizedGroup:
    bits = _check_bits(bits)
    a = np.asarray(x, dtype=np.float32).reshape(-1)
    if a.size == 0:
        raise DimensionError("group must hold at least one element")
    if not np.isfinite(a).all():
        raise DataError("group contains non-finite values")
    if bits == 16:
        return QuantizedGroup(16, 0.0, 0.0, a.astype(_F4).tobytes(), a.size)
    scale, zero, codes = _affine_rows(a[None, :], bits)
    return QuantizedGroup(
        bits, float(scale[0]), float(zero[0]), _pack_rows(codes, bits)[0].tobytes(), a.size
    )


def dequantize_group(q: QuantizedGroup) -> np.ndarray:
    """Reconstruct a group as float64 (``zero_point + scale * code``)."""
    bits = _check_bits(q.bits)
    expected = q.length * 4 if bits == 16 else packed_length(q.length, bits)
    if len(q.codes) < expected:
        raise TruncatedError(f"group codes hold {len(q.codes)} bytes, expected {expected}")
    if len(q.codes) > expected:
        raise PayloadSizeError(f"group codes hold {len(q.codes)} bytes, expected {expected}")
    if bits == 16:
        return np.frombuffer(q.codes, dtype=_F4).astype(np.float64)
    codes = unpack_codes(q.codes, bits, q.length)
    return q.zero_point + q.scale * codes.astype(np.float64)


def analytic_error(bits: int, value_range: float) -> float:
    """Expected MSE of uniform rounding: ``step**2 / 12`` with ``step = range / (2**bits - 1)``."""
    bits = _check_bits(bits)
    if value_range < 0:
        raise ParameterError("value range must be non-negative")
    if bits == 16:
        return 0.0
    step = value_range / ((1 << bits) - 1)
    return step * step / 12.0


# -- whole caches -------------------------------------------------------------


def _as_token_bits(assignment, n: int) -> np.ndarray:
    bits = getattr(assignment, "bits", assignment)
    b = np.asarray(bits)
    if b.ndim == 0:  # one width for every token
        b = np.full(n, b)
    b = b.reshape(-1)
    if b.shape[0] != n:
        raise DimensionError(f"bit assignment has {b.shape[0]} entries for {n} tokens")
    if not np.isin(b, BIT_WIDTHS).all():
        raise ParameterError(f"bit widths must be drawn from {BIT_WIDTHS}")
    return b.astype(np.uint8)


def key_chunk_bits(token_bits: np.ndarray, group_size: int) -> np.ndarray:
    """Bit width of each per-channel key chunk (max over its tokens)."""
    return np.array(
        [int(token_bits[s:e].max()) for s, e in chunk_bounds(len(token_bits), group_size)],
        dtype=np.uint8,
    )


@dataclass(frozen=True, eq=False)
class QuantizedKV:
    """A quantized cache.

    Codes live in uint8 planes shaped like the cache; elements stored at
    16 bits live in the ``*_raw`` float32 planes instead. Per-group scales
    and zero points are ``[L, H, d, n_key_chunks]`` for keys and
    ``[L, H, n, n_dim_chunks]`` for values.
    """

    shape: tuple[int, int, int, int]
    group_size: int
    token_bits: np.ndarray
    key_scale: np.ndarray
    key_zero: np.ndarray
    key_codes: np.ndarray
    key_raw: np.ndarray
    value_scale: np.ndarray
    value_zero: np.ndarray
    value_codes: np.ndarray
    value_raw: np.ndarray

    grouping = {"keys": "per-channel", "values": "per-token"}

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            a = getattr(self, name)
            if isinstance(a, np.ndarray):
                a.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.shape

    @property
    def key_bits(self) -> np.ndarray:
        return key_chunk_bits(self.token_bits, self.group_size)

    @property
    def average_bits(self) -> float:
        return float(self.token_bits.astype(np.float64).sum() / len(self.token_bits))

    def __eq__(self, other):
        if not isinstance(other, QuantizedKV):
            return NotImplemented
        if (self.shape, self.group_size) != (other.shape, other.group_size):
            return False
        for name in self.__dataclass_fields__:
            a = getattr(self, name)
            if isinstance(a, np.ndarray):
                b = getattr(other, name)
                if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                    return False
        return True

    __hash__ = None  # type: ignore[assignment]

    # per-group views, in canonical order
    def key_groups(self) -> list[QuantizedGroup]:
        L, H, n, d = self.shape
        chunks = chunk_bounds(n, self.group_size)
        bits = self.key_bits
        out = []
        for l in range(L):
            for h in range(H):
                for c in range(d):
                    for j, (s, e) in enumerate(chunks):
                        b = int(bits[j])
                        if b == 16:
                            raw = self.key_raw[l, h, s:e, c].astype(_F4).tobytes()
                            out.append(QuantizedGroup(16, 0.0, 0.0, raw, e - s))
                        else:
                            codes = _pack_rows(self.key_codes[l, h, s:e, c][None, :], b)[0]
                            out.append(QuantizedGroup(
                                b, float(self.key_scale[l, h, c, j]),
                                float(self.key_zero[l, h, c, j]), codes.tobytes(), e - s))
        return out

    def value_groups(self) -> list[QuantizedGroup]:
        L, H, n, d = self.shape
        chunks = chunk_bounds(d, self.group_size)
        out = []
        for l in range(L):
            for h in range(H):
                for t in range(n):
                    b = int(self.token_bits[t])
                    for j, (s, e) in enumerate(chunks):
                        if b == 16:
                            raw = self.value_raw[l, h, t, s:e].astype(_F4).tobytes()
                            out.append(QuantizedGroup(16, 0.0, 0.0, raw, e - s))
                        else:
                            codes = _pack_rows(self.value_codes[l, h, t, s:e][None, :], b)[0]
                            out.append(QuantizedGroup(
                                b, float(self.value_scale[l, h, t, j]),
                                float(self.value_zero[l, h, t, j]), codes.tobytes(), e - s))
        return out

    def payload_nbytes(self) -> int:
        return payload_size(self.shape, self.token_bits, self.group_size)

    def to_payload(self) -> bytes:
        return _encode_keys(self) + _encode_values(self)


def payload_size(shape, token_bits, group_size: int = GROUP_SIZE) -> int:
    """Closed-form byte count of the key and value sections."""
    L, H, n, d = shape
    tb = np.asarray(token_bits)
    keys = sum(
        record_size(int(b), e - s)
        for (s, e), b in zip(chunk_bounds(n, group_size), key_chunk_bits(tb, group_size))
    ) * L * H * d
    per_width = {b: sum(record_size(b, e - s) for s, e in chunk_bounds(d, group_size)) for b in BIT_WIDTHS}
    values = sum(per_width[int(b)] for b in tb) * L * H
    return int(keys + values)


def quantize_cache(cache: KVCache, assignment, group_size: int = GROUP_SIZE) -> QuantizedKV:
    """Quantize a cache with per-token bit widths (a ``BitAssignment`` or a vector)."""
    if group_size < 1:
        raise ParameterError("group_size must be >= 1")
    L, H, n, d = cache.shape
    tb = _as_token_bits(assignment, n)
    K, V = cache.keys, cache.values

    key_chunks = chunk_bounds(n, group_size)
    kbits = key_chunk_bits(tb, group_size)
    key_scale = np.zeros((L, H, d, len(key_chunks)), dtype=np.float32)
    key_zero = np.zeros_like(key_scale)
    key_codes = np.zeros(cache.shape, dtype=np.uint8)
    key_raw = np.zeros(cache.shape, dtype=np.float32)
    for j, (s, e) in enumerate(key_chunks):
        b = int(kbits[j])
        if b == 16:
            key_raw[:, :, s:e, :] = K[:, :, s:e, :]
            continue
        block = np.swapaxes(K[:, :, s:e, :], 2, 3)  # [L,H,d,g]
        sc, zp, codes = _affine_rows(block, b)
        key_scale[..., j] = sc
        key_zero[..., j] = zp
        key_codes[:, :, s:e, :] = np.swapaxes(codes, 2, 3)

    dim_chunks = chunk_bounds(d, group_size)
    value_scale = np.zeros((L, H, n, len(dim_chunks)), dtype=np.float32)
    value_zero = np.zeros_like(value_scale)
    value_codes = np.zeros(cache.shape, dtype=np.uint8)
    value_raw = np.zeros(cache.shape, dtype=np.float32)
    for b in np.unique(tb):
        b = int(b)
        toks = np.nonzero(tb == b)[0]
        if b == 16:
            value_raw[:, :, toks, :] = V[:, :, toks, :]
            continue
        for j, (s, e) in enumerate(dim_chunks):
            sc, zp, codes = _affine_rows(V[:, :, toks, s:e], b)
            value_scale[:, :, toks, j] = sc
            value_zero[:, :, toks, j] = zp
            value_codes[:, :, toks, s:e] = codes

    return QuantizedKV(
        shape=cache.shape, group_size=group_size, token_bits=tb,
        key_scale=key_scale, key_zero=key_zero, key_codes=key_codes, key_raw=key_raw,
        value_scale=value_scale, value_zero=value_zero, value_codes=value_codes,
        value_raw=value_raw,
    )


def _expand(params: np.ndarray, chunks) -> np.ndarray:
    lengths = [e - s for s, e in chunks]
    return np.repeat(params, lengths, axis=-1)


def dequantize_cache(q: QuantizedKV) -> KVCache:
    L, H, n, d = q.shape
    key_chunks = chunk_bounds(n, q.group_size)
    ks = np.swapaxes(_expand(q.key_scale, key_chunks), 2, 3)  # [L,H,n,d]
    kz = np.swapaxes(_expand(q.key_zero, key_chunks), 2, 3)
    keys = _affine_restore(ks, kz, q.key_codes)
    tok16_key = np.repeat(q.key_bits == 16, [e - s for s, e in key_chunks])
    if tok16_key.any():
        keys[:, :, tok16_key, :] = q.key_raw[:, :, tok16_key, :]

    dim_chunks = chunk_bounds(d, q.group_size)
    vs = _expand(q.value_scale, dim_chunks)
    vz = _expand(q.value_zero, dim_chunks)
    values = _affine_restore(vs, vz, q.value_codes)
    tok16 = q.token_bits == 16
    if tok16.any():
        values[:, :, tok16, :] = q.value_raw[:, :, tok16, :]
    return KVCache(keys.astype(np.float32), values.astype(np.float32))


# -- section codecs ------------------------------------------------------------


def _f4_bytes(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=_F4)
    return a.view(np.uint8).reshape(a.shape[:-1] + (a.shape[-1] * 4,))


def _records(scale, zero, codes, raw, bits):
    """Byte records for groups laid out on the last axis of codes/raw."""
    if bits == 16:
        return _f4_bytes(raw)
    sz = _f4_bytes(np.stack([scale, zero], axis=-1))
    return np.concatenate([sz, _pack_rows(codes, bits)], axis=-1)


def _encode_keys(q: QuantizedKV) -> bytes:
    L, H, n, d = q.shape
    parts = []
    for j, (s, e) in enumerate(chunk_bounds(n, q.group_size)):
        b = int(q.key_bits[j])
        codes = np.swapaxes(q.key_codes[:, :, s:e, :], 2, 3)
        raw = np.swapaxes(q.key_raw[:, :, s:e, :], 2, 3)
        parts.append(_records(q.key_scale[..., j], q.key_zero[..., j], codes, raw, b))
    return np.concatenate(parts, axis=-1).tobytes()


def _value_layout(shape, token_bits, group_size):
    L, H, n, d = shape
    chunks = chunk_bounds(d, group_size)
    per_width = {b: sum(record_size(b, e - s) for s, e in chunks) for b in BIT_WIDTHS}
    rec = np.array([per_width[int(b)] for b in token_bits], dtype=np.int64)
    tok_off = np.concatenate([[0], np.cumsum(rec)[:-1]])
    row = int(rec.sum())
    lh_base = (np.arange(L * H, dtype=np.int64) * row).reshape(L, H)
    return chunks, per_width, tok_off, lh_base, row


def _encode_values(q: QuantizedKV) -> bytes:
    L, H, n, d = q.shape
    chunks, per_width, tok_off, lh_base, row = _value_layout(q.shape, q.token_bits, q.group_size)
    buf = np.zeros(L * H * row, dtype=np.uint8)
    for b in np.unique(q.token_bits):
        b = int(b)
        toks = np.nonzero(q.token_bits == b)[0]
        recs = np.concatenate([
            _records(q.value_scale[:, :, toks, j], q.value_zero[:, :, toks, j],
                     q.value_codes[:, :, toks, s:e], q.value_raw[:, :, toks, s:e], b)
            for j, (s, e) in enumerate(chunks)
        ], axis=-1)
        start = lh_base[:, :, None] + tok_off[toks][None, None, :]
        idx = start[..., None] + np.arange(per_width[b])
        buf[idx] = recs
    return buf.tobytes()


def _split_records(rec: np.ndarray, bits: int, g: int):
    """Inverse of :func:`_records` on the last axis."""
    if bits == 16:
        raw = np.ascontiguousarray(rec).view(_F4)
        return None, None, None, raw
    sz = np.ascontiguousarray(rec[..., :8]).view(_F4)
    codes = _unpack_rows(rec[..., 8:], bits, g)
    return sz[..., 0], sz[..., 1], codes, None


def quantized_from_payload(shape, token_bits, group_size: int, payload: bytes) -> QuantizedKV:
    """Rebuild a :class:`QuantizedKV` from its key+value sections."""
    L, H, n, d = shape
    tb = _as_token_bits(token_bits, n)
    expected = payload_size(shape, tb, group_size)
    if len(payload) < expected:
        raise TruncatedError(f"payload has {len(payload)} bytes, layout needs {expected}")
    if len(payload) > expected:
        raise PayloadSizeError(f"payload has {len(payload)} bytes, layout needs {expected}")
    data = np.frombuffer(payload, dtype=np.uint8)

    key_chunks = chunk_bounds(n, group_size)
    kbits = key_chunk_bits(tb, group_size)
    sizes = [record_size(int(b), e - s) for (s, e), b in zip(key_chunks, kbits)]
    key_len = L * H * d * sum(sizes)
    kdata = data[:key_len].reshape(L, H, d, sum(sizes))
    key_scale = np.zeros((L, H, d, len(key_chunks)), dtype=np.float32)
    key_zero = np.zeros_like(key_scale)
    key_codes = np.zeros(shape, dtype=np.uint8)
    key_raw = np.zeros(shape, dtype=np.float32)
    off = 0
    for j, ((s, e), b) in enumerate(zip(key_chunks, kbits)):
        rec = kdata[..., off:off + sizes[j]]
        off += sizes[j]
        sc, zp, codes, raw = _split_records(rec, int(b), e - s)
        if raw is not None:
            key_raw[:, :, s:e, :] = np.swapaxes(raw, 2, 3)
        else:
            key_scale[..., j] = sc
            key_zero[..., j] = zp
            key_codes[:, :, s:e, :] = np.swapaxes(codes, 2, 3)

    vdata = data[key_len:]
    chunks, per_width, tok_off, lh_base, _ = _value_layout(shape, tb, group_size)
    value_scale = np.zeros((L, H, n, len(chunks)), dtype=np.float32)
    value_zero = np.zeros_like(value_scale)
    value_codes = np.zeros(shape, dtype=np.uint8)
    value_raw = np.zeros(shape, dtype=np.float32)
    for b in np.unique(tb):
        b = int(b)
        toks = np.nonzero(tb == b)[0]
        start = lh_base[:, :, None] + tok_off[toks][None, None, :]
        recs = vdata[start[..., None] + np.arange(per_width[b])]
        off = 0
        for j, (s, e) in enumerate(chunks):
            size = record_size(b, e - s)
            sc, zp, codes, raw = _split_records(recs[..., off:off + size], b, e - s)
            off += size
            if raw is not None:
                value_raw[:, :, toks, s:e] = raw
            else:
                value_scale[:, :, toks, j] = sc
                value_zero[:, :, toks, j] = zp
                value_codes[:, :, toks, s:e] = codes

    for name, a in (("key", key_raw), ("value", value_raw)):
        if not np.isfinite(a).all():
            raise DataError(f"{name} pass-through values are non-finite")
    if not (np.isfinite(key_scale).all() and np.isfinite(value_scale).all()
            and np.isfinite(key_zero).all() and np.isfinite(value_zero).all()):
        raise DataError("non-finite quantization parameters")
    return QuantizedKV(
        shape=tuple(shape), group_size=group_size, token_bits=tb,
        key_scale=key_scale, key_zero=key_zero, key_codes=key_codes, key_raw=key_raw,
        value_scale=value_scale, value_zero=value_zero, value_codes=value_codes,
        value_raw=value_raw,
    )


def quantization_bounds(q: QuantizedKV) -> tuple[np.ndarray, np.ndarray]:
    """Per-element half-step bounds ``scale/2`` for keys and values (0 where exact)."""
    L, H, n, d = q.shape
    kc = chunk_bounds(n, q.group_size)
    ks = np.swapaxes(_expand(q.key_scale, kc), 2, 3).astype(np.float64) / 2
    vs = _expand(q.value_scale, chunk_bounds(d, q.group_size)).astype(np.float64) / 2
    return ks, vs


__all__ = [
    "BIT_WIDTHS", "GROUP_SIZE", "QuantizedGroup", "QuantizedKV", "analytic_error",
    "chunk_bounds", "dequantize_cache", "dequantize_group", "pack_codes", "payload_size",
    "quantize_cache", "quantize_group", "quantized_from_payload", "record_size", "unpack_codes",
    "quantization_bounds",
]
