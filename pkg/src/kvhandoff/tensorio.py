"""Full-precision KV caches: container type, synthetic generation and the QKVT file format.

QKVT layout (little-endian)::

    offset  size  field
    0       4     magic b"QKVT"
    4       2     version (u16, currently 1)
    6       2     reserved (u16, zero)
    8       16    L, H, n, d (four u32)
    24      4N    keys   (N = L*H*n*d float32, row-major [layer][head][token][dim])
    24+4N   4N    values (same layout)
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import (
    BadMagicError,
    DataError,
    DimensionError,
    ParameterError,
    PayloadSizeError,
    SizeError,
    TruncatedError,
    UnsupportedVersionError,
)

QKVT_MAGIC = b"QKVT"
QKVT_VERSION = 1
_HEADER = struct.Struct("<4sHHIIII")

#: Default cap on L*H*n*d for synthetic generation.
MAX_ELEMENTS = 1 << 28

# rng stream ids
_STREAM_KEYS = 1
_STREAM_VALUES = 2
_STREAM_TOKEN_BIAS = 3
_STREAM_ATTN_NOISE = 4
_STREAM_HEAVY = 5
_STREAM_QUALITY = 6

_MAX_BOOST_ROUNDS = 10_000


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class KVCache:
    """Key/value tensors of shape ``[L, H, n, d]`` stored as float32."""

    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        k = np.ascontiguousarray(self.keys, dtype=np.float32)
        v = np.ascontiguousarray(self.values, dtype=np.float32)
        if k.ndim != 4 or k.shape != v.shape:
            raise DimensionError(f"keys {k.shape} and values {v.shape} must share a 4-d shape")
        if min(k.shape) < 1:
            raise DimensionError(f"all cache dimensions must be >= 1, got {k.shape}")
        if not (np.isfinite(k).all() and np.isfinite(v).all()):
            raise DataError("cache contains non-finite elements")
        object.__setattr__(self, "keys", _frozen(k.copy() if k is self.keys else k))
        object.__setattr__(self, "values", _frozen(v.copy() if v is self.values else v))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.keys.shape  # type: ignore[return-value]

    @property
    def layers(self) -> int:
        return self.shape[0]

    @property
    def heads(self) -> int:
        return self.shape[1]

    @property
    def tokens(self) -> int:
        return self.shape[2]

    @property
    def head_dim(self) -> int:
        return self.shape[3]

    def __eq__(self, other):
        if not isinstance(other, KVCache):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.keys.tobytes() == other.keys.tobytes()
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 0
    layers: int = 2
    heads: int = 2
    tokens: int = 32
    head_dim: int = 16
    value_scale: float = 1.0
    heavy_hitter_fraction: float = 0.125

    def __post_init__(self):
        for name in ("layers", "heads", "tokens", "head_dim"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if not (self.value_scale > 0 and math.isfinite(self.value_scale)):
            raise ParameterError("value_scale must be positive and finite")
        if not 0.0 <= self.heavy_hitter_fraction <= 1.0:
            raise ParameterError("heavy_hitter_fraction must lie in [0, 1]")
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterError("seed must be an unsigned 64-bit integer")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.layers, self.heads, self.tokens, self.head_dim)

    @property
    def heavy_count(self) -> int:
        # tolerance absorbs binary representation of fractions like 0.1*10
        return int(math.floor(self.heavy_hitter_fraction * self.tokens + 1e-9))


@dataclass(frozen=True, eq=False)
class AttentionStats:
    """Per-token attention statistics (all vectors of length n)."""

    received_weight: np.ndarray
    weight_variance: np.ndarray
    query_entropy: np.ndarray
    quality: np.ndarray
    heavy: np.ndarray = field(default=None)  # bool mask of boosted tokens, informational

    def __post_init__(self):
        n = None
        for name in ("received_weight", "weight_variance", "query_entropy", "quality"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 1:
                raise DimensionError(f"{name} must be a vector")
            if n is None:
                n = a.shape[0]
            elif a.shape[0] != n:
                raise DimensionError("attention stat vectors must share a length")
            if not np.isfinite(a).all():
                raise DataError(f"{name} contains non-finite entries")
            object.__setattr__(self, name, _frozen(a.copy()))
        if n == 0:
            raise DimensionError("attention stats need at least one token")
        heavy = np.zeros(n, dtype=bool) if self.heavy is None else np.asarray(self.heavy, dtype=bool)
        if heavy.shape != (n,):
            raise DimensionError("heavy mask length mismatch")
        object.__setattr__(self, "heavy", _frozen(heavy.copy()))

    def __len__(self) -> int:
        return self.received_weight.shape[0]


def generate_synthetic_cache(cfg: SyntheticConfig, max_elements: int = MAX_ELEMENTS) -> KVCache:
    """Deterministic Gaussian-like cache with standard deviation ``cfg.value_scale``."""
    count = math.prod(cfg.shape)
    if count > max_elements:
        raise SizeError(f"{count} elements exceeds cap {max_elements}")
    k = rng.normal(cfg.seed, _STREAM_KEYS, count) * cfg.value_scale
    v = rng.normal(cfg.seed, _STREAM_VALUES, count) * cfg.value_scale
    return KVCache(
        k.astype(np.float32).reshape(cfg.shape),
        v.astype(np.float32).reshape(cfg.shape),
    )


def _heavy_mask(cfg: SyntheticConfig) -> np.ndarray:
    n, k = cfg.tokens, cfg.heavy_count
    mask = np.zeros(n, dtype=bool)
    if k:
        order = np.argsort(rng.words(cfg.seed, _STREAM_HEAVY, n), kind="stable")
        mask[order[:k]] = True
    return mask


def generate_attention_stats(cfg: SyntheticConfig, cache: KVCache) -> AttentionStats:
    """Synthetic per-token attention statistics with planted heavy hitters.

    A noisy attention matrix ``[H, n, n]`` is drawn per head; each heavy token
    gets a logit boost that is raised until it receives at least twice the
    mean received weight. That is only possible when fewer than half the
    tokens are heavy.
    """
    if cache.shape != cfg.shape:
        raise DimensionError(f"cache shape {cache.shape} does not match config {cfg.shape}")
    n, heads = cfg.tokens, cfg.heads
    k = cfg.heavy_count
    if k and 2 * k >= n:
        raise ParameterError(
            f"{k} heavy tokens out of {n}: heavy hitters must be fewer than half the tokens"
        )
    heavy = _heavy_mask(cfg)
    token_bias = 0.4 * np.clip(rng.normal(cfg.seed, _STREAM_TOKEN_BIAS, n), -1.0, 1.0)
    noise = 0.5 * rng.normal(cfg.seed, _STREAM_ATTN_NOISE, heads * n * n).reshape(heads, n, n)
    base = noise + token_bias[None, None, :]

    boost = np.where(heavy, math.log(4.0), 0.0)
    for _ in range(_MAX_BOOST_ROUNDS):
        logits = base + boost[None, None, :]
        logits = logits - logits.max(axis=-1, keepdims=True)
        attn = np.exp(logits)
        attn /= attn.sum(axis=-1, keepdims=True)
        received = attn.mean(axis=(0, 1))
        target = 2.0 * received.mean()
        short = heavy & (received < target)
        if not short.any():
            break
        # raise each lagging heavy token's logit by its log shortfall, plus a margin
        boost = boost + np.where(short, np.log(target / received) + 0.05, 0.0)
    else:
        raise DataError("heavy-hitter boost did not converge")

    variance = attn.var(axis=(0, 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(attn > 0, attn * np.log(attn), 0.0)
    # outgoing distribution of token t is row t (token t acting as the query)
    entropy = np.maximum(-plogp.sum(axis=-1).mean(axis=0), 0.0)
    quality = rng.uniform(cfg.seed, _STREAM_QUALITY, n)
    return AttentionStats(received, variance, entropy, quality, heavy)


def _encode(cache: KVCache) -> bytes:
    header = _HEADER.pack(QKVT_MAGIC, QKVT_VERSION, 0, *cache.shape)
    return header + cache.keys.astype("<f4").tobytes() + cache.values.astype("<f4").tobytes()


def _decode(buf: bytes) -> KVCache:
    if len(buf) < 4:
        raise TruncatedError("file shorter than the QKVT magic")
    if buf[:4] != QKVT_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {QKVT_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedError("QKVT header truncated")
    _, version, _, L, H, n, d = _HEADER.unpack_from(buf)
    if version != QKVT_VERSION:
        raise UnsupportedVersionError(f"QKVT version {version} not supported")
    if min(L, H, n, d) < 1:
        raise DimensionError(f"header declares empty dimension {(L, H, n, d)}")
    count = L * H * n * d
    expected = _HEADER.size + 8 * count
    if len(buf) < expected:
        raise TruncatedError(f"payload has {len(buf) - _HEADER.size} bytes, header needs {8 * count}")
    if len(buf) > expected:
        raise PayloadSizeError(f"{len(buf) - expected} trailing bytes beyond declared dimensions")
    flat = np.frombuffer(buf, dtype="<f4", count=2 * count, offset=_HEADER.size)
    return KVCache(flat[:count].reshape(L, H, n, d), flat[count:].reshape(L, H, n, d))


def store_container(cache: KVCache, path: str | os.PathLike) -> int:
    data = _encode(cache)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_container(path: str | os.PathLike) -> KVCache:
    with open(path, "rb") as fh:
        return _decode(fh.read())


def container_bytes(cache: KVCache) -> bytes:
    """In-memory QKVT encoding."""
    return _encode(cache)


def parse_container(buf: bytes) -> KVCache:
    return _decode(bytes(buf))
