"""Token scoring: local importance, downstream demand and their combination."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, ParameterError
from .tensorio import AttentionStats, KVCache


class SegmentKind(enum.IntEnum):
    SYSTEM = 0
    SHARED_DOC = 1
    CONVERSATION = 2
    SHARED_STATE = 3
    AGENT_PRIVATE = 4

    @classmethod
    def parse(cls, text: str) -> "SegmentKind":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ParameterError(f"unknown segment kind {text!r}") from None


DEFAULT_PRIORS = {
    SegmentKind.SYSTEM: 0.75,
    SegmentKind.SHARED_DOC: 0.5,
    SegmentKind.CONVERSATION: 0.25,
    SegmentKind.SHARED_STATE: 0.75,
    SegmentKind.AGENT_PRIVATE: 0.0,
}

DEFAULT_ALPHA = 0.5

FEATURE_NAMES = (
    "frequency", "quality", "attention_variance", "entropy", "downstream_demand", "segment_type",
)


@dataclass(frozen=True)
class SegmentMap:
    """Sorted, non-overlapping ``(start, end, kind)`` spans covering ``[0, n)``; end exclusive."""

    spans: tuple[tuple[int, int, SegmentKind], ...]

    def __post_init__(self):
        spans = tuple((int(s), int(e), SegmentKind(k)) for s, e, k in self.spans)
        if not spans:
            raise ParameterError("segment map needs at least one span")
        pos = 0
        for s, e, _ in spans:
            if s != pos or e <= s:
                raise ParameterError(f"span ({s}, {e}) breaks contiguous coverage at {pos}")
            pos = e
        object.__setattr__(self, "spans", spans)

    @property
    def tokens(self) -> int:
        return self.spans[-1][1]

    @classmethod
    def uniform(cls, n: int, kind: SegmentKind = SegmentKind.CONVERSATION) -> "SegmentMap":
        return cls(((0, n, kind),))

    @classmethod
    def parse(cls, text: str) -> "SegmentMap":
        """Parse the sidecar format: one ``start end kind`` line per span, ``#`` comments."""
        spans = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParameterError(f"line {lineno}: expected 'start end kind'")
            try:
                spans.append((int(parts[0]), int(parts[1]), SegmentKind.parse(parts[2])))
            except ValueError as exc:
                raise ParameterError(f"line {lineno}: {exc}") from None
        return cls(tuple(spans))

    def format(self) -> str:
        return "".join(f"{s} {e} {k.name.lower()}\n" for s, e, k in self.spans)

    def kinds(self) -> np.ndarray:
        out = np.empty(self.tokens, dtype=np.int64)
        for s, e, k in self.spans:
            out[s:e] = int(k)
        return out


@dataclass(frozen=True, eq=False)
class AnchorPool:
    embeddings: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    capacity: int = 64

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if emb.ndim != 2 or emb.shape[0] != w.shape[0]:
            raise DimensionError("anchor embeddings and weights disagree")
        if self.capacity < 1:
            raise ParameterError("anchor pool capacity must be >= 1")
        if len(w) > self.capacity:
            raise ParameterError("anchor pool exceeds its capacity")
        if ((w < 0) | (w > 1) | ~np.isfinite(w)).any():
            raise ParameterError("anchor downstream weights must lie in [0, 1]")
        emb.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class ImportanceScores:
    local: np.ndarray
    transfer: np.ndarray
    combined: np.ndarray
    alpha: float


def minmax_normalize(x) -> np.ndarray:
    """Map to [0, 1] over the tokens; a constant vector maps to 0.5."""
    a = np.asarray(x, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.full_like(a, 0.5)
    return np.clip((a - lo) / (hi - lo), 0.0, 1.0)


def _local_features(stats: AttentionStats) -> np.ndarray:
    return np.stack([
        minmax_normalize(stats.received_weight),
        minmax_normalize(stats.quality),
        minmax_normalize(stats.weight_variance),
        minmax_normalize(stats.query_entropy),
    ], axis=1)


def local_importance(stats: AttentionStats) -> np.ndarray:
    """Mean of the four min-max normalized local stats."""
    return _local_features(stats).mean(axis=1)


def compute_features(stats: AttentionStats, segments: SegmentMap, demand) -> np.ndarray:
    """Controller input rows ``[n, 6]`` in :data:`FEATURE_NAMES` order."""
    n = len(stats)
    demand = np.asarray(demand, dtype=np.float64).reshape(-1)
    if segments.tokens != n or demand.shape[0] != n:
        raise DimensionError("stats, segments and demand must cover the same tokens")
    if not np.isfinite(demand).all():
        raise DataError("demand contains non-finite entries")
    seg = segments.kinds().astype(np.float64) / (len(SegmentKind) - 1)
    return np.column_stack([_local_features(stats), np.clip(demand, 0, 1), seg])


def anchor_embeddings(cache: KVCache) -> np.ndarray:
    """Token embeddings used for anchor matching: layer-0 keys averaged over heads."""
    return cache.keys[0].astype(np.float64).mean(axis=0)


def _unit_rows(a: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1)
    if (norms == 0).any():
        raise DataError(f"{what} contains zero-length vectors")
    return a / norms[:, None]


def downstream_demand(keys_at_anchor_layer, pool: AnchorPool, segments: SegmentMap,
                      priors=None) -> np.ndarray:
    """Segment prior plus the weight of the most cosine-similar anchor, clamped to [0, 1]."""
    keys = np.asarray(keys_at_anchor_layer, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] != segments.tokens:
        raise DimensionError("keys must be [n, d] matching the segment map")
    table = dict(DEFAULT_PRIORS if priors is None else priors)
    prior = np.array([table[SegmentKind(k)] for k in range(len(SegmentKind))])
    demand = prior[segments.kinds()]
    if len(pool):
        if pool.embeddings.shape[1] != keys.shape[1]:
            raise DimensionError("anchor and key dimensions differ")
        sim = _unit_rows(keys, "keys") @ _unit_rows(pool.embeddings, "anchor pool").T
        nearest = np.argmax(sim, axis=1)  # first maximum = lowest anchor index
        demand = demand + pool.weights[nearest]
    return np.clip(demand, 0.0, 1.0)


def combine_scores(local, transfer, alpha: float = DEFAULT_ALPHA) -> ImportanceScores:
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha {alpha} outside [0, 1]")
    local = np.asarray(local, dtype=np.float64)
    transfer = np.asarray(transfer, dtype=np.float64)
    if local.shape != transfer.shape:
        raise DimensionError("local and transfer scores differ in length")
    combined = alpha * local + (1.0 - alpha) * transfer
    return ImportanceScores(local, transfer, combined, float(alpha))


def update_anchor_pool(pool: AnchorPool, shared_keys, observed_weights) -> AnchorPool:
    """Append anchors, then evict the lowest weights (oldest first on ties) down to capacity."""
    new = np.asarray(shared_keys, dtype=np.float64)
    w = np.asarray(observed_weights, dtype=np.float64).reshape(-1)
    if new.ndim != 2 or new.shape[0] != w.shape[0]:
        raise DimensionError("shared keys and weights disagree")
    if ((w < 0) | (w > 1) | ~np.isfinite(w)).any():
        raise ParameterError("observed weights must lie in [0, 1]")
    if len(pool) and pool.embeddings.shape[1] != new.shape[1]:
        raise DimensionError("anchor dimension mismatch")
    emb = new if not len(pool) else np.vstack([pool.embeddings, new])
    weights = np.concatenate([pool.weights, w])
    excess = len(weights) - pool.capacity
    if excess > 0:
        order = np.lexsort((np.arange(len(weights)), weights))
        keep = np.sort(order[excess:])
        emb, weights = emb[keep], weights[keep]
    return AnchorPool(emb, weights, pool.capacity)
