"""Budgeted per-token bit allocation.

Three solvers share one objective, ``sum_t eps[t, b_t] * S[t]`` subject to
``sum_t b_t <= budget_bits``:

* :func:`allocate_exact`: dynamic program over (token, remaining budget) in
  2-bit units; the reference solver.
* :func:`allocate_greedy`: start at 2 bits everywhere and apply the best
  benefit-per-bit upgrade that still fits.
* the controller: a 6-46-4 ReLU MLP mapping token features to a width class.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    DimensionError,
    ModelError,
    ParameterError,
    PayloadSizeError,
    TruncatedError,
    UnsupportedVersionError,
)
from .quantizer import BIT_WIDTHS, GROUP_SIZE, _affine_restore, _affine_rows, chunk_bounds
from .tensorio import KVCache

WIDTHS = np.array(BIT_WIDTHS, dtype=np.int64)
_UNITS = WIDTHS // 2

#: Default token cap for the exact solver.
EXACT_MAX_TOKENS = 64

# relative tolerance under which two objective values count as tied
TIE_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class BitAssignment:
    bits: np.ndarray
    average_bits: float
    objective_value: float

    @classmethod
    def build(cls, bits, scores=None, table: "ErrorTable | None" = None) -> "BitAssignment":
        b = np.asarray(bits, dtype=np.int64).reshape(-1)
        if not np.isin(b, WIDTHS).all():
            raise ParameterError(f"bit widths must come from {BIT_WIDTHS}")
        obj = objective(b, scores, table) if table is not None else float("nan")
        b.setflags(write=False)
        return cls(b, float(b.sum() / len(b)), obj)

    @classmethod
    def uniform(cls, n: int, width: int, scores=None, table=None) -> "BitAssignment":
        return cls.build(np.full(n, width), scores, table)

    @property
    def total_bits(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True, eq=False)
class ErrorTable:
    """``eps[t, k]`` = error of token t at ``BIT_WIDTHS[k]``."""

    eps: np.ndarray
    mode: str = "measured"

    def __post_init__(self):
        e = np.asarray(self.eps, dtype=np.float64)
        if e.ndim != 2 or e.shape[1] != 4:
            raise DimensionError("error table must be [n, 4]")
        if not np.isfinite(e).all() or (e < 0).any():
            raise ParameterError("error table entries must be finite and >= 0")
        if (e[:, 3] != 0).any():
            raise ParameterError("16-bit errors must be zero")
        if (np.diff(e, axis=1) > 0).any():
            raise ParameterError("errors must be non-increasing along the bit axis")
        e.setflags(write=False)
        object.__setattr__(self, "eps", e)

    def __len__(self) -> int:
        return self.eps.shape[0]


def _index_of(bits: np.ndarray) -> np.ndarray:
    return np.searchsorted(WIDTHS, bits)


def objective(bits, scores, table: ErrorTable) -> float:
    """Weighted error ``sum_t eps[t, b_t] * S[t]``, summed in token order."""
    b = np.asarray(bits, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    terms = table.eps[np.arange(len(b)), _index_of(b)] * s
    total = 0.0
    for v in terms:
        total += float(v)
    return total


def _token_value_rows(cache: KVCache, group_size: int):
    """Per dim-chunk value blocks ``[n, L*H, g]``."""
    L, H, n, d = cache.shape
    v = np.moveaxis(cache.values, 2, 0).reshape(n, L * H, d)
    return [v[:, :, s:e] for s, e in chunk_bounds(d, group_size)]


def build_error_table(cache: KVCache, mode: str = "measured", group_size: int = GROUP_SIZE) -> ErrorTable:
    """Per-token value-quantization error at each width.

    ``measured`` quantizes the token's value groups and records the MSE;
    ``analytic`` averages ``step**2/12`` over the token's value groups,
    weighting each group by its length.
    """
    blocks = _token_value_rows(cache, group_size)
    n = cache.tokens
    d = cache.head_dim
    eps = np.zeros((n, 4))
    for k, b in enumerate(BIT_WIDTHS[:3]):
        total = np.zeros(n)
        for blk in blocks:
            g = blk.shape[-1]
            if mode == "measured":
                scale, zero, codes = _affine_rows(blk, b)
                rec = _affine_restore(scale[..., None], zero[..., None], codes)
                total += ((rec - blk.astype(np.float64)) ** 2).sum(axis=(1, 2))
            elif mode == "analytic":
                rng_ = blk.max(axis=-1).astype(np.float64) - blk.min(axis=-1)
                step = rng_ / ((1 << b) - 1)
                total += (step * step / 12.0 * g).sum(axis=1)
            else:
                raise ParameterError(f"unknown error-table mode {mode!r}")
        eps[:, k] = total / (cache.layers * cache.heads * d)
    # nested grids make errors monotone; enforce against rounding noise
    eps = np.minimum.accumulate(eps, axis=1)
    return ErrorTable(eps, mode)


def _check_instance(scores, table: ErrorTable, budget_bits: float):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = len(table)
    if s.shape[0] != n:
        raise DimensionError("scores and error table differ in length")
    if not np.isfinite(s).all() or (s < 0).any():
        raise ParameterError("scores must be finite and non-negative")
    if n == 0:
        raise DimensionError("no tokens to allocate")
    if not budget_bits >= 2 * n:
        raise ParameterError(f"budget {budget_bits} below the all-2-bit minimum {2 * n}")
    return s, n


def _tied(a: float, b: float) -> bool:
    if not (np.isfinite(a) and np.isfinite(b)):
        return False
    return abs(a - b) <= TIE_RTOL * max(abs(a), abs(b)) + 1e-300


def allocate_exact(scores, table: ErrorTable, budget_bits: float,
                   max_tokens: int = EXACT_MAX_TOKENS) -> BitAssignment:
    """Globally optimal assignment.

    Among (near-)ties the earliest token takes the higher width, i.e. the
    result is the lexicographically largest optimal bit vector.
    """
    s, n = _check_instance(scores, table, budget_bits)
    if n > max_tokens:
        raise ParameterError(f"{n} tokens exceeds the exact-solver cap {max_tokens}")
    units = min(int(np.floor(budget_bits / 2 + 1e-9)), 8 * n)
    cost = table.eps * s[:, None]  # [n, 4]
    # best[t][u]: minimal cost of tokens t.. with at most u units left
    best = np.zeros((n + 1, units + 1))
    inf = np.inf
    for t in range(n - 1, -1, -1):
        nxt = best[t + 1]
        cur = np.full(units + 1, inf)
        for k in range(4):
            w = _UNITS[k]
            if w > units:
                continue
            cand = np.full(units + 1, inf)
            cand[w:] = cost[t, k] + nxt[: units + 1 - w]
            cur = np.minimum(cur, cand)
        best[t] = cur
    bits = np.empty(n, dtype=np.int64)
    u = units
    for t in range(n):
        target = best[t, u]
        for k in (3, 2, 1, 0):
            w = _UNITS[k]
            if w > u:
                continue
            c = cost[t, k] + best[t + 1, u - w]
            if c <= target or _tied(c, target):
                bits[t] = WIDTHS[k]
                u -= w
                break
    return BitAssignment.build(bits, s, table)


def allocate_greedy(scores, table: ErrorTable, budget_bits: float) -> BitAssignment:
    s, n = _check_instance(scores, table, budget_bits)
    level = np.zeros(n, dtype=np.int64)
    remaining = float(budget_bits) - 2 * n
    upgrades = 0
    while True:
        movable = level < 3
        nxt = np.minimum(level + 1, 3)
        dbits = (WIDTHS[nxt] - WIDTHS[level]).astype(np.float64)
        gain = s * (table.eps[np.arange(n), level] - table.eps[np.arange(n), nxt])
        fits = movable & (dbits <= remaining + 1e-9)
        if not fits.any():
            break
        ratio = np.where(fits, gain / np.where(dbits > 0, dbits, 1), -np.inf)
        t = int(np.argmax(ratio))  # lowest index among ties
        remaining -= dbits[t]
        level[t] += 1
        upgrades += 1
    assert upgrades <= 3 * n
    return BitAssignment.build(WIDTHS[level], s, table)


# -- controller ------------------------------------------------------------------

N_FEATURES = 6
N_HIDDEN = 46
N_CLASSES = 4


@dataclass(frozen=True, eq=False)
class ControllerWeights:
    w1: np.ndarray  # [6, 46]
    b1: np.ndarray  # [46]
    w2: np.ndarray  # [46, 4]
    b2: np.ndarray  # [4]
    activation: str = "relu"

    def __post_init__(self):
        shapes = {"w1": (N_FEATURES, N_HIDDEN), "b1": (N_HIDDEN,),
                  "w2": (N_HIDDEN, N_CLASSES), "b2": (N_CLASSES,)}
        for name, shape in shapes.items():
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != shape:
                raise ModelError(f"{name} has shape {a.shape}, expected {shape}")
            if not np.isfinite(a).all():
                raise ModelError(f"{name} contains non-finite weights")
            object.__setattr__(self, name, a)
        if self.activation != "relu":
            raise ModelError(f"unsupported activation {self.activation!r}")

    @property
    def n_parameters(self) -> int:
        return sum(a.size for a in (self.w1, self.b1, self.w2, self.b2))

    @classmethod
    def zeros(cls) -> "ControllerWeights":
        return cls(np.zeros((N_FEATURES, N_HIDDEN)), np.zeros(N_HIDDEN),
                   np.zeros((N_HIDDEN, N_CLASSES)), np.zeros(N_CLASSES))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    @classmethod
    def from_flat(cls, theta) -> "ControllerWeights":
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        shapes = ((N_FEATURES, N_HIDDEN), (N_HIDDEN,), (N_HIDDEN, N_CLASSES), (N_CLASSES,))
        sizes = [int(np.prod(shape)) for shape in shapes]
        if theta.size != sum(sizes):
            raise ModelError(f"flat parameter vector has {theta.size} entries, expected {sum(sizes)}")
        parts = np.split(theta, np.cumsum(sizes)[:-1])
        return cls(*(p.reshape(shape) for p, shape in zip(parts, shapes)))


def controller_logits(features, w: ControllerWeights) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != N_FEATURES:
        raise DimensionError(f"features must be [n, {N_FEATURES}]")
    if not np.isfinite(x).all():
        raise ParameterError("features must be finite")
    return np.maximum(x @ w.w1 + w.b1, 0.0) @ w.w2 + w.b2


def controller_infer(features, w: ControllerWeights) -> np.ndarray:
    """Per-token bit widths; ties resolve toward fewer bits."""
    return WIDTHS[np.argmax(controller_logits(features, w), axis=1)]


@dataclass(frozen=True)
class TrainingConfig:
    """Full-batch Adam; the learning rate halves every ``decay_every`` steps."""

    seed: int = 0
    steps: int = 1500
    learning_rate: float = 0.03
    decay_every: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    init_scale: float = 0.5
    class_weighting: bool = True


@dataclass(frozen=True, eq=False)
class TrainingResult:
    weights: ControllerWeights
    train_accuracy: float
    final_loss: float


def _class_weights(y: np.ndarray, balanced: bool) -> np.ndarray:
    counts = np.bincount(y, minlength=N_CLASSES).astype(np.float64)
    if not balanced:
        return np.ones(N_CLASSES)
    present = counts > 0
    cw = np.zeros(N_CLASSES)
    cw[present] = len(y) / (present.sum() * counts[present])
    return cw


def loss_and_grad(theta: np.ndarray, x: np.ndarray, y: np.ndarray, class_weights: np.ndarray):
    """Class-weighted mean cross-entropy and its gradient w.r.t. the flat parameters."""
    w = ControllerWeights.from_flat(theta)
    pre = x @ w.w1 + w.b1
    h = np.maximum(pre, 0.0)
    z = h @ w.w2 + w.b2
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    sw = class_weights[y]
    norm = sw.sum()
    rows = np.arange(len(y))
    loss = -(sw * logp[rows, y]).sum() / norm
    dz = np.exp(logp)
    dz[rows, y] -= 1.0
    dz *= (sw / norm)[:, None]
    gw2 = h.T @ dz
    gb2 = dz.sum(axis=0)
    dh = (dz @ w.w2.T) * (pre > 0)
    gw1 = x.T @ dh
    gb1 = dh.sum(axis=0)
    return float(loss), np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


def _labels_to_classes(labels) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if not np.isin(lab, WIDTHS).all():
        raise ParameterError(f"labels must be bit widths from {BIT_WIDTHS}")
    return _index_of(lab)


def controller_train(features, labels, hyper: TrainingConfig = TrainingConfig()) -> TrainingResult:
    """Train the controller; ``labels`` are bit widths from {2, 4, 8, 16}."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ParameterError("training set is empty")
    if x.shape[1] != N_FEATURES:
        raise DimensionError(f"features must be [n, {N_FEATURES}]")
    y = _labels_to_classes(labels)
    if len(y) != len(x):
        raise DimensionError("features and labels differ in length")
    cw = _class_weights(y, hyper.class_weighting)
    g = np.random.default_rng(hyper.seed)
    theta = np.concatenate([
        g.normal(0, hyper.init_scale * np.sqrt(2.0 / N_FEATURES), N_FEATURES * N_HIDDEN),
        np.full(N_HIDDEN, 0.01),
        g.normal(0, hyper.init_scale * np.sqrt(2.0 / N_HIDDEN), N_HIDDEN * N_CLASSES),
        np.zeros(N_CLASSES),
    ])
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    loss = float("nan")
    for step in range(1, hyper.steps + 1):
        loss, grad = loss_and_grad(theta, x, y, cw)
        lr = hyper.learning_rate * 0.5 ** ((step - 1) // hyper.decay_every)
        m = hyper.beta1 * m + (1 - hyper.beta1) * grad
        v = hyper.beta2 * v + (1 - hyper.beta2) * grad * grad
        mhat = m / (1 - hyper.beta1 ** step)
        vhat = v / (1 - hyper.beta2 ** step)
        theta = theta - lr * mhat / (np.sqrt(vhat) + 1e-8)
    weights = ControllerWeights.from_flat(theta)
    acc = float((controller_infer(x, weights) == WIDTHS[y]).mean())
    return TrainingResult(weights, acc, loss)


# QKVW: magic, u16 version, u16 reserved, u32 in/hidden/out, u8 activation,
# 3 pad bytes, float64 w1|b1|w2|b2 row-major, u32 CRC32 of everything before it
QKVW_MAGIC = b"QKVW"
QKVW_VERSION = 1
_QKVW_HEADER = struct.Struct("<4sHHIIIB3x")
_ACTIVATIONS = {"relu": 1}


def encode_weights(w: ControllerWeights) -> bytes:
    head = _QKVW_HEADER.pack(QKVW_MAGIC, QKVW_VERSION, 0, N_FEATURES, N_HIDDEN, N_CLASSES,
                             _ACTIVATIONS[w.activation])
    body = head + w.flat().astype("<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_weights(data: bytes) -> ControllerWeights:
    if data[:4] != QKVW_MAGIC:
        raise BadMagicError(f"bad magic {bytes(data[:4])!r}, expected {QKVW_MAGIC!r}")
    if len(data) < _QKVW_HEADER.size + 4:
        raise TruncatedError("QKVW file truncated")
    _, version, _, nin, nh, nout, act = _QKVW_HEADER.unpack_from(data)
    if version != QKVW_VERSION:
        raise UnsupportedVersionError(f"QKVW version {version}")
    if (nin, nh, nout) != (N_FEATURES, N_HIDDEN, N_CLASSES) or act != 1:
        raise ModelError(f"unsupported controller geometry {(nin, nh, nout)} / activation {act}")
    n_params = nin * nh + nh + nh * nout + nout
    expected = _QKVW_HEADER.size + 8 * n_params + 4
    if len(data) < expected:
        raise TruncatedError("QKVW payload truncated")
    if len(data) > expected:
        raise PayloadSizeError("trailing bytes after QKVW payload")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[: expected - 4]) != crc:
        raise ChecksumError("QKVW checksum mismatch")
    theta = np.frombuffer(data, dtype="<f8", count=n_params, offset=_QKVW_HEADER.size)
    return ControllerWeights.from_flat(theta)


# -- calibration labels ---------------------------------------------------------

DEFAULT_LABEL_THRESHOLD = 1e-2


def _relative_error(out: np.ndarray, ref: np.ndarray) -> float:
    num = float(np.linalg.norm(out - ref))
    den = float(np.linalg.norm(ref))
    if den == 0:
        return 0.0 if num == 0 else float("inf")
    return num / den


def quantize_token_rows(cache: KVCache, token: int, bits: int,
                        group_size: int = GROUP_SIZE) -> KVCache:
    """Copy of ``cache`` with only ``token``'s key and value rows quantized (per-token groups)."""
    keys = cache.keys.copy()
    values = cache.values.copy()
    if bits != 16:
        for arr in (keys, values):
            for s, e in chunk_bounds(cache.head_dim, group_size):
                rows = arr[:, :, token, s:e]
                sc, zp, codes = _affine_rows(rows, bits)
                arr[:, :, token, s:e] = _affine_restore(sc[..., None], zp[..., None], codes)
    return KVCache(keys, values)


def label_calibration(cache: KVCache, evaluator: Callable[[KVCache], np.ndarray],
                      threshold: float = DEFAULT_LABEL_THRESHOLD,
                      group_size: int = GROUP_SIZE) -> np.ndarray:
    """Smallest width per token whose isolated quantization keeps the
    evaluator's relative output error below ``threshold``."""
    ref = np.asarray(evaluator(cache), dtype=np.float64)
    labels = np.full(cache.tokens, 16, dtype=np.int64)
    for t in range(cache.tokens):
        for b in BIT_WIDTHS[:3]:
            out = np.asarray(evaluator(quantize_token_rows(cache, t, b, group_size)), dtype=np.float64)
            if _relative_error(out, ref) < threshold:
                labels[t] = b
                break
    return labels


def uniform_objective(scores, table: ErrorTable, budget_bits: float) -> tuple[int, float]:
    """Largest uniform width fitting the budget and its objective."""
    n = len(table)
    fitting = [int(b) for b in WIDTHS if b * n <= budget_bits + 1e-9]
    if not fitting:
        raise ParameterError("no uniform width fits the budget")
    width = max(fitting)
    return width, objective(np.full(n, width), scores, table)


__all__ = [
    "BitAssignment", "ControllerWeights", "ErrorTable", "TrainingConfig", "TrainingResult",
    "allocate_exact", "allocate_greedy", "build_error_table", "controller_infer",
    "controller_train", "decode_weights", "encode_weights", "label_calibration", "loss_and_grad",
    "objective", "uniform_objective",
]
