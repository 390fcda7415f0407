"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import itertools

import numpy as np

WIDTHS = np.array([2, 4, 8, 16])


def _half_table(n: int):
    """All width-index tuples for ``n`` tokens in lexicographic order."""
    if n == 0:
        return np.zeros((1, 0), dtype=np.int64)
    return np.array(list(itertools.product(range(4), repeat=n)), dtype=np.int64)


def enumerate_optimum(scores, eps, budget_bits, rtol=1e-12):
    """Brute-force min of sum(eps*S) under sum(bits) <= budget.

    Ties (within ``rtol``) go to the lexicographically largest bit vector.
    Both halves are enumerated in lexicographic order, so the row-major flat
    index over (first half, second half) is lexicographic on the whole vector.
    """
    s = np.asarray(scores, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    n = len(s)
    h = n // 2
    a, b = _half_table(h), _half_table(n - h)
    cost = eps * s[:, None]
    # per-token sums in token order so totals match a sequential summation closely
    ca = cost[np.arange(h), a].sum(axis=1) if h else np.zeros(1)
    cb = cost[np.arange(h, n), b].sum(axis=1) if n - h else np.zeros(1)
    wa = WIDTHS[a].sum(axis=1) if h else np.zeros(1, dtype=np.int64)
    wb = WIDTHS[b].sum(axis=1) if n - h else np.zeros(1, dtype=np.int64)
    total = ca[:, None] + cb[None, :]
    feasible = (wa[:, None] + wb[None, :]) <= budget_bits + 1e-9
    total = np.where(feasible, total, np.inf)
    best = total.min()
    tied = feasible & (np.abs(total - best) <= rtol * max(abs(best), 1e-300) + 1e-300)
    flat = np.flatnonzero(tied.ravel()).max()
    i, j = divmod(int(flat), len(b))
    idx = np.concatenate([a[i], b[j]])
    return WIDTHS[idx], float(best)


def affine_reference(x, bits):
    """Scalar-loop affine quantizer: returns (scale, zero, codes, reconstruction)."""
    x = [float(v) for v in x]
    lo, hi = min(x), max(x)
    qmax = (1 << bits) - 1
    scale = float(np.float32((hi - lo) / qmax))
    zero = float(np.float32(lo))
    if hi == lo:
        return 0.0, zero, [0] * len(x), [zero] * len(x)
    codes = [min(qmax, max(0, int(np.floor((v - zero) / scale + 0.5)))) for v in x]
    return scale, zero, codes, [zero + c * scale for c in codes]


def pack_reference(codes, bits):
    """Bit-by-bit LSB-first packer."""
    out = bytearray((len(codes) * bits + 7) // 8)
    pos = 0
    for c in codes:
        for k in range(bits):
            if (c >> k) & 1:
                out[pos // 8] |= 1 << (pos % 8)
            pos += 1
    return bytes(out)


def softmax_attention_reference(model, cache, queries):
    """Loop-form toy forward pass for cross-checking the vectorized one."""
    L, H, n, d = cache.shape
    q = np.asarray(queries, dtype=np.float64)
    out = np.zeros((q.shape[0], d))
    for l in range(L):
        for h in range(H):
            K = cache.keys[l, h].astype(np.float64)
            V = cache.values[l, h].astype(np.float64)
            for i, qi in enumerate(q):
                logits = (qi @ model.w_query[l, h]) @ K.T / (np.sqrt(d) * model.temperature)
                w = np.exp(logits - logits.max())
                w /= w.sum()
                out[i] += (w @ V) @ model.w_out[l, h]
    return out


def allocator_instance(seed: int, max_tokens: int = 12):
    """Seeded (scores, eps, budget) with analytic errors over random value ranges."""
    g = np.random.default_rng(seed)
    n = int(g.integers(1, max_tokens + 1))
    ranges = g.uniform(0.1, 3.0, n)
    steps = ranges[:, None] / (2.0 ** np.array([2, 4, 8]) - 1)
    eps = np.column_stack([steps ** 2 / 12, np.zeros(n)])
    scores = g.uniform(0, 1, n)
    budget = n * int(g.choice([3, 4, 5, 6, 8, 10])) + int(g.integers(0, 4))
    return scores, eps, float(budget)


def separable_set(seed: int = 0, rows: int = 400, margin: float = 0.05):
    """Features whose class is a banded linear score, with a gap around each band edge."""
    g = np.random.default_rng(seed)
    x = g.uniform(0, 1, (rows * 3, 6))
    z = x @ np.array([1.0, 1.0, 0.5, 0.5, 1.0, 0.25])
    edges = np.quantile(z, [0.25, 0.5, 0.75])
    keep = np.min(np.abs(z[:, None] - edges[None, :]), axis=1) > margin
    x, z = x[keep][:rows], z[keep][:rows]
    labels = WIDTHS[np.searchsorted(edges, z)]
    return x, labels
