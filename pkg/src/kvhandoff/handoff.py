"""Agent chains, the receiver-side inject path and a deterministic toy attention model.

The toy model stands in for the receiving LLM: it reads a KV cache through
scaled dot-product attention, so any perturbation of the cache shows up as
an output perturbation that can be measured against an unquantized run.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

import numpy as np

from . import rng
from .allocator import (
    BitAssignment,
    ControllerWeights,
    allocate_exact,
    allocate_greedy,
    build_error_table,
    controller_infer,
    uniform_objective,
)
from .cachecard import CacheCard, build_card, decode_card, encode_card
from .errors import CompatibilityError, DimensionError, ParameterError, TopologyError
from .importance import (
    AnchorPool,
    SegmentKind,
    SegmentMap,
    anchor_embeddings,
    combine_scores,
    compute_features,
    downstream_demand,
    local_importance,
    update_anchor_pool,
)
from .quantizer import GROUP_SIZE, dequantize_cache, quantize_cache
from .tensorio import AttentionStats, KVCache

METHODS = ("fp16_share", "uniform_q4", "uniform_q8", "adaptive_local", "adaptive_topology")
POLICIES = ("requantize_each_hop", "pass_through")
SOLVERS = ("exact", "greedy", "controller")

DEFAULT_MODEL_ID = "toy-v1"

_STREAM_WQ = 101
_STREAM_WO = 102
_STREAM_GEN_K = 103
_STREAM_GEN_V = 104
_STREAM_PREFILL = 105
_STREAM_EVAL_Q = 110
_STREAM_PROBE_Q = 111
_STREAM_GEN_Q = 112

_PREFILL_BLOCK = 512


# -- topology --------------------------------------------------------------------


@dataclass(frozen=True)
class Agent:
    agent_id: str
    model_id: str


@dataclass(frozen=True)
class TopologyGraph:
    agents: tuple[Agent, ...]
    edges: tuple[tuple[str, str], ...]
    kind: str = field(init=False)

    def __post_init__(self):
        ids = [a.agent_id for a in self.agents]
        if not ids:
            raise TopologyError("topology has no agents")
        if len(set(ids)) != len(ids):
            raise TopologyError("duplicate agent ids")
        known = set(ids)
        for src, dst in self.edges:
            if src not in known or dst not in known:
                raise TopologyError(f"edge ({src}, {dst}) references an unknown agent")
            if src == dst:
                raise TopologyError(f"self-loop on {src}")
        object.__setattr__(self, "kind", self._classify())

    def _classify(self) -> str:
        n = len(self.agents)
        indeg = {a.agent_id: 0 for a in self.agents}
        outdeg = dict(indeg)
        for s, d in self.edges:
            outdeg[s] += 1
            indeg[d] += 1
        if len(set(self.edges)) != len(self.edges) or len(self.edges) != n - 1:
            raise TopologyError("topology must be a chain or a tree (n-1 distinct edges)")
        roots = [a for a, v in indeg.items() if v == 0]
        if len(roots) != 1 or max(indeg.values()) > 1:
            raise TopologyError("topology must have a single root and in-degree <= 1")
        children: dict[str, list[str]] = {}
        for s, d in self.edges:
            children.setdefault(s, []).append(d)
        seen, stack = set(), [roots[0]]
        while stack:
            node = stack.pop()
            seen.add(node)
            stack.extend(children.get(node, []))
        if len(seen) != n:
            raise TopologyError("topology is not connected")
        return "chain" if max(outdeg.values(), default=0) <= 1 else "tree"

    @classmethod
    def chain(cls, k: int, model_id: str = DEFAULT_MODEL_ID) -> "TopologyGraph":
        agents = tuple(Agent(f"agent{i}", model_id) for i in range(k))
        edges = tuple((f"agent{i}", f"agent{i + 1}") for i in range(k - 1))
        return cls(agents, edges)

    @classmethod
    def parse(cls, text: str) -> "TopologyGraph":
        """Plain-text form: ``agent <id> <model>`` and ``edge <from> <to>`` lines."""
        agents, edges = [], []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "agent" and len(parts) == 3:
                agents.append(Agent(parts[1], parts[2]))
            elif parts[0] == "edge" and len(parts) == 3:
                edges.append((parts[1], parts[2]))
            else:
                raise TopologyError(f"line {lineno}: cannot parse {line!r}")
        return cls(tuple(agents), tuple(edges))

    def format(self) -> str:
        lines = [f"agent {a.agent_id} {a.model_id}" for a in self.agents]
        lines += [f"edge {s} {d}" for s, d in self.edges]
        return "\n".join(lines) + "\n"

    def chain_order(self) -> list[Agent]:
        if self.kind != "chain":
            raise TopologyError(f"{self.kind} topologies are not supported; chains only")
        by_id = {a.agent_id: a for a in self.agents}
        nxt = dict(self.edges)
        start = (set(by_id) - set(nxt.values())).pop()
        order = [by_id[start]]
        while order[-1].agent_id in nxt:
            order.append(by_id[nxt[order[-1].agent_id]])
        return order


# -- toy model -------------------------------------------------------------------


def _softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ToyModel:
    """Deterministic multi-head attention reader over an ``[L, H, n, d]`` cache."""

    layers: int
    heads: int
    head_dim: int
    seed: int = 0
    temperature: float = 1.0
    model_id: str = DEFAULT_MODEL_ID

    def __post_init__(self):
        if min(self.layers, self.heads, self.head_dim) < 1:
            raise ParameterError("toy model dimensions must be >= 1")
        if not self.temperature > 0:
            raise ParameterError("temperature must be positive")

    @classmethod
    def for_cache(cls, cache: KVCache, **kw) -> "ToyModel":
        return cls(cache.layers, cache.heads, cache.head_dim, **kw)

    @property
    def hidden(self) -> int:
        return self.heads * self.head_dim

    def _normal(self, stream: int, shape, std: float) -> np.ndarray:
        return rng.normal(self.seed, stream, math.prod(shape)).reshape(shape) * std

    @cached_property
    def w_query(self) -> np.ndarray:
        L, H, d = self.layers, self.heads, self.head_dim
        return self._normal(_STREAM_WQ, (L, H, d, d), 1 / math.sqrt(d)) + np.eye(d)

    @cached_property
    def w_out(self) -> np.ndarray:
        L, H, d = self.layers, self.heads, self.head_dim
        return self._normal(_STREAM_WO, (L, H, d, d), 1 / math.sqrt(d * L * H))

    @cached_property
    def w_gen(self) -> tuple[np.ndarray, np.ndarray]:
        L, H, d = self.layers, self.heads, self.head_dim
        return (self._normal(_STREAM_GEN_K, (L, H, d, d), 1 / math.sqrt(d)),
                self._normal(_STREAM_GEN_V, (L, H, d, d), 1 / math.sqrt(d)))

    @cached_property
    def w_prefill(self) -> tuple[np.ndarray, np.ndarray]:
        L, D = self.layers, self.hidden
        qkv = self._normal(_STREAM_PREFILL, (L, D, 3 * D), 1 / math.sqrt(D))
        out = self._normal(_STREAM_PREFILL + 1, (L, D, D), 1 / math.sqrt(D * L))
        return qkv, out

    def check_cache(self, cache: KVCache) -> None:
        if (cache.layers, cache.heads, cache.head_dim) != (self.layers, self.heads, self.head_dim):
            raise DimensionError(
                f"cache {cache.shape} does not fit model ({self.layers}, {self.heads}, *, {self.head_dim})")

    def attention(self, cache: KVCache, queries) -> np.ndarray:
        """Attention weights ``[L, H, q, n]`` of the projected queries over the cache."""
        self.check_cache(cache)
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != self.head_dim:
            raise DimensionError(f"queries must be [q, {self.head_dim}]")
        qp = np.einsum("qd,lhde->lhqe", q, self.w_query)
        logits = np.einsum("lhqe,lhne->lhqn", qp, cache.keys.astype(np.float64))
        return _softmax(logits / (math.sqrt(self.head_dim) * self.temperature))

    def eval_queries(self, count: int, stream: int = _STREAM_EVAL_Q) -> np.ndarray:
        return rng.normal(self.seed, stream, count * self.head_dim).reshape(count, self.head_dim)

    def prefill(self, embeddings) -> KVCache:
        """Causal forward pass over ``[n, H*d]`` embeddings, returning the KV cache it populates."""
        x = np.asarray(embeddings, dtype=np.float64)
        n, D = x.shape
        if D != self.hidden:
            raise DimensionError(f"embeddings must be [n, {self.hidden}]")
        L, H, d = self.layers, self.heads, self.head_dim
        w_qkv, w_o = self.w_prefill
        keys = np.empty((L, H, n, d), dtype=np.float32)
        values = np.empty_like(keys)
        for l in range(L):
            h = x / np.sqrt((x * x).mean(axis=1, keepdims=True) + 1e-6)
            q, k, v = np.split(h @ w_qkv[l], 3, axis=1)
            q = q.reshape(n, H, d).transpose(1, 0, 2)
            k = k.reshape(n, H, d).transpose(1, 0, 2)
            v = v.reshape(n, H, d).transpose(1, 0, 2)
            keys[l], values[l] = k, v
            mixed = np.empty((H, n, d))
            # query blocks keep the causal score matrix small for long contexts
            for lo in range(0, n, _PREFILL_BLOCK):
                hi = min(n, lo + _PREFILL_BLOCK)
                scores = q[:, lo:hi] @ k[:, :hi].transpose(0, 2, 1) / math.sqrt(d)
                rows = np.arange(lo, hi)[:, None]
                scores[:, np.arange(hi)[None, :] > rows] = -np.inf
                mixed[:, lo:hi] = _softmax(scores) @ v[:, :hi]
            x = x + mixed.transpose(1, 0, 2).reshape(n, D) @ w_o[l]
        return KVCache(keys, values)

    def prefill_embeddings(self, tokens: int, seed: int = 0) -> np.ndarray:
        return rng.normal(seed, _STREAM_PREFILL + 7, tokens * self.hidden).reshape(tokens, self.hidden)

    def next_token_kv(self, cache: KVCache) -> tuple[np.ndarray, np.ndarray]:
        """Key/value rows ``[L, H, d]`` for the token the model would emit next."""
        x = toy_forward(self, cache, self.eval_queries(1, _STREAM_GEN_Q))[0]
        x = x / (np.sqrt((x * x).mean()) + 1e-12)
        wk, wv = self.w_gen
        return np.einsum("d,lhde->lhe", x, wk), np.einsum("d,lhde->lhe", x, wv)

    def evaluator(self, queries):
        """Callable mapping a cache to toy outputs, for calibration labeling."""
        return lambda cache: toy_forward(self, cache, queries)


def toy_forward(model: ToyModel, cache: KVCache, queries) -> np.ndarray:
    """``sum_{l,h} softmax(q W_q K^T / sqrt(d)) V W_o``; returns ``[q, d]``."""
    attn = model.attention(cache, queries)
    heads = np.einsum("lhqn,lhnd->lhqd", attn, cache.values.astype(np.float64))
    return np.einsum("lhqd,lhde->qe", heads, model.w_out)


def measured_attention_stats(model: ToyModel, cache: KVCache, probes: int = 16) -> AttentionStats:
    """Attention statistics of ``cache`` as seen by the toy model.

    Frequency and variance come from seeded probe queries; a token's entropy
    is that of its own key used as a query; quality is the token's mean value
    norm relative to the largest.
    """
    a = model.attention(cache, model.eval_queries(probes, _STREAM_PROBE_Q))
    received = a.mean(axis=(0, 1, 2))
    variance = a.var(axis=(0, 1, 2))
    k = cache.keys.astype(np.float64)
    self_attn = _softmax(np.einsum("lhte,lhne->lhtn", k, k) / math.sqrt(model.head_dim))
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(self_attn > 0, self_attn * np.log(self_attn), 0.0)
    entropy = np.maximum(-plogp.sum(axis=-1).mean(axis=(0, 1)), 0.0)
    norms = np.linalg.norm(cache.values.astype(np.float64), axis=-1).mean(axis=(0, 1))
    quality = norms / norms.max() if norms.max() > 0 else np.full_like(norms, 0.5)
    return AttentionStats(received, variance, entropy, quality)


def append_tokens(model: ToyModel, cache: KVCache, count: int) -> KVCache:
    """Extend ``cache`` with ``count`` tokens generated from its own contents."""
    keys, values = cache.keys, cache.values
    for _ in range(count):
        k, v = model.next_token_kv(KVCache(keys, values))
        keys = np.concatenate([keys, k[:, :, None, :].astype(np.float32)], axis=2)
        values = np.concatenate([values, v[:, :, None, :].astype(np.float32)], axis=2)
    return KVCache(keys, values)


# -- inject ----------------------------------------------------------------------


def inject_card(card: CacheCard, model_id: str) -> tuple[KVCache, float]:
    """Rebuild the full-precision cache; returns it with the reconstruction time in ms."""
    if card.model_id != model_id:
        raise CompatibilityError(f"card for model {card.model_id!r} cannot enter {model_id!r}")
    t0 = time.perf_counter()
    cache = dequantize_cache(card.quantized)
    return cache, (time.perf_counter() - t0) * 1000.0


# -- chain simulation ------------------------------------------------------------


@dataclass(frozen=True)
class StageTimes:
    create_card: float
    inject: float
    generate: float


@dataclass(frozen=True)
class HopReport:
    hop: int
    method: str
    policy: str
    sender: str
    receiver: str
    tokens: int
    average_bits: float
    output_relative_error: float
    card_bytes: int
    weighted_objective: float
    uniform_objective: float
    stage_times: StageTimes


@dataclass(frozen=True)
class ChainConfig:
    budget_bits: float = 4.0  # average bits per token for the adaptive methods
    alpha: float = 0.5
    solver: str = "exact"
    error_mode: str = "measured"
    group_size: int = GROUP_SIZE
    eval_queries: int = 8
    probe_queries: int = 16
    seed: int = 0
    temperature: float = 1.0
    tokens_per_hop: int = 0
    anchor_capacity: int = 64
    exact_max_tokens: int = 1024
    transport: bool = False
    priors: dict | None = None
    controller: ControllerWeights | None = None

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ParameterError(f"solver must be one of {SOLVERS}")
        if not 0 <= self.alpha <= 1:
            raise ParameterError("alpha must lie in [0, 1]")
        if self.tokens_per_hop < 0:
            raise ParameterError("tokens_per_hop must be >= 0")
        if self.budget_bits < 2:
            raise ParameterError("budget must allow at least 2 bits per token")


@dataclass
class _Plan:
    assignment: BitAssignment
    uniform_objective: float


def _plan(method: str, cache: KVCache, model: ToyModel, segments: SegmentMap,
          pool: AnchorPool, cfg: ChainConfig) -> _Plan:
    n = cache.tokens
    stats = measured_attention_stats(model, cache, cfg.probe_queries)
    local = local_importance(stats)
    demand = downstream_demand(anchor_embeddings(cache), pool, segments, cfg.priors)
    alpha = 1.0 if method == "adaptive_local" else cfg.alpha
    scores = combine_scores(local, demand, alpha).combined
    table = build_error_table(cache, cfg.error_mode, cfg.group_size)
    fixed = {"fp16_share": 16, "uniform_q4": 4, "uniform_q8": 8}
    # fixed-width methods are compared against uniform at their own budget
    budget = fixed.get(method, cfg.budget_bits) * n
    _, uniform_obj = uniform_objective(scores, table, budget)
    if method in fixed:
        bits = np.full(n, fixed[method])
    elif cfg.solver == "exact":
        bits = allocate_exact(scores, table, budget, cfg.exact_max_tokens).bits
    elif cfg.solver == "greedy":
        bits = allocate_greedy(scores, table, budget).bits
    else:
        if cfg.controller is None:
            raise ParameterError("controller solver needs trained weights")
        bits = controller_infer(compute_features(stats, segments, demand), cfg.controller)
    return _Plan(BitAssignment.build(bits, scores, table), uniform_obj)


def _relative_error(out: np.ndarray, ref: np.ndarray) -> float:
    num = float(np.linalg.norm(out - ref))
    den = float(np.linalg.norm(ref))
    if den == 0:
        return 0.0 if num == 0 else math.inf
    return num / den


def run_chain(graph: TopologyGraph, source: KVCache, method: str,
              policy: str = "requantize_each_hop", cfg: ChainConfig = ChainConfig(),
              segments: SegmentMap | None = None) -> list[HopReport]:
    """Hand ``source`` down a chain of agents; one report per hop.

    Errors compare the receiver's toy outputs against a never-quantized
    reference chain that sees the same generated tokens policy.
    """
    if method not in METHODS:
        raise ParameterError(f"method must be one of {METHODS}")
    if policy not in POLICIES:
        raise ParameterError(f"policy must be one of {POLICIES}")
    agents = graph.chain_order()
    if len(agents) < 2:
        raise TopologyError("a chain needs at least two agents")
    model = ToyModel.for_cache(source, seed=cfg.seed, temperature=cfg.temperature,
                               model_id=agents[1].model_id)
    if segments is None:
        segments = SegmentMap.uniform(source.tokens)
    if segments.tokens != source.tokens:
        raise DimensionError("segment map does not cover the source cache")
    queries = model.eval_queries(cfg.eval_queries)
    pool = AnchorPool(np.zeros((0, source.head_dim)), np.zeros(0), cfg.anchor_capacity)

    reference = current = source
    card: CacheCard | None = None
    encoded = b""
    plan: _Plan | None = None
    reports = []
    for hop in range(1, len(agents)):
        sender, receiver = agents[hop - 1], agents[hop]
        create_ms = 0.0
        if card is None or policy == "requantize_each_hop":
            t0 = time.perf_counter()
            plan = _plan(method, current, model, segments, pool, cfg)
            q = quantize_cache(current, plan.assignment, cfg.group_size)
            card = build_card(q, sender.model_id, sender.agent_id)
            create_ms = (time.perf_counter() - t0) * 1000.0
            encoded = encode_card(card)
        if cfg.transport:
            card = decode_card(encoded)
        received, inject_ms = inject_card(card, receiver.model_id)

        t0 = time.perf_counter()
        out = toy_forward(model, received, queries)
        generate_ms = (time.perf_counter() - t0) * 1000.0
        err = _relative_error(out, toy_forward(model, reference, queries))

        if hop == 1 and method == "adaptive_topology":
            attn = model.attention(received, queries).mean(axis=(0, 1, 2))
            shared = segments.kinds()[: received.tokens] != int(SegmentKind.AGENT_PRIVATE)
            if shared.any():
                weights = attn[shared] / attn.max()
                pool = update_anchor_pool(pool, anchor_embeddings(received)[shared], weights)

        reports.append(HopReport(
            hop=hop, method=method, policy=policy, sender=sender.agent_id,
            receiver=receiver.agent_id, tokens=received.tokens,
            average_bits=plan.assignment.average_bits, output_relative_error=err,
            card_bytes=len(encoded), weighted_objective=plan.assignment.objective_value,
            uniform_objective=plan.uniform_objective,
            stage_times=StageTimes(create_ms, inject_ms, generate_ms),
        ))

        if policy == "requantize_each_hop":
            current = received
            if cfg.tokens_per_hop:
                current = append_tokens(model, current, cfg.tokens_per_hop)
                reference = append_tokens(model, reference, cfg.tokens_per_hop)
                segments = SegmentMap(segments.spans + (
                    (segments.tokens, segments.tokens + cfg.tokens_per_hop,
                     SegmentKind.CONVERSATION),))
    return reports


# -- density ---------------------------------------------------------------------


def density_calculator(device_bytes: int, weight_overhead_bytes: int, dims,
                       bytes_per_element) -> int:
    """Whole contexts of ``2*L*H*n*d*bytes_per_element`` bytes that fit after the overhead."""
    if weight_overhead_bytes > device_bytes:
        raise ParameterError("weight overhead exceeds device memory")
    if weight_overhead_bytes < 0:
        raise ParameterError("overhead must be non-negative")
    L, H, n, d = (int(x) for x in dims)
    bpe = Fraction(str(bytes_per_element)) if isinstance(bytes_per_element, float) else Fraction(bytes_per_element)
    if bpe <= 0 or min(L, H, n, d) < 1:
        raise ParameterError("dimensions and bytes per element must be positive")
    per_context = 2 * L * H * n * d * bpe
    return int((Fraction(device_bytes) - weight_overhead_bytes) // per_context)


__all__ = [
    "METHODS", "POLICIES", "SOLVERS", "Agent", "ChainConfig", "HopReport", "StageTimes",
    "ToyModel", "TopologyGraph", "append_tokens", "density_calculator", "inject_card",
    "measured_attention_stats", "run_chain", "toy_forward",
]
