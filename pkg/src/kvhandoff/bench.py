"""Stage-timing and hop-sweep benchmarks, plus JSON/CSV report emission."""

from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cachecard import build_card
from .errors import ParameterError
from .handoff import ChainConfig, ToyModel, TopologyGraph, inject_card, run_chain, toy_forward
from .quantizer import quantize_cache
from .tensorio import SyntheticConfig, generate_synthetic_cache

DEFAULT_CONTEXTS = (476, 1939, 3877)
STAGES = ("create_card", "inject", "generate")
SWEEP_HOPS = (2, 3, 4, 5)
SWEEP_BUDGETS = (4, 8)
SWEEP_METHODS = ("fp16_share", "uniform_q4", "uniform_q8", "adaptive_local", "adaptive_topology")

TIMING_CSV_HEADER = ("context_tokens,trials,create_card_ms,inject_ms,generate_ms,"
                     "reprefill_ms,handoff_ttft_ms")
SWEEP_CSV_HEADER = ("method,hops,budget_bits,mean_error,max_error,mean_card_bytes,"
                    "mean_average_bits,mean_weighted_objective,mean_uniform_objective,trials")


@dataclass(frozen=True)
class StageTimingReport:
    context_tokens: int
    trials: int
    stage_medians: dict[str, float]
    reprefill_median: float
    handoff_ttft: float


@dataclass(frozen=True)
class TimingConfig:
    contexts: tuple[int, ...] = DEFAULT_CONTEXTS
    trials: int = 2
    layers: int = 2
    heads: int = 4
    head_dim: int = 32
    bits: int = 4
    seed: int = 0
    warmup: bool = True


def _ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1000.0


def run_stage_timing(cfg: TimingConfig = TimingConfig()) -> list[StageTimingReport]:
    """Median wall-clock of re-prefill against card create / inject / generate.

    Re-prefill is the full causal pass over the context followed by the same
    one-step decode that ``generate`` measures on the injected cache.
    """
    if cfg.trials < 2:
        raise ParameterError("stage timing needs at least two trials")
    if not cfg.contexts or min(cfg.contexts) < 1:
        raise ParameterError("contexts must be positive token counts")
    model = ToyModel(cfg.layers, cfg.heads, cfg.head_dim, seed=cfg.seed)
    query = model.eval_queries(1)
    reports = []
    for n in cfg.contexts:
        samples = {k: [] for k in (*STAGES, "reprefill")}
        for trial in range(cfg.trials + int(cfg.warmup)):
            emb = model.prefill_embeddings(n, seed=cfg.seed * 1000 + trial)
            t0 = time.perf_counter()
            cache = model.prefill(emb)
            toy_forward(model, cache, query)
            reprefill = _ms(t0)

            t0 = time.perf_counter()
            card = build_card(quantize_cache(cache, cfg.bits), model.model_id, "sender")
            create = _ms(t0)
            received, inject = inject_card(card, model.model_id)
            t0 = time.perf_counter()
            toy_forward(model, received, query)
            generate = _ms(t0)
            if cfg.warmup and trial == 0:
                continue
            for key, value in zip((*STAGES, "reprefill"), (create, inject, generate, reprefill)):
                samples[key].append(value)
        medians = {k: statistics.median(samples[k]) for k in STAGES}
        reports.append(StageTimingReport(
            context_tokens=n, trials=cfg.trials, stage_medians=medians,
            reprefill_median=statistics.median(samples["reprefill"]),
            handoff_ttft=medians["inject"] + medians["generate"],
        ))
    return reports


@dataclass(frozen=True)
class SweepCell:
    method: str
    hops: int
    budget_bits: int
    mean_error: float
    max_error: float
    mean_card_bytes: float
    mean_average_bits: float
    mean_weighted_objective: float
    mean_uniform_objective: float
    trials: int


@dataclass(frozen=True)
class SweepReport:
    cells: list[SweepCell]
    seeds: list[int]


@dataclass(frozen=True)
class SweepConfig:
    methods: tuple[str, ...] = SWEEP_METHODS
    hops: tuple[int, ...] = SWEEP_HOPS
    budgets: tuple[int, ...] = SWEEP_BUDGETS
    seeds: tuple[int, ...] = (0, 1, 2)
    policy: str = "requantize_each_hop"
    layers: int = 2
    heads: int = 2
    tokens: int = 48
    head_dim: int = 32
    solver: str = "exact"
    alpha: float = 0.5
    tokens_per_hop: int = 0
    chain: ChainConfig = field(default_factory=ChainConfig)


def _fields(obj) -> dict:
    """Dataclass fields without recursing, so nested weight objects stay intact."""
    return {name: getattr(obj, name) for name in obj.__dataclass_fields__}


def run_error_sweep(cfg: SweepConfig = SweepConfig()) -> SweepReport:
    """One chain per (seed, method, budget); hop h of it fills the ``hops=h`` cell.

    A ``hops=h`` cell is the error seen by the last receiver of an h-hop chain,
    which for a deterministic chain equals hop h of a longer one.
    """
    if not cfg.seeds:
        raise ParameterError("sweep needs at least one seed")
    if min(cfg.hops) < 1:
        raise ParameterError("hop counts must be >= 1")
    graph = TopologyGraph.chain(max(cfg.hops) + 1)
    cells = []
    for method in cfg.methods:
        for budget in cfg.budgets:
            per_hop: dict[int, list] = {h: [] for h in cfg.hops}
            for seed in cfg.seeds:
                cache = generate_synthetic_cache(SyntheticConfig(
                    seed=seed, layers=cfg.layers, heads=cfg.heads, tokens=cfg.tokens,
                    head_dim=cfg.head_dim))
                chain_cfg = ChainConfig(**{**_fields(cfg.chain), "budget_bits": float(budget),
                                           "seed": seed, "solver": cfg.solver, "alpha": cfg.alpha,
                                           "tokens_per_hop": cfg.tokens_per_hop})
                reports = run_chain(graph, cache, method, cfg.policy, chain_cfg)
                for h in cfg.hops:
                    per_hop[h].append(reports[h - 1])
            for h in cfg.hops:
                rs = per_hop[h]
                errs = [r.output_relative_error for r in rs]
                cells.append(SweepCell(
                    method=method, hops=h, budget_bits=budget,
                    mean_error=float(np.mean(errs)), max_error=float(np.max(errs)),
                    mean_card_bytes=float(np.mean([r.card_bytes for r in rs])),
                    mean_average_bits=float(np.mean([r.average_bits for r in rs])),
                    mean_weighted_objective=float(np.mean([r.weighted_objective for r in rs])),
                    mean_uniform_objective=float(np.mean([r.uniform_objective for r in rs])),
                    trials=len(rs),
                ))
    return SweepReport(cells, list(cfg.seeds))


# -- emission --------------------------------------------------------------------


def _rows(report) -> tuple[str, list[list]]:
    if isinstance(report, SweepReport):
        return SWEEP_CSV_HEADER, [[getattr(c, k) for k in SWEEP_CSV_HEADER.split(",")]
                                  for c in report.cells]
    if isinstance(report, list) and all(isinstance(r, StageTimingReport) for r in report):
        return TIMING_CSV_HEADER, [
            [r.context_tokens, r.trials, *(r.stage_medians[s] for s in STAGES),
             r.reprefill_median, r.handoff_ttft] for r in report]
    raise ParameterError(f"cannot emit a report of type {type(report).__name__}")


def _to_jsonable(report):
    if isinstance(report, SweepReport):
        return {"kind": "sweep", **asdict(report)}
    if isinstance(report, list):
        _rows(report)  # type check
        return {"kind": "stage_timing", "contexts": [asdict(r) for r in report]}
    raise ParameterError(f"cannot emit a report of type {type(report).__name__}")


def render_report(report, fmt: str = "json") -> bytes:
    if fmt == "json":
        return (json.dumps(_to_jsonable(report), indent=2, sort_keys=False) + "\n").encode()
    if fmt == "csv":
        header, rows = _rows(report)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header.split(","))
        w.writerows([[repr(v) if isinstance(v, float) else v for v in row] for row in rows])
        return buf.getvalue().encode()
    raise ParameterError(f"unknown report format {fmt!r}")


def emit_report(report, fmt: str, path) -> int:
    data = render_report(report, fmt)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise ParameterError(f"cannot write report to {path}: {exc}") from None
    return len(data)


def parse_report(data):
    """Inverse of the JSON rendering."""
    obj = json.loads(data)
    if obj.get("kind") == "sweep":
        return SweepReport([SweepCell(**c) for c in obj["cells"]], list(obj["seeds"]))
    if obj.get("kind") == "stage_timing":
        return [StageTimingReport(**r) for r in obj["contexts"]]
    raise ParameterError("unrecognized report JSON")


def load_report(path):
    return parse_report(Path(path).read_bytes())
