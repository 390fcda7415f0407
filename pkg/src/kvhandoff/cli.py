"""Command-line front end: ``kvhandoff <command> [options]``.

Exit codes: 0 success, 2 usage or parameter error, 3 data or format error,
4 protocol or compatibility error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import socket
import sys
from pathlib import Path

import numpy as np

from . import bench, config
from .allocator import (
    allocate_exact,
    allocate_greedy,
    build_error_table,
    controller_infer,
    decode_weights,
)
from .cachecard import build_card, decode_card, encode_card
from .errors import (
    CompatibilityError,
    DataError,
    DimensionError,
    KVHandoffError,
    ParameterError,
    ProtocolError,
)
from .handoff import (
    DEFAULT_MODEL_ID,
    METHODS,
    POLICIES,
    SOLVERS,
    ChainConfig,
    ToyModel,
    TopologyGraph,
    density_calculator,
    measured_attention_stats,
    run_chain,
)
from .importance import (
    AnchorPool,
    SegmentMap,
    anchor_embeddings,
    combine_scores,
    compute_features,
    downstream_demand,
    local_importance,
)
from .quantizer import dequantize_cache, quantization_bounds, quantize_cache
from .tensorio import SyntheticConfig, generate_synthetic_cache, load_container, store_container
from .transport import Handshake, Session

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROTOCOL = 0, 2, 3, 4


# -- report rendering ------------------------------------------------------------


def _flatten(row: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in row.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def render(report, fmt: str) -> bytes:
    """JSON object, or CSV with one row per record (``records`` list or the object itself)."""
    if fmt == "json":
        return (json.dumps(report, indent=2) + "\n").encode()
    rows = report["records"] if "records" in report else [report]
    rows = [_flatten(r) for r in rows]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else [], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue().encode()


def _emit(args, data: bytes) -> None:
    if args.out:
        try:
            Path(args.out).write_bytes(data)
        except OSError as exc:
            raise DataError(f"cannot write {args.out}: {exc}") from None
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# -- shared helpers --------------------------------------------------------------


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def _load_cache(path):
    try:
        return load_container(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def _segments(args, n: int) -> SegmentMap:
    if getattr(args, "segments", None):
        seg = SegmentMap.parse(_read_bytes(args.segments).decode("utf-8"))
        if seg.tokens != n:
            raise DimensionError(f"segment map covers {seg.tokens} tokens, cache has {n}")
        return seg
    return SegmentMap.uniform(n)


def _synthetic(args):
    return generate_synthetic_cache(SyntheticConfig(
        seed=args.seed, layers=args.layers, heads=args.heads, tokens=args.tokens,
        head_dim=args.head_dim, value_scale=args.value_scale,
        heavy_hitter_fraction=args.heavy_fraction))


def _assign_bits(args, cache):
    """Per-token widths for ``--bits`` (uniform) or ``--budget`` (adaptive)."""
    n = cache.tokens
    if args.budget is None:
        return np.full(n, args.bits)
    model = ToyModel.for_cache(cache, seed=args.seed)
    stats = measured_attention_stats(model, cache)
    seg = _segments(args, n)
    pool = AnchorPool(np.zeros((0, cache.head_dim)), np.zeros(0))
    demand = downstream_demand(anchor_embeddings(cache), pool, seg)
    scores = combine_scores(local_importance(stats), demand, args.alpha).combined
    table = build_error_table(cache, "measured", args.group_size)
    if args.solver == "exact":
        return allocate_exact(scores, table, args.budget * n, max_tokens=max(n, 64)).bits
    if args.solver == "greedy":
        return allocate_greedy(scores, table, args.budget * n).bits
    if not args.controller:
        raise ParameterError("--solver controller needs --controller WEIGHTS")
    weights = decode_weights(_read_bytes(args.controller))
    return controller_infer(compute_features(stats, seg, demand), weights)


def _stats_dict(card) -> dict:
    s = card.stats
    L, H, n, d = card.dims
    return {
        "model_id": card.model_id, "sender_id": card.sender_id,
        "layers": L, "heads": H, "tokens": n, "head_dim": d,
        "group_size": card.quantized.group_size, "position_offset": card.position_offset,
        "average_bits": s.average_bits, "payload_bytes": s.payload_bytes,
        "fp16_equivalent_bytes": s.fp16_equivalent_bytes, "compression_ratio": s.compression_ratio,
    }


# -- commands --------------------------------------------------------------------


def cmd_synth(args) -> dict:
    cache = _synthetic(args)
    written = store_container(cache, args.output)
    return {"path": str(args.output), "bytes": written, "shape": list(cache.shape),
            "sha256": _sha256(_read_bytes(args.output))}


def cmd_quantize(args) -> dict:
    cache = _load_cache(args.input)
    bits = _assign_bits(args, cache)
    q = quantize_cache(cache, bits, args.group_size)
    rec = dequantize_cache(q)
    kb, vb = quantization_bounds(q)
    key_err = np.abs(rec.keys.astype(np.float64) - cache.keys)
    val_err = np.abs(rec.values.astype(np.float64) - cache.values)
    if args.dequantized:
        store_container(rec, args.dequantized)
    return {
        "tokens": cache.tokens, "average_bits": q.average_bits,
        "payload_bytes": q.payload_nbytes(),
        "max_key_error": float(key_err.max()), "max_value_error": float(val_err.max()),
        "key_bound_excess": float((key_err - kb).max()),
        "value_bound_excess": float((val_err - vb).max()),
        "bits_histogram": {str(b): int((bits == b).sum()) for b in (2, 4, 8, 16)},
    }


def cmd_card_encode(args) -> dict:
    cache = _load_cache(args.input)
    q = quantize_cache(cache, _assign_bits(args, cache), args.group_size)
    card = build_card(q, args.model_id, args.sender_id, args.position_offset)
    data = encode_card(card)
    try:
        Path(args.output).write_bytes(data)
    except OSError as exc:
        raise DataError(f"cannot write {args.output}: {exc}") from None
    return {"path": str(args.output), "bytes": len(data), "sha256": _sha256(data),
            **_stats_dict(card)}


def cmd_card_decode(args) -> dict:
    card = decode_card(_read_bytes(args.input))
    cache = dequantize_cache(card.quantized)
    written = store_container(cache, args.output)
    return {"path": str(args.output), "bytes": written, **_stats_dict(card)}


def cmd_card_stats(args) -> dict:
    data = _read_bytes(args.input)
    card = decode_card(data)
    return {"bytes": len(data), "sha256": _sha256(data), **_stats_dict(card)}


def cmd_handoff_run(args) -> dict:
    cache = _load_cache(args.input) if args.input else _synthetic(args)
    if args.topology:
        graph = TopologyGraph.parse(_read_bytes(args.topology).decode("utf-8"))
    else:
        graph = TopologyGraph.chain(args.agents, args.model_id)
    weights = decode_weights(_read_bytes(args.controller)) if args.controller else None
    cfg = ChainConfig(budget_bits=args.budget, alpha=args.alpha, solver=args.solver,
                      group_size=args.group_size, seed=args.seed,
                      tokens_per_hop=args.tokens_per_hop, transport=args.transport,
                      controller=weights)
    reports = run_chain(graph, cache, args.method, args.policy, cfg,
                        _segments(args, cache.tokens))
    records = []
    for r in reports:
        records.append({
            "hop": r.hop, "method": r.method, "policy": r.policy, "sender": r.sender,
            "receiver": r.receiver, "tokens": r.tokens, "average_bits": r.average_bits,
            "output_relative_error": r.output_relative_error, "card_bytes": r.card_bytes,
            "weighted_objective": r.weighted_objective,
            "uniform_objective": r.uniform_objective,
            "stage_times": {"create_card": r.stage_times.create_card,
                            "inject": r.stage_times.inject,
                            "generate": r.stage_times.generate},
        })
    return {"records": records}


def cmd_bench_ttft(args) -> bytes:
    cfg = bench.TimingConfig(contexts=args.contexts, trials=args.trials, layers=args.layers,
                             heads=args.heads, head_dim=args.head_dim, bits=args.bits,
                             seed=args.seed)
    return bench.render_report(bench.run_stage_timing(cfg), args.format)


def cmd_bench_sweep(args) -> bytes:
    for m in args.methods:
        if m not in METHODS:
            raise ParameterError(f"unknown method {m!r}")
    cfg = bench.SweepConfig(methods=args.methods, hops=args.hops, budgets=args.budgets,
                            seeds=args.seeds, policy=args.policy, layers=args.layers,
                            heads=args.heads, tokens=args.tokens, head_dim=args.head_dim,
                            solver=args.solver, alpha=args.alpha,
                            tokens_per_hop=args.tokens_per_hop)
    return bench.render_report(bench.run_error_sweep(cfg), args.format)


def cmd_density(args) -> dict:
    if len(args.dims) != 4:
        raise ParameterError("--dims needs four integers L,H,n,d")
    contexts = density_calculator(args.device_bytes, args.overhead_bytes, args.dims,
                                  args.bytes_per_element)
    fp16 = density_calculator(args.device_bytes, args.overhead_bytes, args.dims, 2)
    return {"device_bytes": args.device_bytes, "overhead_bytes": args.overhead_bytes,
            "dims": list(args.dims), "bytes_per_element": args.bytes_per_element,
            "contexts": contexts, "fp16_contexts": fp16,
            "ratio_vs_fp16": (contexts / fp16) if fp16 else None}


def cmd_serve(args) -> dict:
    local = Handshake(args.agent_id, args.model_id)
    with socket.create_server((args.host, args.port)) as server:
        port = server.getsockname()[1]
        if args.port_file:
            Path(args.port_file).write_text(f"{port}\n")
        print(f"listening on {args.host}:{port}", file=sys.stderr, flush=True)
        conn, _ = server.accept()
    records = []
    with conn:
        session = Session.over_socket(conn, local)
        remote = session.accept().remote
        save = Path(args.save_dir) if args.save_dir else None
        if save:
            save.mkdir(parents=True, exist_ok=True)
        while True:
            try:
                card = session.receive_card()
            except ProtocolError as exc:
                if session.closed:
                    break
                raise exc
            data = encode_card(card)
            if save:
                (save / f"card_{len(records)}.qkvc").write_bytes(data)
            records.append({"index": len(records), "from": remote.agent_id,
                            "bytes": len(data), "sha256": _sha256(data), **_stats_dict(card)})
    return {"records": records}


def cmd_send(args) -> dict:
    local = Handshake(args.agent_id, args.model_id)
    cards = [_read_bytes(p) for p in args.cards]
    records = []
    with socket.create_connection((args.host, args.port), timeout=args.timeout) as conn:
        session = Session.over_socket(conn, local)
        session.connect()
        for path, data in zip(args.cards, cards):
            sent = session.send_card(decode_card(data))
            records.append({"path": str(path), "frame_bytes": sent, "sha256": _sha256(data)})
        session.close()
    return {"records": records}


# -- parser ----------------------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="seed for every random stream")
    p.add_argument("--config", default=d(None), help="flat key=value settings file")
    p.add_argument("--out", default=d(None), help="write the report here instead of stdout")
    p.add_argument("--format", choices=("json", "csv"), default=d("json"))


def _cache_flags(p) -> None:
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--tokens", type=int, default=64)
    p.add_argument("--head-dim", type=int, default=32)
    p.add_argument("--value-scale", type=float, default=1.0)
    p.add_argument("--heavy-fraction", type=float, default=0.125)


def _alloc_flags(p) -> None:
    p.add_argument("--bits", type=int, default=4, choices=(2, 4, 8, 16),
                   help="uniform width, used when --budget is absent")
    p.add_argument("--budget", type=float, default=None,
                   help="average bits per token for adaptive allocation")
    p.add_argument("--solver", choices=SOLVERS, default="exact")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--controller", default=None, help="QKVW weights for --solver controller")
    p.add_argument("--segments", default=None, help="segment sidecar: 'start end kind' lines")
    p.add_argument("--group-size", type=int, default=32)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvhandoff", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(container, name, func, **kw):
        p = container.add_parser(name, **kw)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = command(sub, "synth", cmd_synth, help="write a seeded synthetic cache (QKVT)")
    p.add_argument("output")
    _cache_flags(p)

    p = command(sub, "quantize", cmd_quantize, help="quantize a cache and report errors")
    p.add_argument("input")
    p.add_argument("--dequantized", default=None, help="also write the reconstruction (QKVT)")
    _alloc_flags(p)

    card = sub.add_parser("card", help="CacheCard encode / decode / stats")
    card_sub = card.add_subparsers(dest="card_command", required=True)
    p = command(card_sub, "encode", cmd_card_encode, help="cache (QKVT) to card (QKVC)")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--model-id", default=DEFAULT_MODEL_ID)
    p.add_argument("--sender-id", default="agent0")
    p.add_argument("--position-offset", type=int, default=0)
    _alloc_flags(p)
    p = command(card_sub, "decode", cmd_card_decode, help="card (QKVC) to cache (QKVT)")
    p.add_argument("input")
    p.add_argument("output")
    p = command(card_sub, "stats", cmd_card_stats, help="print card statistics")
    p.add_argument("input")

    handoff = sub.add_parser("handoff", help="multi-hop chain simulation")
    handoff_sub = handoff.add_subparsers(dest="handoff_command", required=True)
    p = command(handoff_sub, "run", cmd_handoff_run, help="run one chain and report each hop")
    p.add_argument("--input", default=None, help="source cache; synthetic when absent")
    p.add_argument("--topology", default=None, help="'agent'/'edge' topology file")
    p.add_argument("--agents", type=int, default=5)
    p.add_argument("--model-id", default=DEFAULT_MODEL_ID)
    p.add_argument("--method", choices=METHODS, default="uniform_q4")
    p.add_argument("--policy", choices=POLICIES, default="requantize_each_hop")
    p.add_argument("--budget", type=float, default=4.0)
    p.add_argument("--solver", choices=SOLVERS, default="exact")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--controller", default=None)
    p.add_argument("--segments", default=None)
    p.add_argument("--group-size", type=int, default=32)
    p.add_argument("--tokens-per-hop", type=int, default=0)
    p.add_argument("--transport", type=config.boolean, default=False,
                   help="round-trip every card through its wire encoding")
    _cache_flags(p)

    bench_p = sub.add_parser("bench", help="benchmarks")
    bench_sub = bench_p.add_subparsers(dest="bench_command", required=True)
    p = command(bench_sub, "ttft", cmd_bench_ttft, help="stage timing against re-prefill")
    p.add_argument("--contexts", type=config.int_list, default=bench.DEFAULT_CONTEXTS)
    p.add_argument("--trials", type=int, default=2)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--head-dim", type=int, default=32)
    p.add_argument("--bits", type=int, default=4, choices=(2, 4, 8, 16))
    p = command(bench_sub, "sweep", cmd_bench_sweep, help="hop x budget x method error grid")
    p.add_argument("--methods", type=config.str_list, default=bench.SWEEP_METHODS)
    p.add_argument("--hops", type=config.int_list, default=bench.SWEEP_HOPS)
    p.add_argument("--budgets", type=config.int_list, default=bench.SWEEP_BUDGETS)
    p.add_argument("--seeds", type=config.int_list, default=(0, 1, 2))
    p.add_argument("--policy", choices=POLICIES, default="requantize_each_hop")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--tokens", type=int, default=48)
    p.add_argument("--head-dim", type=int, default=32)
    p.add_argument("--solver", choices=SOLVERS[:2], default="exact")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--tokens-per-hop", type=int, default=0)

    p = command(sub, "density", cmd_density, help="resident contexts per device")
    p.add_argument("--device-bytes", type=int, default=12 * 2**30)
    p.add_argument("--overhead-bytes", type=int, default=0)
    p.add_argument("--dims", type=config.int_list, default=(32, 8, 8192, 128))
    p.add_argument("--bytes-per-element", type=float, default=0.5)

    p = command(sub, "serve", cmd_serve, help="receive cards over TCP until the peer says bye")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7412)
    p.add_argument("--port-file", default=None, help="write the bound port here")
    p.add_argument("--agent-id", default="receiver")
    p.add_argument("--model-id", default=DEFAULT_MODEL_ID)
    p.add_argument("--save-dir", default=None)

    p = command(sub, "send", cmd_send, help="send card files to a serving agent")
    p.add_argument("cards", nargs="+")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7412)
    p.add_argument("--agent-id", default="sender")
    p.add_argument("--model-id", default=DEFAULT_MODEL_ID)
    p.add_argument("--timeout", type=float, default=30.0)
    return parser


def _leaf_parser(parser: argparse.ArgumentParser, argv) -> argparse.ArgumentParser:
    """The subparser that handles ``argv``."""
    current = parser
    for token in argv:
        subs = [a for a in current._actions if isinstance(a, argparse._SubParsersAction)]
        if subs and token in subs[0].choices:
            current = subs[0].choices[token]
    return current


_GLOBAL_KEYS = ("seed", "out", "format")


def _apply_config(parser, argv, path) -> argparse.Namespace:
    """Re-parse ``argv`` with config values as defaults; explicit flags still win."""
    settings = config.load_config(path)
    leaf = _leaf_parser(parser, argv)
    known = {a.dest: a for a in leaf._actions if a.option_strings}
    top, local = {}, {}
    for key, raw in settings.items():
        action = known.get(key)
        if action is None or key in ("config", "help"):
            raise ParameterError(f"config key {key!r} is not an option of this command")
        value = action.type(raw) if action.type else raw
        if action.choices is not None and value not in action.choices:
            raise ParameterError(f"config {key}={raw!r} not in {list(action.choices)}")
        (top if key in _GLOBAL_KEYS else local)[key] = value
    parser.set_defaults(**top)
    leaf.set_defaults(**local)
    return parser.parse_args(argv)


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, (ProtocolError, CompatibilityError, ConnectionError, socket.timeout)):
        return EXIT_PROTOCOL
    if isinstance(exc, ParameterError):
        return EXIT_USAGE
    return EXIT_DATA


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.config:
            args = _apply_config(parser, argv, args.config)
        result = args.func(args)
        _emit(args, result if isinstance(result, bytes) else render(result, args.format))
    except (KVHandoffError, OSError) as exc:
        print(f"kvhandoff: error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
