"""Follow output error down a five-hop chain for each handoff method.

    python demos/chain_propagation.py
"""

from kvhandoff.handoff import METHODS, ChainConfig, TopologyGraph, run_chain
from kvhandoff.tensorio import SyntheticConfig, generate_synthetic_cache


def main():
    cache = generate_synthetic_cache(SyntheticConfig(seed=4, tokens=48, head_dim=32))
    graph = TopologyGraph.chain(6)
    # appended tokens model the receiver generating before it hands off again
    cfg = ChainConfig(budget_bits=4.0, tokens_per_hop=4)
    print(f"{'method':<18} " + " ".join(f"{'hop ' + str(h):>9}" for h in range(1, 6)))
    for method in METHODS:
        reports = run_chain(graph, cache, method, cfg=cfg)
        print(f"{method:<18} " + " ".join(f"{r.output_relative_error:>9.2e}" for r in reports))
    passed = run_chain(graph, cache, "uniform_q4", "pass_through")
    print("pass_through card sizes:", sorted({r.card_bytes for r in passed}))


if __name__ == "__main__":
    main()
