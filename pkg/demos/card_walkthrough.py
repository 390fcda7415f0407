"""Quantize a synthetic cache three ways and compare the resulting cards.

    python demos/card_walkthrough.py
"""

import numpy as np

from kvhandoff.allocator import allocate_exact, build_error_table
from kvhandoff.cachecard import build_card, decode_card, encode_card
from kvhandoff.handoff import ToyModel, measured_attention_stats, toy_forward
from kvhandoff.importance import local_importance
from kvhandoff.quantizer import dequantize_cache, quantize_cache
from kvhandoff.tensorio import SyntheticConfig, generate_synthetic_cache


def relative_error(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def main():
    cache = generate_synthetic_cache(SyntheticConfig(seed=1, layers=2, heads=4, tokens=64, head_dim=32))
    model = ToyModel.for_cache(cache, seed=1)
    queries = model.eval_queries(8)
    reference = toy_forward(model, cache, queries)

    scores = local_importance(measured_attention_stats(model, cache))
    table = build_error_table(cache)
    adaptive = allocate_exact(scores, table, 5 * cache.tokens)

    print(f"{'assignment':<12} {'avg bits':>8} {'card bytes':>10} {'ratio':>6} {'output error':>12}")
    for name, bits in (("uniform Q4", 4), ("uniform Q8", 8), ("adaptive 5", adaptive.bits)):
        card = build_card(quantize_cache(cache, bits), model.model_id, "agent0")
        data = encode_card(card)
        restored = dequantize_cache(decode_card(data).quantized)
        err = relative_error(toy_forward(model, restored, queries), reference)
        print(f"{name:<12} {card.stats.average_bits:>8.2f} {len(data):>10} "
              f"{card.stats.compression_ratio:>6.3f} {err:>12.2e}")
    print("adaptive width histogram:", {b: int((adaptive.bits == b).sum()) for b in (2, 4, 8, 16)})


if __name__ == "__main__":
    main()
