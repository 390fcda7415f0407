"""Compare re-prefilling a context with injecting a card, across context sizes.

    python demos/ttft_curve.py
"""

from kvhandoff.bench import TimingConfig, run_stage_timing


def main():
    print(f"{'tokens':>7} {'create':>8} {'inject':>8} {'generate':>9} {'ttft':>8} {'re-prefill':>11}")
    for r in run_stage_timing(TimingConfig(contexts=(256, 476, 1024, 1939, 3877), trials=3)):
        m = r.stage_medians
        print(f"{r.context_tokens:>7} {m['create_card']:>8.2f} {m['inject']:>8.2f} "
              f"{m['generate']:>9.2f} {r.handoff_ttft:>8.2f} {r.reprefill_median:>11.2f}")
    print("times are medians in milliseconds")


if __name__ == "__main__":
    main()
