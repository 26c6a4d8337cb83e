"""Train (or load cached) models and print the ordering, RL, cascade and decoding comparisons."""
import argparse
import logging

from seqdet3d.experiments import (
    RunCache,
    acceptance_setup,
    cascade_comparison,
    decoding_comparison,
    ordering_ablation,
    rl_comparison,
)

PARTS = {
    "ordering": ordering_ablation,
    "rl": rl_comparison,
    "cascade": cascade_comparison,
    "decoding": decoding_comparison,
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cache", help="checkpoint cache directory (default: $SEQDET3D_CACHE or ./.cache/seqdet3d)")
    ap.add_argument("--only", default=",".join(PARTS), help="comma-separated subset of " + ", ".join(PARTS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    setup, cache = acceptance_setup(), RunCache(args.cache)
    for name in args.only.split(","):
        rows = PARTS[name](setup, cache)
        print(f"== {name}")
        for row in rows.values():
            print(row.line() + (f"  ({row.seconds / 60:.1f} min)" if row.seconds else ""), flush=True)


if __name__ == "__main__":
    main()
