"""Variant x gamma grid over all six task orders.

Defaults cover the replay comparison: every variant at gamma 0.01, 0.05 and
0.2 plus the no-replay baseline. Output goes to <out>/grid.jsonl (resumable)
and <out>/grid.tsv; a rerun with the same arguments skips finished cells.

    python scripts/run_grid.py --out runs/grid --workers 1
    python scripts/run_grid.py --variants baseline,rvae --gammas 0.2 --seeds 0
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from rvae_lll.bench import harness
from rvae_lll.config import VARIANTS, RunConfig, load


def csv(kind):
    return lambda text: [kind(x) for x in text.split(",") if x]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="flat JSON config used as the base of every cell")
    ap.add_argument("--variants", type=csv(str), default=list(VARIANTS))
    ap.add_argument("--gammas", type=csv(float), default=[0.01, 0.05, 0.2])
    ap.add_argument("--seeds", type=csv(int), default=[0, 1, 2])
    ap.add_argument("--orders", type=csv(str), default=["all"])
    ap.add_argument("--no-replay-baseline", action="store_true", help="skip the baseline at gamma=0")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/grid")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    base = load(args.config) if args.config else RunConfig()
    base = base.replace(orders=args.orders, seeds=args.seeds, workers=args.workers, out_dir=args.out)
    blocks = [base.replace(variants=args.variants, gammas=args.gammas)]
    if not args.no_replay_baseline:
        blocks.append(base.replace(variants=["baseline"], gammas=[0.0]))

    records = []
    for cfg in blocks:
        records += harness.run_grid(cfg, progress=lambda r: logging.info(
            "%s gamma=%s seed=%s %s -> %.2f", r["variant"], r["gamma"], r["seed"], r["order"], r["average"]))
    harness.write_grid_table(Path(args.out) / "grid.tsv", records)
    for row in harness.summarize_grid(records):
        if row["seed"] == "pooled":
            corr = "n/a" if row["correspondence"] is None else f"{row['correspondence']:.3f}"
            print(f"{row['variant']:<9} gamma={row['gamma']:<5} average={row['average']:6.2f} std={row['std']:5.2f} correspondence={corr}")
    print(f"table: {Path(args.out) / 'grid.tsv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
