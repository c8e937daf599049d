"""One-axis sweeps on the fixed order cls -> span -> slot.

Runs adapter position, latent size and training mode in turn (or the axes
named with --axes), each value repeated over --repeats seeds, and writes one
resumable directory per axis under --out.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from rvae_lll.bench import harness
from rvae_lll.config import RunConfig, load

DEFAULT_VALUES = {
    "adapter_position": None,  # every block boundary of the backbone
    "latent_dim": [10, 50, 100, 200],
    "alt_mode": ["naive", "alt_m1", "alt_m1_rev", "alt_m1_star", "alt"],
}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="flat JSON config used as the base")
    ap.add_argument("--axes", default=",".join(DEFAULT_VALUES))
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    base = load(args.config) if args.config else RunConfig().with_variant("rvae")
    for axis in args.axes.split(","):
        values = DEFAULT_VALUES[axis] or list(range(base.n_layers + 1))
        out = Path(args.out) / axis
        cfg = base.replace(workers=args.workers, out_dir=str(out))
        records = harness.sweep(cfg, axis, values, args.repeats, progress=lambda r: logging.info(
            "%s=%s repeat=%s -> %.2f", r["axis"], r["value"], r["repeat"], r["average"]))
        for row in harness.summarize_sweep(records, values):
            print(f"{axis}={row['value']}: mean={row['mean']:.2f} std={row['std']:.2f} (n={row['runs']})")
        print(f"table: {out / 'sweep.tsv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
