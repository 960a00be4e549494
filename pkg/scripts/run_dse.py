#!/usr/bin/env python3
"""Run the single-cluster design-space sweep (108 configs x 33 workloads)
and print the headline efficiency observations."""

import argparse
import statistics
import sys
from collections import defaultdict
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from svsim.cli import load_sweep_spec, run_sweep

SPEC = Path(__file__).resolve().parent.parent / "configs" / "sweep_single_cluster.json"


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--spec", default=str(SPEC))
    ap.add_argument("--out", default="dse_out")
    ap.add_argument("--parallelism", type=int, default=8)
    ap.add_argument("--sample", type=float, default=1.0)
    args = ap.parse_args()

    spec = load_sweep_spec(args.spec)
    rows, failures = run_sweep(spec, args.out, parallelism=args.parallelism,
                               sample=args.sample)
    print(f"{len(rows)} data points -> {args.out}/results.csv")
    if failures:
        for f in failures:
            print(f"FAILED {f}", file=sys.stderr)
        return 1

    by_config = defaultdict(list)
    for r in rows:
        by_config[r["config"]].append(r)
    print("\ntop configurations by mean TOPS/mm2:")
    scored = sorted(
        ((statistics.mean(x["tops"] for x in v) / v[0]["area_mm2"], k)
         for k, v in by_config.items()), reverse=True)
    for score, cfg in scored[:10]:
        mean_tops = statistics.mean(x["tops"] for x in by_config[cfg])
        print(f"  {cfg:28s} {mean_tops:7.3f} TOPS  "
              f"{by_config[cfg][0]['area_mm2']:6.1f} mm2  {score * 1000:.2f} GOPS/mm2")
    return 0


if __name__ == "__main__":
    sys.exit(main())
