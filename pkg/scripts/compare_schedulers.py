#!/usr/bin/env python3
"""Run the 33-workload desk suite under both schedulers and report the
heterogeneity-aware speedups over round-robin, per CNN:transformer ratio."""

import argparse
import statistics
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from svsim.hardware import load_hw_config
from svsim.simulation import run
from svsim.workloads import RATIO_GRID, standard_suite

DESK_HW = Path(__file__).resolve().parent.parent / "configs" / "desk_hw.json"


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--hw", default=str(DESK_HW))
    ap.add_argument("--requests", type=int, default=24)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    args = ap.parse_args()

    hw = load_hw_config(args.hw)
    suite = standard_suite(request_count=args.requests, seeds=tuple(args.seeds))
    speedups: dict[float, list[float]] = {r: [] for r in RATIO_GRID}
    eff: dict[float, list[float]] = {r: [] for r in RATIO_GRID}
    points = []
    for w in suite:
        _, rep_rr = run(w, hw, scheduler="rr")
        _, rep_has = run(w, hw, scheduler="has")
        s = rep_has.tops / rep_rr.tops
        speedups[w.cnn_ratio].append(s)
        eff[w.cnn_ratio].append(rep_has.tops_per_watt / rep_rr.tops_per_watt)
        points.append((1.0 - w.cnn_ratio, s))
        print(f"{w.name}: rr {rep_rr.tops:7.3f} TOPS  has {rep_has.tops:7.3f} TOPS"
              f"  speedup {s:5.3f}")

    print("\nper-ratio geometric means (throughput, efficiency):")
    for r in RATIO_GRID:
        print(f"  cnn {int(r * 100):3d}%: {statistics.geometric_mean(speedups[r]):.3f}"
              f"  {statistics.geometric_mean(eff[r]):.3f}")
    overall = statistics.geometric_mean([s for ss in speedups.values() for s in ss])
    mid = statistics.geometric_mean(
        [s for r in (0.3, 0.4, 0.5, 0.6, 0.7) for s in speedups[r]])
    slope = statistics.linear_regression([p[0] for p in points],
                                         [p[1] for p in points]).slope
    print(f"\noverall geomean {overall:.3f}; mid-ratio geomean {mid:.3f}; "
          f"speedup-vs-transformer-fraction slope {slope:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
