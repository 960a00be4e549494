"""Command-line front end: model conversion, simulation runs, DSE sweeps.

Subcommands::

    svsim convert  model.json -o model.umf     # description -> binary frame
    svsim inspect  model.umf                   # dump a frame
    svsim simulate --workload w.json --hw hw.json --scheduler has --out DIR
    svsim sweep    --spec sweep.json --out DIR [--parallelism N] [--sample F]
    svsim compare  a.csv b.csv [-o ratios.csv]

Exit codes: 0 success, 1 runtime error, 2 bad usage or config,
3 shared-memory capacity deadlock.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor

from . import hardware, models, simulation, umf, workloads
from .scheduling import CapacityDeadlock, UnpartitionableLayer

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_DEADLOCK = 3

RESULT_FIELDS = ("config", "workload", "cnn_ratio", "seed", "scheduler",
                 "tops", "watts", "tops_per_watt", "area_mm2",
                 "makespan_cycles", "total_ops", "joules")


def _cmd_convert(args) -> int:
    try:
        with open(args.model) as f:
            graph = models.ingest_graph(f.read())
    except OSError as e:
        print(f"error: cannot read {args.model}: {e}", file=sys.stderr)
        return EXIT_ERROR
    except models.ModelError as e:
        print(f"error: {args.model}: {e}", file=sys.stderr)
        return EXIT_USAGE
    frame = models.to_umf(graph, user_id=args.user_id, model_id=args.model_id,
                          transaction_id=args.transaction_id,
                          include_payloads=args.payloads)
    out = args.output or os.path.splitext(args.model)[0] + ".umf"
    with open(out, "wb") as f:
        f.write(umf.encode_frame(frame))
    print(f"wrote {out}: {len(graph.layers)} layers, "
          f"{graph.total_param_bytes} parameter bytes")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    try:
        with open(args.file, "rb") as f:
            buf = f.read()
        print(umf.inspect_frame(buf))
    except OSError as e:
        print(f"error: cannot read {args.file}: {e}", file=sys.stderr)
        return EXIT_ERROR
    except umf.UmfError as e:
        print(f"error: {args.file}: {e}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def _cmd_simulate(args) -> int:
    try:
        workload = workloads.load_manifest(args.workload)
        hw = hardware.load_hw_config(args.hw)
    except (OSError, json.JSONDecodeError, hardware.ConfigError, KeyError) as e:
        print(f"error: bad input: {e}", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(args.out, exist_ok=True)
    try:
        trace, report = simulation.run(workload, hw, scheduler=args.scheduler,
                                       seed=args.seed, alpha=args.alpha)
    except (CapacityDeadlock, UnpartitionableLayer) as e:
        print(f"deadlock: {e}", file=sys.stderr)
        return EXIT_DEADLOCK
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump({**report.__dict__,
                   "utilization": report.utilization,
                   "request_latency": {str(k): v for k, v in
                                       report.request_latency.items()}},
                  f, indent=2, sort_keys=True)
    simulation.export_trace(trace, os.path.join(args.out, "trace.json"))
    with open(os.path.join(args.out, "decisions.jsonl"), "w") as f:
        for d in trace.decisions:
            f.write(json.dumps(d, sort_keys=True) + "\n")
    print(f"workload={workload.name} scheduler={args.scheduler} "
          f"makespan={report.makespan_cycles} cycles "
          f"tops={report.tops:.4f} tops_per_watt={report.tops_per_watt:.4f} "
          f"area={report.area_mm2:.1f}mm2")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep

def load_sweep_spec(source) -> dict:
    if isinstance(source, dict):
        doc = source
    else:
        with open(source) as f:
            doc = json.load(f)
    doc.setdefault("arrays", [[8, 16], [2, 32], [4, 32], [8, 32], [2, 64], [4, 64]])
    doc.setdefault("vectors", [[8, 16], [4, 32], [8, 32], [2, 64], [4, 64], [8, 64]])
    doc.setdefault("shared_mem_mb", [45, 65, 105])
    doc.setdefault("clusters", [1])
    doc.setdefault("clock_mhz", 800)
    doc.setdefault("hbm_gbps", 256)
    doc.setdefault("hbm_latency_cycles", 100)
    doc.setdefault("scheduler", "has")
    doc.setdefault("workload_suite", {})
    return doc


def sweep_configs(spec: dict) -> list[dict]:
    """Cartesian product of the hardware axes; 6 x 6 x 3 = 108 per cluster count."""
    out = []
    for nc in spec["clusters"]:
        for na, dim in spec["arrays"]:
            for nv, lanes in spec["vectors"]:
                for sm in spec["shared_mem_mb"]:
                    out.append({
                        "label": f"a{na}x{dim}_v{nv}x{lanes}_sm{sm}_c{nc}",
                        "num_clusters": nc, "num_arrays": na, "array_dim": dim,
                        "num_vectors": nv, "vector_lanes": lanes,
                        "shared_mem_mb": sm,
                        "clock_mhz": spec["clock_mhz"],
                        "hbm_gbps": spec["hbm_gbps"],
                        "hbm_latency_cycles": spec["hbm_latency_cycles"],
                    })
    return out


def sweep_workloads(spec: dict) -> list[workloads.Workload]:
    ws = spec.get("workload_suite", {})
    return workloads.standard_suite(
        request_count=ws.get("request_count", 8),
        seeds=tuple(ws.get("seeds", (1, 2, 3))),
        model_params=ws.get("model_params"))


def _config_to_hw(cfg: dict) -> hardware.HardwareConfig:
    clock_hz = cfg["clock_mhz"] * 1e6
    cluster = hardware.make_cluster(
        cfg["num_arrays"], cfg["array_dim"], cfg["num_vectors"],
        cfg["vector_lanes"], cfg["shared_mem_mb"], clock_hz=clock_hz)
    return hardware.make_hw(cfg["num_clusters"], cluster,
                            hbm_gbps=cfg["hbm_gbps"],
                            hbm_latency_cycles=cfg["hbm_latency_cycles"],
                            clock_hz=clock_hz)


def run_sweep_point(cfg: dict, workload: workloads.Workload,
                    scheduler: str) -> dict:
    hw = _config_to_hw(cfg)
    _, report = simulation.run(workload, hw, scheduler=scheduler)
    return {"config": cfg["label"], "workload": workload.name,
            "cnn_ratio": workload.cnn_ratio, "seed": workload.seed,
            "scheduler": scheduler, "tops": report.tops,
            "watts": report.watts, "tops_per_watt": report.tops_per_watt,
            "area_mm2": report.area_mm2,
            "makespan_cycles": report.makespan_cycles,
            "total_ops": report.total_ops, "joules": report.joules}


def _point_worker(job):
    cfg, workload, scheduler, path = job
    try:
        row = run_sweep_point(cfg, workload, scheduler)
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(row, f, sort_keys=True)
        os.replace(tmp, path)
        return (path, None)
    except Exception as e:  # noqa: BLE001 - reported in the failure table
        return (path, f"{type(e).__name__}: {e}")


def run_sweep(spec: dict, out_dir: str, *, scheduler: str | None = None,
              parallelism: int = 1, sample: float = 1.0) -> tuple[list[dict], list[str]]:
    """Run (or resume) a sweep; returns (rows, failures).

    Every point is cached as a JSON record so an interrupted sweep resumes,
    and merged results are independent of the worker count.
    """
    scheduler = scheduler or spec["scheduler"]
    points_dir = os.path.join(out_dir, "points")
    os.makedirs(points_dir, exist_ok=True)
    configs = sweep_configs(spec)
    suite = sweep_workloads(spec)
    jobs = []
    paths = []
    for cfg in configs:
        for w in suite:
            path = os.path.join(points_dir, f"{cfg['label']}__{w.name}.json")
            paths.append(path)
            if not os.path.exists(path):
                jobs.append((cfg, w, scheduler, path))
    if sample < 1.0:
        import random
        keep = random.Random(1234).sample(
            range(len(paths)), max(1, int(len(paths) * sample)))
        kept_paths = {paths[i] for i in keep}
        jobs = [j for j in jobs if j[3] in kept_paths]
        paths = sorted(kept_paths)

    failures: list[str] = []
    if parallelism <= 1:
        results = map(_point_worker, jobs)
    else:
        pool = ProcessPoolExecutor(max_workers=parallelism)
        results = pool.map(_point_worker, jobs, chunksize=4)
    for path, err in results:
        if err is not None:
            failures.append(f"{os.path.basename(path)}: {err}")
    if parallelism > 1:
        pool.shutdown()

    rows = []
    for path in sorted(paths):
        if os.path.exists(path):
            with open(path) as f:
                rows.append(json.load(f))
    rows.sort(key=lambda r: (r["config"], r["workload"]))
    write_results_csv(rows, os.path.join(out_dir, "results.csv"))
    return rows, failures


def write_results_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in RESULT_FIELDS})


def read_results_csv(path: str) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _cmd_sweep(args) -> int:
    try:
        spec = load_sweep_spec(args.spec) if args.spec else load_sweep_spec({})
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: bad sweep spec: {e}", file=sys.stderr)
        return EXIT_USAGE
    rows, failures = run_sweep(spec, args.out, scheduler=args.scheduler,
                               parallelism=args.parallelism, sample=args.sample)
    print(f"sweep complete: {len(rows)} rows -> {args.out}/results.csv")
    if failures:
        print(f"{len(failures)} failed points:", file=sys.stderr)
        for f_ in failures:
            print(f"  {f_}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def compare_results(rows_a: list[dict], rows_b: list[dict]) -> list[dict]:
    """Per-(config, workload) B/A ratios plus geometric-mean summary rows."""
    index_a = {(r["config"], r["workload"]): r for r in rows_a}
    index_b = {(r["config"], r["workload"]): r for r in rows_b}
    if set(index_a) != set(index_b):
        missing = set(index_a) ^ set(index_b)
        raise KeyError(f"result keys differ on {len(missing)} entries, "
                       f"e.g. {sorted(missing)[:3]}")
    out = []
    speedups, eff = [], []
    for key in sorted(index_a):
        a, b = index_a[key], index_b[key]
        s = float(b["tops"]) / float(a["tops"])
        e = (float(b["tops_per_watt"]) / float(a["tops_per_watt"])
             if float(a["tops_per_watt"]) else 0.0)
        speedups.append(s)
        eff.append(e)
        out.append({"config": key[0], "workload": key[1],
                    "speedup": s, "efficiency_ratio": e})
    out.append({"config": "geomean", "workload": "*",
                "speedup": statistics.geometric_mean(speedups),
                "efficiency_ratio": statistics.geometric_mean([e for e in eff if e > 0] or [1.0])})
    return out


def _cmd_compare(args) -> int:
    try:
        rows = compare_results(read_results_csv(args.a), read_results_csv(args.b))
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    if args.output:
        with open(args.output, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=("config", "workload",
                                                   "speedup", "efficiency_ratio"))
            writer.writeheader()
            writer.writerows(rows)
    for r in rows[-1:]:
        print(f"geomean speedup={r['speedup']:.4f} "
              f"efficiency_ratio={r['efficiency_ratio']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svsim",
                                description="systolic-vector accelerator simulator")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("convert", help="model description JSON -> .umf")
    c.add_argument("model")
    c.add_argument("-o", "--output")
    c.add_argument("--user-id", type=int, default=0)
    c.add_argument("--model-id", type=int, default=0)
    c.add_argument("--transaction-id", type=int, default=0)
    c.add_argument("--payloads", action="store_true",
                   help="emit zero-filled tensor bodies")
    c.set_defaults(fn=_cmd_convert)

    i = sub.add_parser("inspect", help="dump a .umf file")
    i.add_argument("file")
    i.set_defaults(fn=_cmd_inspect)

    s = sub.add_parser("simulate", help="run one workload")
    s.add_argument("--workload", required=True)
    s.add_argument("--hw", required=True)
    s.add_argument("--scheduler", choices=("rr", "has"), default="has")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--out", default=os.environ.get("SVSIM_OUT", "out"))
    s.set_defaults(fn=_cmd_simulate)

    w = sub.add_parser("sweep", help="design-space exploration sweep")
    w.add_argument("--spec", help="sweep spec JSON (defaults to the full single-cluster space)")
    w.add_argument("--scheduler", choices=("rr", "has"))
    w.add_argument("--parallelism", type=int, default=1)
    w.add_argument("--sample", type=float, default=1.0,
                   help="run a deterministic sample of the points")
    w.add_argument("--out", default=os.environ.get("SVSIM_OUT", "sweep_out"))
    w.set_defaults(fn=_cmd_sweep)

    m = sub.add_parser("compare", help="speedup table of results B over A")
    m.add_argument("a")
    m.add_argument("b")
    m.add_argument("-o", "--output")
    m.set_defaults(fn=_cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CapacityDeadlock, UnpartitionableLayer) as e:
        print(f"deadlock: {e}", file=sys.stderr)
        return EXIT_DEADLOCK


if __name__ == "__main__":
    sys.exit(main())
