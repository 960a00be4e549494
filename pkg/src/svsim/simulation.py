"""Deterministic discrete-event simulation of multi-tenant inference.

The engine binds workloads, the hardware config, and a scheduling policy
into timed execution.  Requests arrive at their workload timestamps, the
load balancer admits them to systolic-vector clusters (FIFO, fewest
in-flight first, one task queue per in-flight request), and each cluster's
scheduler is invoked on every arrival, fetch completion and task completion.
Cost-model estimates are exact in this model, so committed reservations are
the execution; the event loop paces decisions and records the trace.

Everything is cycle-quantized at the global clock and fully deterministic:
event ties break on (kind rank, sequence number), and a repeated run of the
same inputs produces a byte-identical trace.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache

from .hardware import (DEFAULT_PHYSICAL, HardwareConfig, PhysicalModel,
                       VECTOR_ENERGY_FOR_OP, peak_performance, total_area)
from .models import ModelGraph, builtin_model
from .scheduling import (ClusterTable, NoReadyTask, Placement, SCHEDULERS,
                         build_request_tasks, load_balance)

# event kinds in tie-break order: completions are observed before new work
_RANK = {"task_complete": 0, "fetch_complete": 1, "flush_complete": 2,
         "request_complete": 3, "request_arrival": 4}


@dataclass(frozen=True)
class ExecRecord:
    cluster: int
    resource: str
    resource_kind: str  # "array" | "vector"
    resource_size: int  # PE dim or lane count
    task_id: str
    request_id: int
    layer_id: int
    op: str
    queue: int
    t_start: int
    t_end: int
    macs: int
    vector_counts: dict
    param_bytes: int
    act_in_bytes: int
    act_out_bytes: int
    deps: tuple[str, ...]


@dataclass(frozen=True)
class TransferRecord:
    cluster: int
    kind: str  # fetch_param | read_act | write_act
    t_start: int
    t_end: int
    bytes: int
    key: str


@dataclass(frozen=True)
class ResidencyEvent:
    cluster: int
    time: int
    delta: int
    key: str


@dataclass
class RequestRecord:
    request_id: int
    model: str
    arrival: int
    cluster: int = -1
    dispatched: int = -1
    completed: int = -1


@dataclass
class TraceLog:
    meta: dict
    executions: list[ExecRecord] = field(default_factory=list)
    transfers: list[TransferRecord] = field(default_factory=list)
    residency: list[ResidencyEvent] = field(default_factory=list)
    requests: list[RequestRecord] = field(default_factory=list)
    decisions: list[dict] = field(default_factory=list)

    def makespan(self) -> int:
        ends = [e.t_end for e in self.executions] + [t.t_end for t in self.transfers]
        return max(ends, default=0)

    def resources(self) -> list[str]:
        return sorted({f"cluster{e.cluster}/{e.resource}" for e in self.executions})

    def events(self) -> list[tuple[int, str, str]]:
        """Every state change as (cycle, kind, subject), time-ordered;
        at equal cycles dispatches precede completions."""
        rank = {"request_arrival": 0, "task_dispatch": 1, "fetch_complete": 2,
                "flush_complete": 3, "task_complete": 4, "request_complete": 5}
        out = [(r.arrival, "request_arrival", f"r{r.request_id}") for r in self.requests]
        out += [(r.completed, "request_complete", f"r{r.request_id}")
                for r in self.requests if r.completed >= 0]
        for e in self.executions:
            out.append((e.t_start, "task_dispatch", e.task_id))
            out.append((e.t_end, "task_complete", e.task_id))
        for t in self.transfers:
            kind = "flush_complete" if t.kind == "write_act" else "fetch_complete"
            out.append((t.t_end, kind, t.key))
        return sorted(out, key=lambda ev: (ev[0], rank[ev[1]], ev[2]))

    def busy_intervals(self) -> dict[str, list[tuple[int, int]]]:
        out: dict[str, list[tuple[int, int]]] = {}
        for e in self.executions:
            out.setdefault(f"cluster{e.cluster}/{e.resource}", []).append(
                (e.t_start, e.t_end))
        return {k: sorted(v) for k, v in sorted(out.items())}


@dataclass(frozen=True)
class PerfReport:
    total_ops: int
    makespan_cycles: int
    seconds: float
    tops: float
    joules: float
    watts: float
    tops_per_watt: float
    area_mm2: float
    peak_gops: float
    utilization: dict
    request_latency: dict


class DeadlockError(Exception):
    """Raised when a task can never satisfy its shared-memory footprint."""


@lru_cache(maxsize=64)
def _cached_builtin(name: str, size: int, batch: int, depth: int) -> ModelGraph:
    return builtin_model(name, size, batch=batch, depth_reduction=depth)


def _graph_for(name: str, params: dict) -> ModelGraph:
    size = (params.get("seq_len", 128) if name.startswith(("bert", "gpt"))
            else params.get("image_size", 224))
    return _cached_builtin(name, size, params.get("batch", 1),
                           params.get("depth_reduction", 1))


def run(workload, hw: HardwareConfig, scheduler: str = "has", seed: int = 0,
        *, graphs: dict[str, ModelGraph] | None = None, alpha: float = 0.5,
        physical: PhysicalModel = DEFAULT_PHYSICAL) -> tuple[TraceLog, PerfReport]:
    """Simulate a workload and return its trace and performance report."""
    if scheduler not in SCHEDULERS:
        raise ValueError(f"unknown scheduler {scheduler!r}; pick from "
                         f"{sorted(SCHEDULERS)}")
    policy = SCHEDULERS[scheduler]
    params = dict(getattr(workload, "model_params", {}) or {})
    if graphs is None:
        graphs = {}
        for req in workload.requests:
            if req.model not in graphs:
                graphs[req.model] = _graph_for(req.model, params)

    trace = TraceLog(meta={
        "scheduler": scheduler, "seed": seed, "clock_hz": hw.clock_hz,
        "workload": getattr(workload, "name", ""),
        "num_clusters": len(hw.clusters),
        "shared_mem_bytes": [cl.shared_mem_bytes for cl in hw.clusters],
        "alpha": alpha,
    })
    tables = [ClusterTable(cl, hw, i) for i, cl in enumerate(hw.clusters)]
    in_flight = [0] * len(tables)
    waiting: list[int] = []
    remaining: dict[int, int] = {}
    records: dict[int, RequestRecord] = {}
    request_cluster: dict[int, int] = {}

    heap: list = []
    seq = 0

    def push(time: int, kind: str, payload) -> None:
        nonlocal seq
        heapq.heappush(heap, (time, _RANK[kind], seq, kind, payload))
        seq += 1

    for req in workload.requests:
        rec = RequestRecord(req.request_id, req.model, req.arrival_cycle)
        records[req.request_id] = rec
        trace.requests.append(rec)
        push(req.arrival_cycle, "request_arrival", req.request_id)

    def dispatch(rid: int, target: int, now: int) -> None:
        rec = records[rid]
        table = tables[target]
        tasks = build_request_tasks(graphs[rec.model], rid, table.cluster,
                                    alpha=alpha, model_key=rec.model)
        table.enqueue_request(rid, tasks)
        in_flight[target] += 1
        request_cluster[rid] = target
        remaining[rid] = len(tasks)
        rec.cluster = target
        rec.dispatched = now

    def record_placement(ci: int, p: Placement) -> None:
        task = p.task
        trace.executions.append(ExecRecord(
            ci, p.processor, p.kind,
            getattr(tables[ci].processors[p.proc_index].spec, "dim", 0)
            or tables[ci].processors[p.proc_index].spec.lanes,
            task.task_id, task.request_id, task.layer_id, task.op.name,
            p.queue, p.t_start, p.t_end, task.cost.macs,
            dict(task.cost.vector_counts), task.cost.param_bytes,
            task.cost.act_in_bytes, task.cost.act_out_bytes, task.deps))
        for a in p.plan.actions:
            if a.kind in ("fetch_param", "read_act", "write_act"):
                trace.transfers.append(TransferRecord(
                    ci, a.kind, a.start, a.end, a.bytes, str(a.key)))
                trace.residency.append(ResidencyEvent(
                    ci, a.start if a.kind != "write_act" else a.end,
                    a.bytes if a.kind != "write_act" else -a.bytes, str(a.key)))
                push(a.end, "fetch_complete", (ci, str(a.key)))
            elif a.kind == "flush":
                trace.residency.append(ResidencyEvent(ci, a.start, -a.bytes, str(a.key)))
                push(a.start, "flush_complete", (ci, str(a.key)))
        if task.act_out_key:
            key, b = task.act_out_key
            trace.residency.append(ResidencyEvent(ci, p.t_start, b, str(key)))
        push(p.t_end, "task_complete", (ci, task.request_id, task.task_id))

    def drain(ci: int, now: int) -> None:
        while True:
            try:
                placement = policy(tables[ci], now)
            except NoReadyTask:
                break
            record_placement(ci, placement)

    def admit_waiting(now: int) -> None:
        # strict FIFO admission: the oldest waiter goes to the least-loaded
        # cluster with a free task-queue slot
        while waiting:
            target = load_balance(in_flight, tables[0].cluster.num_task_queues)
            if target is None:
                break
            dispatch(waiting.pop(0), target, now)
            drain(target, now)

    while heap:
        now, _, _, kind, payload = heapq.heappop(heap)
        if kind == "request_arrival":
            waiting.append(payload)
            admit_waiting(now)
        elif kind == "task_complete":
            ci, rid, _task = payload
            remaining[rid] -= 1
            if remaining[rid] == 0:
                push(now, "request_complete", (ci, rid))
            drain(ci, now)
        elif kind == "request_complete":
            ci, rid = payload
            records[rid].completed = now
            in_flight[ci] -= 1
            tables[ci].release_request(rid)
            admit_waiting(now)
            drain(ci, now)
        else:  # fetch_complete / flush_complete are scheduler invocation points
            ci = payload[0]
            drain(ci, now)

    for table in tables:
        trace.decisions.extend(table.decision_log)
    report = compute_report(trace, hw, physical)
    return trace, report


# ---------------------------------------------------------------------------
# report

def energy_from_trace(trace: TraceLog, physical: PhysicalModel = DEFAULT_PHYSICAL) -> float:
    """Joules, recomputable from the trace alone: op counts times the
    per-op table plus byte-transfer energies."""
    joules = 0.0
    for e in trace.executions:
        if e.resource_kind == "array":
            joules += e.macs * physical.systolic_mac_pj[e.resource_size] * 1e-12
        else:
            lanes = e.resource_size
            joules += e.macs * physical.vector_pj["mac"][lanes] * 1e-12
            for kind, count in e.vector_counts.items():
                row = VECTOR_ENERGY_FOR_OP[kind]
                joules += count * physical.vector_pj[row][lanes] * 1e-12
        sram_bytes = e.param_bytes + e.act_in_bytes + e.act_out_bytes
        joules += sram_bytes * physical.sram_pj_per_byte * 1e-12
    for t in trace.transfers:
        joules += t.bytes * physical.dram_pj_per_byte * 1e-12
    return joules


def compute_report(trace: TraceLog, hw: HardwareConfig,
                   physical: PhysicalModel = DEFAULT_PHYSICAL) -> PerfReport:
    total_ops = sum(2 * e.macs + sum(e.vector_counts.values())
                    for e in trace.executions)
    makespan = trace.makespan()
    seconds = makespan / hw.clock_hz
    joules = energy_from_trace(trace, physical)
    tops = total_ops / seconds / 1e12 if seconds else 0.0
    watts = joules / seconds if seconds else 0.0
    busy: dict[str, int] = {}
    for cl_i, cl in enumerate(hw.clusters):
        for i in range(len(cl.arrays)):
            busy[f"cluster{cl_i}/array{i}"] = 0
        for i in range(len(cl.vectors)):
            busy[f"cluster{cl_i}/vector{i}"] = 0
    for e in trace.executions:
        busy[f"cluster{e.cluster}/{e.resource}"] += e.t_end - e.t_start
    utilization = {name: (100.0 * b / makespan if makespan else 0.0)
                   for name, b in sorted(busy.items())}
    latency = {r.request_id: r.completed - r.arrival
               for r in trace.requests if r.completed >= 0}
    return PerfReport(
        total_ops=total_ops, makespan_cycles=makespan, seconds=seconds,
        tops=tops, joules=joules, watts=watts,
        tops_per_watt=tops / watts if watts else 0.0,
        area_mm2=total_area(hw, physical), peak_gops=peak_performance(hw),
        utilization=utilization, request_latency=latency)


# ---------------------------------------------------------------------------
# trace export and verification

def trace_to_dict(trace: TraceLog) -> dict:
    return {
        "meta": trace.meta,
        "executions": [asdict(e) for e in trace.executions],
        "transfers": [asdict(t) for t in trace.transfers],
        "residency": [asdict(r) for r in trace.residency],
        "requests": [asdict(r) for r in trace.requests],
        "decisions": trace.decisions,
    }


def trace_digest(trace: TraceLog) -> str:
    blob = json.dumps(trace_to_dict(trace), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def export_trace(trace: TraceLog, path: str) -> None:
    """Write the trace in Trace Event Format (one duration event per task
    per resource lane, plus memory-channel lanes), loadable in standard
    trace viewers."""
    clock = trace.meta.get("clock_hz", 800e6)
    to_us = 1e6 / clock
    events = []
    for e in trace.executions:
        events.append({
            "name": f"{e.task_id} {e.op}",
            "cat": e.op,
            "ph": "X",
            "ts": e.t_start * to_us,
            "dur": (e.t_end - e.t_start) * to_us,
            "pid": e.cluster,
            "tid": f"{e.resource}",
            "args": {"request": e.request_id, "layer": e.layer_id,
                     "macs": e.macs, "cycles": e.t_end - e.t_start},
        })
    for t in trace.transfers:
        events.append({
            "name": f"{t.kind} {t.bytes}B",
            "cat": "memory",
            "ph": "X",
            "ts": t.t_start * to_us,
            "dur": (t.t_end - t.t_start) * to_us,
            "pid": t.cluster,
            "tid": "hbm",
            "args": {"bytes": t.bytes, "key": t.key},
        })
    events.sort(key=lambda ev: (ev["ts"], str(ev["pid"]), str(ev["tid"]), ev["name"]))
    doc = {"traceEvents": events, "displayTimeUnit": "ms",
           "otherData": {k: str(v) for k, v in sorted(trace.meta.items())}}
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=None, separators=(",", ":"))


def verify_trace(trace: TraceLog, hw: HardwareConfig) -> list[str]:
    """Replay checker: processor exclusivity, dependency ordering, and
    shared-memory capacity.  Returns a list of violations (empty = clean)."""
    problems: list[str] = []

    by_resource: dict[tuple[int, str], list[ExecRecord]] = {}
    for e in trace.executions:
        by_resource.setdefault((e.cluster, e.resource), []).append(e)
    for (ci, res), execs in sorted(by_resource.items()):
        execs = sorted(execs, key=lambda e: (e.t_start, e.t_end))
        for a, b in zip(execs, execs[1:]):
            if b.t_start < a.t_end:
                problems.append(
                    f"cluster{ci}/{res}: {b.task_id} starts at {b.t_start} "
                    f"before {a.task_id} ends at {a.t_end}")

    end_by_task = {e.task_id: e.t_end for e in trace.executions}
    for e in trace.executions:
        for dep in e.deps:
            dep_end = end_by_task.get(dep)
            if dep_end is None:
                problems.append(f"{e.task_id}: dependency {dep} never executed")
            elif e.t_start < dep_end:
                problems.append(
                    f"{e.task_id} starts at {e.t_start} before dependency "
                    f"{dep} ends at {dep_end}")

    per_cluster: dict[int, list[ResidencyEvent]] = {}
    for r in trace.residency:
        per_cluster.setdefault(r.cluster, []).append(r)
    for ci, events in sorted(per_cluster.items()):
        cap = hw.clusters[ci].shared_mem_bytes
        level = 0
        # at equal timestamps releases apply before allocations
        for ev in sorted(events, key=lambda r: (r.time, r.delta)):
            level += ev.delta
            if level > cap:
                problems.append(
                    f"cluster{ci}: shared memory at {level} B > {cap} B "
                    f"at cycle {ev.time} ({ev.key})")
        if level < 0:
            problems.append(f"cluster{ci}: negative residency at end ({level})")

    return problems
