"""Task queues, sub-layer partitioning, and the cluster schedulers.

A cluster owns a scheduling table: per-processor reservations, per-queue
task lists (one queue per in-flight request), a shared-memory residency map,
and the external-memory channel horizon.  Two policies operate on it:

* round-robin: circular scan over the queues; a head task is bound to an
  idle processor of its dedicated class without consulting any task
  characteristics, so array work never runs on vector processors and the
  bound processor waits in place for operands.
* heterogeneity-aware: for every ready queue head, estimate memory-ready
  time, dependency time and processor availability, nominate the processor
  class with the earliest finish (vector processors may take matrix work
  while spare), and place the candidate whose nominated processor would
  idle least.  Ties fall back to round-robin order.

External memory accesses are planned against the residency map: parameters
already resident are reused (keyed by model, so requests sharing a DNN share
weights), otherwise the plan fetches into free space, waiting on and
flushing entries whose users have finished, spilling unconsumed activations
back to external memory when space is still short.  All transfers serialize
on the cluster's channel.
"""

from __future__ import annotations

import bisect
import math
from collections import deque
from dataclasses import dataclass, field

from .costs import TaskCost, layer_cost, mem_transfer_cycles, task_cycles
from .hardware import ClusterConfig, HardwareConfig
from .models import (DATA_OPS, MATRIX_OPS, LayerNode, ModelGraph, OpType)


class SchedulingError(Exception):
    pass


class NoReadyTask(SchedulingError):
    pass


class UnpartitionableLayer(SchedulingError):
    pass


class CapacityDeadlock(SchedulingError):
    pass


# ---------------------------------------------------------------------------
# sub-layer tasks

@dataclass
class SubLayerTask:
    task_id: str
    request_id: int
    layer_id: int
    slice_index: int
    num_slices: int
    op: OpType
    cost: TaskCost
    deps: tuple[str, ...]
    model_key: str
    param_keys: tuple[tuple[tuple, int], ...]   # (residency key, bytes)
    act_in_keys: tuple[tuple[tuple, int], ...]
    act_out_key: tuple[tuple, int] | None
    queue: int = -1
    _cycles: dict = field(default_factory=dict, repr=False)

    def cycles_on(self, spec, cc) -> int:
        key = (type(spec).__name__, getattr(spec, "dim", 0), getattr(spec, "lanes", 0))
        if key not in self._cycles:
            self._cycles[key] = task_cycles(self.cost, spec, cc)
        return self._cycles[key]


def _split_units(total: int, n: int) -> list[int]:
    base, rem = divmod(total, n)
    return [base + (1 if i < rem else 0) for i in range(n)]


def _split_bytes(total: int, units: list[int]) -> list[int]:
    whole = sum(units)
    out = [total * u // whole for u in units]
    out[-1] += total - sum(out)
    return out


@dataclass(frozen=True)
class LayerSlice:
    cost: TaskCost
    weight_bytes: tuple[int, ...]  # per weight tensor of the parent layer


def _slice_layer(layer: LayerNode, cost: TaskCost, n: int) -> list[LayerSlice]:
    """Split a layer into n slices; MACs, element counts and bytes are conserved."""
    if n == 1:
        return [LayerSlice(cost, tuple(t.byte_size for t in layer.weight_inputs))]
    if cost.matrix is not None:
        m, k, nn, groups = cost.matrix
        axis_total = groups if groups > 1 else nn
        units = _split_units(axis_total, n)
        w_shares = [_split_bytes(t.byte_size, units) for t in layer.weight_inputs]
        outs = _split_bytes(cost.act_out_bytes, units)
        # grouped convolutions also split their input channels per slice
        ins = (_split_bytes(cost.act_in_bytes, units) if groups > 1
               else [cost.act_in_bytes] * n)
        slices = []
        for i, u in enumerate(units):
            dims = (m, k, u, 1) if groups == 1 else (m, k, nn, u)
            params = sum(w[i] for w in w_shares)
            slices.append(LayerSlice(
                TaskCost(cost.op, macs=m * k * dims[2] * dims[3], matrix=dims,
                         param_bytes=params, act_in_bytes=ins[i],
                         act_out_bytes=outs[i]),
                tuple(w[i] for w in w_shares)))
        return slices
    total_units = max(cost.softmax_rows, sum(cost.vector_counts.values()),
                      cost.act_out_bytes, 1)
    units = _split_units(total_units, n)
    ins = _split_bytes(cost.act_in_bytes, units)
    outs = _split_bytes(cost.act_out_bytes, units)
    count_shares = {kind: _split_bytes(total, units)
                    for kind, total in cost.vector_counts.items()}
    rows = _split_units(cost.softmax_rows, n) if cost.softmax_rows else [0] * n
    w_bytes = tuple(t.byte_size for t in layer.weight_inputs)
    slices = []
    for i in range(n):
        # small per-channel parameters are shared by every slice
        slices.append(LayerSlice(
            TaskCost(cost.op,
                     vector_counts={k: s[i] for k, s in count_shares.items()},
                     softmax_rows=rows[i], softmax_width=cost.softmax_width,
                     param_bytes=cost.param_bytes, act_in_bytes=ins[i],
                     act_out_bytes=outs[i]),
            w_bytes))
    return slices


def partition_layer(layer: LayerNode, cluster: ClusterConfig, *,
                    alpha: float = 0.5) -> list[TaskCost]:
    """Split a layer until every slice's working set fits alpha * SM_SIZE.

    Matrix layers slice along output columns/channels (weights split, input
    shared) so each slice keeps its weights resident for its whole run;
    grouped convolutions slice along groups; vector and data layers slice
    along their elements.
    """
    return [s.cost for s in _partition(layer, cluster, alpha)]


def _partition(layer: LayerNode, cluster: ClusterConfig,
               alpha: float) -> list[LayerSlice]:
    cost = layer_cost(layer)
    cap = int(alpha * cluster.shared_mem_bytes)
    ws = cost.param_bytes + cost.act_in_bytes + cost.act_out_bytes
    if ws <= cap:
        return _slice_layer(layer, cost, 1)

    if cost.matrix is not None and cost.matrix[3] == 1:
        shared = cost.act_in_bytes
        split = cost.param_bytes + cost.act_out_bytes
        if cap <= shared:
            raise UnpartitionableLayer(
                f"layer {layer.name}: shared input of {shared} B exceeds "
                f"the {cap} B working-set budget")
        n_min = math.ceil(split / (cap - shared))
        axis_limit = cost.matrix[2]
    elif cost.matrix is not None:
        n_min = math.ceil(ws / cap)
        axis_limit = cost.matrix[3]
    else:
        if cap <= cost.param_bytes:
            raise UnpartitionableLayer(
                f"layer {layer.name}: parameters alone exceed the budget")
        n_min = math.ceil((cost.act_in_bytes + cost.act_out_bytes)
                          / (cap - cost.param_bytes))
        axis_limit = max(cost.act_out_bytes, 1)

    n = min(max(n_min, 2), axis_limit)
    while True:
        slices = _slice_layer(layer, cost, n)
        if all(s.cost.param_bytes + s.cost.act_in_bytes + s.cost.act_out_bytes <= cap
               for s in slices):
            return slices
        if n >= axis_limit:
            raise UnpartitionableLayer(
                f"layer {layer.name}: a minimal slice still exceeds "
                f"{cap} B of shared memory")
        n = min(n * 2, axis_limit)


def build_request_tasks(graph: ModelGraph, request_id: int,
                        cluster: ClusterConfig, *, alpha: float = 0.5,
                        model_key: str | None = None) -> list[SubLayerTask]:
    """Partition every layer of a request into dependency-wired tasks.

    Parameter residency keys are a pure function of (model, tensor, slice),
    so repeated requests of the same model hit the same shared-memory
    entries; activations are keyed per request.
    """
    model_key = model_key or graph.name
    rtag = f"r{request_id}"
    ext_ids = {t.tensor_id: i for i, t in enumerate(graph.inputs)}
    tasks: list[SubLayerTask] = []
    layer_task_ids: dict[int, list[str]] = {}
    layer_act_keys: dict[int, list[tuple[tuple, int]]] = {}

    for layer in graph.layers:
        slices = _partition(layer, cluster, alpha)
        n = len(slices)
        dep_ids: list[str] = []
        in_keys: list[tuple[tuple, int]] = []
        for p in layer.predecessors:
            dep_ids.extend(layer_task_ids[p])
            in_keys.extend(layer_act_keys[p])
        for t in layer.activation_inputs:
            if t.tensor_id in ext_ids:
                in_keys.append((("a", rtag, -1, ext_ids[t.tensor_id]), t.byte_size))
        weight_ids = [t.tensor_id for t in layer.weight_inputs]
        out_keys: list[tuple[tuple, int]] = []
        ids: list[str] = []
        for i, sl in enumerate(slices):
            task_id = f"{rtag}/L{layer.layer_id}/s{i}"
            pk = tuple((("w", model_key, tid, i if n > 1 else 0), b)
                       for tid, b in zip(weight_ids, sl.weight_bytes) if b)
            out_key = None
            if sl.cost.act_out_bytes:
                out_key = (("a", rtag, layer.layer_id, i), sl.cost.act_out_bytes)
                out_keys.append(out_key)
            task = SubLayerTask(task_id, request_id, layer.layer_id, i, n,
                                layer.op, sl.cost, tuple(dep_ids), model_key,
                                pk, tuple(in_keys), out_key)
            tasks.append(task)
            ids.append(task_id)
        layer_task_ids[layer.layer_id] = ids
        layer_act_keys[layer.layer_id] = out_keys
    return tasks


# ---------------------------------------------------------------------------
# scheduling table

@dataclass
class Processor:
    name: str
    kind: str  # "array" | "vector"
    spec: object
    index: int
    busy_until: int = 0
    timeline: list = field(default_factory=list)


@dataclass
class ResidencyEntry:
    key: tuple
    bytes: int
    kind: str  # "param" | "act"
    ready: int
    avail: int  # latest end among scheduled users


@dataclass(frozen=True)
class MemAction:
    kind: str  # fetch_param | read_act | write_act | flush
    start: int
    end: int
    bytes: int
    key: tuple


@dataclass
class MemFetchPlan:
    ready: int
    actions: tuple[MemAction, ...]
    channel_end: int
    fetch_bytes: int
    act_read_bytes: int
    remaining: int = 0  # unfetched parameter bytes; 0 on a feasible plan
    free_after: int = 0


@dataclass
class Placement:
    task: SubLayerTask
    processor: str
    proc_index: int
    kind: str
    queue: int
    t_mem: int
    t_task: int
    t_proc: int
    t_start: int
    t_comp: int
    t_end: int
    t_idle: int
    plan: MemFetchPlan


class ClusterTable:
    """Scheduling table of one cluster: reservations, queues, residency."""

    def __init__(self, cluster: ClusterConfig, hw: HardwareConfig,
                 cluster_index: int = 0):
        self.cluster = cluster
        self.hw = hw
        self.cc = hw.cycle_constants
        self.index = cluster_index
        self.processors: list[Processor] = []
        for i, spec in enumerate(cluster.arrays):
            self.processors.append(Processor(f"array{i}", "array", spec, len(self.processors)))
        for i, spec in enumerate(cluster.vectors):
            self.processors.append(Processor(f"vector{i}", "vector", spec, len(self.processors)))
        self.queues: list[deque[SubLayerTask]] = [deque() for _ in range(cluster.num_task_queues)]
        self.queue_request: list[int | None] = [None] * cluster.num_task_queues
        self.rr_ptr = 0
        self.residency: dict[tuple, ResidencyEntry] = {}
        self.used_bytes = 0
        # committed releases whose bytes stay physically occupied until a
        # future timestamp; planning must not hand them out early
        self.pending_releases: list[tuple[int, int]] = []
        self.channel_free = 0
        self.pending_uses: dict[tuple, int] = {}
        self.scheduled_start: dict[str, int] = {}
        self.scheduled_end: dict[str, int] = {}
        self.decision_log: list[dict] = []

    # -- request admission ---------------------------------------------------

    def free_queue_slots(self) -> int:
        return sum(1 for r in self.queue_request if r is None)

    def enqueue_request(self, request_id: int, tasks: list[SubLayerTask]) -> int:
        q = self.queue_request.index(None)
        self.queue_request[q] = request_id
        for t in tasks:
            t.queue = q
            self.queues[q].append(t)
            for key, _ in t.param_keys + t.act_in_keys:
                self.pending_uses[key] = self.pending_uses.get(key, 0) + 1
        return q

    def release_request(self, request_id: int) -> None:
        q = self.queue_request.index(request_id)
        self.queue_request[q] = None

    # -- table lookups ---------------------------------------------------------

    def earliest_free(self, kind: str) -> Processor:
        return min((p for p in self.processors if p.kind == kind),
                   key=lambda p: (p.busy_until, p.index))

    def t_task(self, task: SubLayerTask) -> int:
        return max((self.scheduled_end[d] for d in task.deps), default=0)

    def heads(self) -> list[tuple[int, SubLayerTask]]:
        return [(q, queue[0]) for q, queue in enumerate(self.queues) if queue]

    # -- external memory access scheduling ------------------------------------

    def plan_memory(self, task: SubLayerTask, now: int) -> MemFetchPlan:
        """Ready time for a task's parameters and activations.

        Follows the residency-first rule: parameters already in shared
        memory are reused; otherwise fetch into free capacity, then walk the
        scheduled users in end-time order, flushing dead entries and
        spilling unconsumed activations until the remaining bytes fit.
        """
        res = self.residency
        protected = {k for k, _ in task.param_keys} | {k for k, _ in task.act_in_keys}
        missing_params = [(k, b) for k, b in task.param_keys if k not in res]
        param_ready = max((res[k].ready for k, _ in task.param_keys if k in res),
                          default=0)
        missing_acts = [(k, b) for k, b in task.act_in_keys if k not in res]
        fetch_total = sum(b for _, b in missing_params)
        a_size = sum(b for _, b in missing_acts)
        out_bytes = task.act_out_key[1] if task.act_out_key else 0

        while self.pending_releases and self.pending_releases[0][0] <= now:
            self.pending_releases.pop(0)
        free = self.cluster.shared_mem_bytes - self.used_bytes
        need = fetch_total + a_size + out_bytes
        actions: list[MemAction] = []

        if fetch_total == 0 and a_size == 0:
            # no transfers: only the output needs space, which may have to
            # wait for already-committed releases to take effect
            still_held = sum(b for _, b in self.pending_releases)
            if need <= free - still_held:
                return MemFetchPlan(param_ready, tuple(actions), self.channel_free,
                                    0, 0, 0, free - need)
            ready = param_ready
            for t_rel, b in self.pending_releases:
                still_held -= b
                ready = max(ready, t_rel)
                if need <= free - still_held:
                    return MemFetchPlan(ready, tuple(actions), self.channel_free,
                                        0, 0, 0, free - need)
            # falls through: eviction is required to place the output

        # transfers start no earlier than the decision that requests them
        t = max(self.channel_free, now)
        remaining = fetch_total
        goal_extra = a_size + out_bytes

        def fetch(upto_t: int, free_now: int) -> tuple[int, int]:
            nonlocal remaining
            amt = min(free_now, remaining)
            if amt <= 0:
                return upto_t, free_now
            dt = mem_transfer_cycles(amt, self.hw)
            for k, b in _consume(missing_params, amt):
                actions.append(MemAction("fetch_param", upto_t, upto_t + dt, b, k))
            remaining -= amt
            return upto_t + dt, free_now - amt

        t, free = fetch(t, free)
        if remaining > 0 or free < goal_extra:
            order = sorted((e for e in res.values() if e.key not in protected),
                           key=lambda e: (e.avail, e.key))
            released: set[tuple] = set()
            for forced in (False, True):
                for e in order:
                    if e.key in released:
                        continue
                    pend = self.pending_uses.get(e.key, 0)
                    if pend > 0 and e.kind == "param" and not forced:
                        continue  # still wanted by queued tasks; keep resident
                    t = max(t, e.avail)
                    if e.kind == "act" and pend > 0:
                        dt = mem_transfer_cycles(e.bytes, self.hw)
                        actions.append(MemAction("write_act", t, t + dt, e.bytes, e.key))
                        t += dt
                    else:
                        actions.append(MemAction("flush", t, t, e.bytes, e.key))
                    released.add(e.key)
                    free += e.bytes
                    if remaining:
                        t, free = fetch(t, free)
                    if remaining == 0 and free >= goal_extra:
                        break
                if remaining == 0 and free >= goal_extra:
                    break
            if remaining > 0 or free < goal_extra:
                raise CapacityDeadlock(
                    f"task {task.task_id}: cannot free {need} B of shared "
                    f"memory (short {remaining + max(goal_extra - free, 0)} B)")
        if a_size:
            dt = mem_transfer_cycles(a_size, self.hw)
            for k, b in missing_acts:
                actions.append(MemAction("read_act", t, t + dt, b, k))
            t += dt
        ready = max(t, param_ready)
        channel_end = max([self.channel_free] + [a.end for a in actions])
        return MemFetchPlan(ready, tuple(actions), channel_end,
                            fetch_total, a_size, 0, free - goal_extra)

    def commit(self, placement: Placement) -> None:
        task = placement.task
        plan = placement.plan
        for a in plan.actions:
            if a.kind in ("flush", "write_act"):
                e = self.residency.pop(a.key)
                self.used_bytes -= e.bytes
                t_rel = a.start if a.kind == "flush" else a.end
                bisect.insort(self.pending_releases, (t_rel, e.bytes))
            elif a.kind in ("fetch_param", "read_act"):
                kind = "param" if a.kind == "fetch_param" else "act"
                e = self.residency.get(a.key)
                if e is None:
                    self.residency[a.key] = ResidencyEntry(
                        a.key, a.bytes, kind, a.end, placement.t_end)
                else:  # a split fetch of one tensor accumulates
                    e.bytes += a.bytes
                    e.ready = max(e.ready, a.end)
                self.used_bytes += a.bytes
        if task.act_out_key:
            key, b = task.act_out_key
            self.residency[key] = ResidencyEntry(key, b, "act",
                                                 placement.t_end, placement.t_end)
            self.used_bytes += b
        for key, _ in task.param_keys + task.act_in_keys:
            self.pending_uses[key] = self.pending_uses.get(key, 1) - 1
            if self.pending_uses[key] <= 0:
                self.pending_uses.pop(key, None)
            e = self.residency.get(key)
            if e is not None:
                e.avail = max(e.avail, placement.t_end)
        self.channel_free = max(self.channel_free, plan.channel_end)

        proc = self.processors[placement.proc_index]
        proc.timeline.append((task.task_id, placement.t_start, placement.t_end))
        proc.busy_until = placement.t_end
        self.scheduled_start[task.task_id] = placement.t_start
        self.scheduled_end[task.task_id] = placement.t_end
        self.queues[placement.queue].popleft()
        self.rr_ptr = (placement.queue + 1) % len(self.queues)
        self.decision_log.append({
            "time": placement.t_start, "queue": placement.queue,
            "task": task.task_id, "processor": placement.processor,
            "t_mem": placement.t_mem, "t_task": placement.t_task,
            "t_proc": placement.t_proc, "t_start": placement.t_start,
            "t_comp": placement.t_comp, "t_end": placement.t_end,
            "t_idle": placement.t_idle,
        })


def _consume(pairs: list[tuple[tuple, int]], amount: int):
    """Attribute ``amount`` fetched bytes to keys, mutating the backlog."""
    taken = []
    while amount > 0 and pairs:
        k, b = pairs[0]
        if b <= amount:
            taken.append((k, b))
            amount -= b
            pairs.pop(0)
        else:
            taken.append((k, amount))
            pairs[0] = (k, b - amount)
            amount = 0
    return taken


# ---------------------------------------------------------------------------
# policies

def _eligible_kinds(task: SubLayerTask, vector_slack: bool = True) -> tuple[str, ...]:
    # vector processors can emulate matrix work; arrays run only matrix work
    if task.op in MATRIX_OPS:
        return ("vector", "array") if vector_slack else ("array",)
    return ("vector",)


def _dedicated_kind(task: SubLayerTask) -> str:
    return "array" if task.op in MATRIX_OPS else "vector"


def has_schedule(table: ClusterTable, now: int = 0) -> Placement:
    """One heterogeneity-aware decision: estimate, nominate, pick min idle.

    A head joins the candidate group once every dependency has started, so
    a successor can be bound (and its parameters prefetched) while its
    producer still runs, but the scheduler never reserves processors more
    than one dependency hop ahead of execution.

    Matrix work is offered to the vector class only while the candidate
    group's native vector demand leaves vector processors to spare;
    otherwise pending vector operations keep their dedicated processors and
    matrix work stays on the arrays.
    """
    heads = [(q, t) for q, t in table.heads()
             if all(table.scheduled_start[d] <= now for d in t.deps)]
    if not heads:
        raise NoReadyTask("no candidate tasks")
    nq = len(table.queues)
    vector_only = sum(1 for _, t in heads
                      if t.op not in MATRIX_OPS and t.op not in DATA_OPS)
    vector_slack = vector_only < sum(1 for p in table.processors
                                     if p.kind == "vector")
    best = None
    best_rank = None
    for q, task in heads:
        plan = table.plan_memory(task, now)
        t_task = table.t_task(task)
        nominated = None
        for kind in _eligible_kinds(task, vector_slack):
            proc = table.earliest_free(kind)
            t_proc = proc.busy_until
            t_start = max(plan.ready, t_task, t_proc, now)
            t_comp = task.cycles_on(proc.spec, table.cc)
            t_end = t_start + t_comp
            # the dedicated class wins end-time ties
            if nominated is None or t_end <= nominated[0]:
                nominated = (t_end, kind, proc, t_start, t_comp, t_proc)
        t_end, kind, proc, t_start, t_comp, t_proc = nominated
        t_idle = t_start - proc.busy_until
        rank = (t_idle, (q - table.rr_ptr) % nq)
        if best_rank is None or rank < best_rank:
            best_rank = rank
            best = Placement(task, proc.name, proc.index, kind, q, plan.ready,
                             t_task, t_proc, t_start, t_comp, t_end, t_idle, plan)
    table.commit(best)
    return best


def rr_schedule(table: ClusterTable, now: int = 0) -> Placement:
    """One round-robin decision at ``now``.

    Scans queues circularly and binds the first head whose dedicated
    processor class has an idle instance; task characteristics are never
    consulted, so the bound processor simply waits in place for operands
    that are still being fetched or produced.
    """
    nq = len(table.queues)
    for i in range(nq):
        q = (table.rr_ptr + i) % nq
        if not table.queues[q]:
            continue
        task = table.queues[q][0]
        t_task = table.t_task(task)
        proc = table.earliest_free(_dedicated_kind(task))
        if proc.busy_until > now:
            continue
        plan = table.plan_memory(task, now)
        t_start = max(now, plan.ready, t_task)
        t_comp = task.cycles_on(proc.spec, table.cc)
        placement = Placement(task, proc.name, proc.index, proc.kind, q,
                              plan.ready, t_task, proc.busy_until, t_start,
                              t_comp, t_start + t_comp,
                              t_start - proc.busy_until, plan)
        table.commit(placement)
        return placement
    raise NoReadyTask("all queue heads blocked")


SCHEDULERS = {"rr": rr_schedule, "has": has_schedule}


def load_balance(in_flight: list[int], capacity: int | None = None) -> int | None:
    """FIFO dispatch target: the cluster with the fewest in-flight requests.

    Returns None when every cluster is at capacity (the request waits).
    """
    order = sorted(range(len(in_flight)), key=lambda i: (in_flight[i], i))
    best = order[0]
    if capacity is not None and in_flight[best] >= capacity:
        return None
    return best
