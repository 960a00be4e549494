"""Shared helpers for scheduler tests: synthetic task instances, a bare
cluster-table driver, and the exhaustive-search makespan oracle."""

from __future__ import annotations

import copy
import dataclasses
import random

from svsim.costs import TaskCost, task_cycles
from svsim.hardware import CycleConstants, make_cluster, make_hw
from svsim.scheduling import (ClusterTable, NoReadyTask, SCHEDULERS,
                              SubLayerTask)
from svsim.umf import OpType

CC = CycleConstants()


def make_task(tid, queue, cost, deps=(), param_keys=(), act_in_keys=(),
              act_out=None, model_key="m"):
    return SubLayerTask(tid, queue, 0, 0, 1, cost.op, cost, tuple(deps),
                        model_key, tuple(param_keys), tuple(act_in_keys),
                        act_out)


def gemm_cost(m, k, n, param_bytes=0, act_in=0, act_out=0):
    return TaskCost(OpType.GEMM, macs=m * k * n, matrix=(m, k, n, 1),
                    param_bytes=param_bytes, act_in_bytes=act_in,
                    act_out_bytes=act_out)


def vector_cost(kind, n, op=None):
    op = op or {"activation": OpType.ACTIVATION, "softmax": OpType.SOFTMAX,
                "layernorm": OpType.LAYERNORM, "pool": OpType.POOL,
                "add": OpType.ELEMENTWISE_ADD}[kind]
    if kind == "softmax":
        return TaskCost(op, vector_counts={kind: n}, softmax_rows=max(1, n // 128),
                        softmax_width=min(n, 128))
    return TaskCost(op, vector_counts={kind: n})


def fresh_table(hw, queues_by_request):
    """Cluster table with one queue per entry of ``queues_by_request``."""
    cl = dataclasses.replace(hw.clusters[0],
                             num_task_queues=max(len(queues_by_request), 1))
    table = ClusterTable(cl, hw)
    for rid, tasks in enumerate(queues_by_request):
        ts = [copy.copy(t) for t in tasks]
        for t in ts:
            t._cycles = {}
        table.enqueue_request(rid, ts)
    return table


def run_policy(hw, queues_by_request, name):
    """Drive a policy over a bare table to completion; returns (makespan, table)."""
    table = fresh_table(hw, queues_by_request)
    policy = SCHEDULERS[name]
    now = 0
    guard = 0
    while any(table.queues):
        try:
            while True:
                policy(table, now)
        except NoReadyTask:
            pass
        pending = [t for t in list(table.scheduled_end.values())
                   + list(table.scheduled_start.values()) if t > now]
        if not pending:
            if any(table.queues):
                raise RuntimeError("driver stalled with tasks still queued")
            break
        now = min(pending)
        guard += 1
        if guard > 100000:
            raise RuntimeError("driver did not converge")
    return max(table.scheduled_end.values(), default=0), table


def synth_chain_instance(rng: random.Random, max_tasks=8, nq_range=(2, 3)):
    """Random per-request chains shaped like real layer streams.

    Chains alternate matrix layers with the vector layers that follow them
    (activation, normalization, softmax), with vector work a realistic
    fraction of the neighbouring matrix work.
    """
    nq = rng.randint(*nq_range)
    total = rng.randint(max(4, nq), max_tasks)
    queues = [[] for _ in range(nq)]
    for i in range(total):
        q = i if i < nq else rng.randrange(nq)
        chain = queues[q]
        prev_matrix = chain and chain[-1].cost.matrix is not None
        if not prev_matrix or rng.random() < 0.25:
            m = rng.choice([1, 1, 4, 16, 64, 128])
            k = rng.choice([64, 256, 1024, 4096])
            n = rng.choice([64, 256, 1024])
            cost = gemm_cost(m, k, n)
        else:
            kind = rng.choice(["activation", "softmax", "layernorm", "pool"])
            cost = vector_cost(kind, rng.choice([4096, 16384, 65536]))
        deps = (chain[-1].task_id,) if chain else ()
        chain.append(make_task(f"q{q}t{len(chain)}", q, cost, deps))
    return queues


def exhaustive_min_makespan(hw, queues_by_request):
    """Minimal makespan over every queue interleaving and every legal
    processor-class assignment, with list placement (memory-free)."""
    aspec = hw.clusters[0].arrays[0]
    vspec = hw.clusters[0].vectors[0]
    n_arrays = len(hw.clusters[0].arrays)
    n_vectors = len(hw.clusters[0].vectors)
    per_q = [list(q) for q in queues_by_request]
    counts = [len(q) for q in per_q]

    def interleavings(remaining):
        if not any(remaining):
            yield []
            return
        for q in range(len(remaining)):
            if remaining[q]:
                r2 = list(remaining)
                r2[q] -= 1
                for rest in interleavings(r2):
                    yield [q] + rest

    best = None
    for order in interleavings(counts):
        ptr = [0] * len(per_q)
        seq = []
        for q in order:
            seq.append(per_q[q][ptr[q]])
            ptr[q] += 1
        n_matrix = sum(1 for t in seq if t.cost.matrix is not None)
        for bits in range(1 << n_matrix):
            free = {"array": [0] * n_arrays, "vector": [0] * n_vectors}
            ends = {}
            mi = 0
            for t in seq:
                if t.cost.matrix is not None:
                    kind = "array" if (bits >> mi) & 1 else "vector"
                    mi += 1
                else:
                    kind = "vector"
                spec = aspec if kind == "array" else vspec
                c = task_cycles(t.cost, spec, CC)
                dep_end = max((ends[d] for d in t.deps), default=0)
                slot = min(range(len(free[kind])), key=lambda i: free[kind][i])
                s = max(free[kind][slot], dep_end)
                ends[t.task_id] = s + c
                free[kind][slot] = s + c
            mk = max(ends.values())
            if best is None or mk < best:
                best = mk
    return best


SMALL_HW = make_hw(1, make_cluster(1, 16, 1, 64, 1 << 40))
