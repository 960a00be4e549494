"""Analytical time and work estimators for layers and sub-layer tasks.

Systolic timing models a weight-stationary array with double-buffered
weights: a d x d array computes an M x K . K x N product in

    ceil(N/d) * ceil(K/d) * (M + 2d)   cycles

where each tile pass streams M skewed input rows and drains through d rows
of accumulation plus d columns of output skew (the 2d term).  Weight loads
for later tiles are hidden behind the running pass; partial sums across K
tiles stay in the accumulation units.  Convolution lowers to the im2col
product M = output positions, K = flattened kernel volume, N = output
channels (per group).

Vector processors run one MAC per lane per cycle for matrix work, process
element-wise kinds at a per-element cycle cost, and run softmax rows through
multi-cycle exponent / accumulate / divide stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .hardware import (CycleConstants, HardwareConfig, SystolicArraySpec,
                       VectorProcessorSpec)
from .models import (DATA_OPS, MATRIX_OPS, LayerNode, OpType, layer_macs,
                     matrix_dims)


class UnsupportedOp(Exception):
    pass


@dataclass(frozen=True)
class TimeEstimate:
    """The start-time components and resulting window of one placement."""

    t_mem: int
    t_task: int
    t_proc: int
    t_comp: int

    @property
    def t_start(self) -> int:
        return max(self.t_mem, self.t_task, self.t_proc)

    @property
    def t_end(self) -> int:
        return self.t_start + self.t_comp


@dataclass(frozen=True)
class TaskCost:
    """Work and footprint of a layer or sub-layer slice."""

    op: OpType
    macs: int = 0
    matrix: tuple[int, int, int, int] | None = None  # (M, K, N, groups)
    vector_counts: dict = field(default_factory=dict)  # op-kind -> element ops
    softmax_rows: int = 0
    softmax_width: int = 0
    param_bytes: int = 0
    act_in_bytes: int = 0
    act_out_bytes: int = 0

    @property
    def total_ops(self) -> int:
        """Operation count as throughput accounting sees it (2 ops/MAC)."""
        return 2 * self.macs + sum(self.vector_counts.values())


_VECTOR_KIND_FOR_OP = {
    OpType.POOL: "pool",
    OpType.ACTIVATION: "activation",
    OpType.SOFTMAX: "softmax",
    OpType.LAYERNORM: "layernorm",
    OpType.ELEMENTWISE_ADD: "add",
}


def layer_cost(layer: LayerNode) -> TaskCost:
    """Full-layer cost; sub-layer slices are derived by the partitioner."""
    param = sum(t.byte_size for t in layer.weight_inputs)
    act_in = sum(t.byte_size for t in layer.activation_inputs)
    act_out = sum(t.byte_size for t in layer.outputs)
    if layer.op in MATRIX_OPS:
        dims = matrix_dims(layer)
        return TaskCost(layer.op, macs=layer_macs(layer), matrix=dims,
                        param_bytes=param, act_in_bytes=act_in,
                        act_out_bytes=act_out)
    if layer.op in DATA_OPS:
        return TaskCost(layer.op, param_bytes=param, act_in_bytes=act_in,
                        act_out_bytes=act_out)
    out = layer.outputs[0]
    if layer.op == OpType.POOL:
        # the window reduction streams kernel^2 operands per output element
        counts = {"pool": out.elements * layer.attrs["kernel"] ** 2}
    elif layer.op == OpType.SOFTMAX:
        rows = math.prod(out.shape[:-1])
        return TaskCost(layer.op, vector_counts={"softmax": out.elements},
                        softmax_rows=rows, softmax_width=out.shape[-1],
                        param_bytes=param, act_in_bytes=act_in,
                        act_out_bytes=act_out)
    else:
        counts = {_VECTOR_KIND_FOR_OP[layer.op]: out.elements}
    return TaskCost(layer.op, vector_counts=counts, param_bytes=param,
                    act_in_bytes=act_in, act_out_bytes=act_out)


def systolic_cycles(cost: TaskCost, spec: SystolicArraySpec) -> int:
    """Cycles for a matrix task on a weight-stationary d x d array."""
    if cost.matrix is None:
        raise UnsupportedOp(f"{cost.op.name} cannot run on a systolic array")
    m, k, n, groups = cost.matrix
    d = spec.dim
    passes = math.ceil(n / d) * math.ceil(k / d)
    return groups * passes * (m + 2 * d)


def vector_cycles(cost: TaskCost, spec: VectorProcessorSpec,
                  cc: CycleConstants = CycleConstants()) -> int:
    """Cycles for any task on a SIMD vector processor."""
    lanes = spec.lanes
    if cost.op in MATRIX_OPS:
        return math.ceil(cost.macs / lanes)
    if cost.op in DATA_OPS:
        return 0  # data movement only; transfer time is accounted separately
    if cost.op == OpType.SOFTMAX:
        per_element = cc.softmax_exp + cc.softmax_acc + cc.softmax_div
        return cost.softmax_rows * math.ceil(cost.softmax_width / lanes) * per_element
    cpe = {"pool": cc.pooling, "activation": cc.activation,
           "add": cc.add, "layernorm": cc.layernorm}
    return sum(math.ceil(n / lanes) * cpe[kind]
               for kind, n in cost.vector_counts.items())


def task_cycles(cost: TaskCost, spec, cc: CycleConstants = CycleConstants()) -> int:
    if isinstance(spec, SystolicArraySpec):
        return systolic_cycles(cost, spec)
    return vector_cycles(cost, spec, cc)


def mem_transfer_cycles(num_bytes: int, hw: HardwareConfig) -> int:
    """External-memory transfer latency in cycles; one channel serializes."""
    if num_bytes < 0:
        raise ValueError("transfer size must be non-negative")
    return hw.hbm_latency_cycles + math.ceil(
        num_bytes * hw.clock_hz / hw.hbm_bandwidth_bytes_per_s)


def transfer_payload_cycles(num_bytes: int, hw: HardwareConfig) -> int:
    """Bandwidth term only, used when several transfers share one latency."""
    if num_bytes <= 0:
        return 0
    return math.ceil(num_bytes * hw.clock_hz / hw.hbm_bandwidth_bytes_per_s)
