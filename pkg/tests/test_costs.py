import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svsim.costs import (TaskCost, TimeEstimate, UnsupportedOp, layer_cost,
                         mem_transfer_cycles, systolic_cycles, task_cycles,
                         vector_cycles)
from svsim.hardware import (CycleConstants, SystolicArraySpec,
                            VectorProcessorSpec, make_cluster, make_hw)
from svsim.models import builtin_model
from svsim.umf import OpType

from systolic_reference import reference_gemm

CC = CycleConstants()


def matrix_cost(m, k, n, groups=1):
    return TaskCost(OpType.GEMM, macs=m * k * n * groups, matrix=(m, k, n, groups))


# --- systolic timing ---------------------------------------------------------

def test_single_tile_16():
    assert systolic_cycles(matrix_cost(16, 16, 16), SystolicArraySpec(16)) == 48


def test_tall_skinny_amortizes_fill_drain():
    cycles = systolic_cycles(matrix_cost(4096, 16, 16), SystolicArraySpec(16))
    assert cycles == 4128
    # effective rate within 1% of peak MAC rate
    assert 4096 * 16 * 16 / (cycles * 256) > 0.99


def test_tiling_counts():
    for m in (1, 7, 100):
        assert systolic_cycles(matrix_cost(m, 64, 64), SystolicArraySpec(16)) \
            == 16 * (m + 32)


def test_grouped_matrix_sums_group_passes():
    # depthwise-style: 8 groups of K=9, N=1
    c = matrix_cost(100, 9, 1, groups=8)
    assert systolic_cycles(c, SystolicArraySpec(16)) == 8 * (100 + 32)


@pytest.mark.parametrize("m,k,n,d", [
    (16, 16, 16, 16), (1, 64, 64, 16), (100, 30, 70, 32),
    (33, 65, 129, 64), (5, 5, 5, 16),
])
def test_matches_pe_level_reference(m, k, n, d):
    cycles, _ = reference_gemm(m, k, n, d, seed=m + k + n)
    formula = systolic_cycles(matrix_cost(m, k, n), SystolicArraySpec(d))
    assert abs(formula - cycles) <= 0.01 * cycles


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 512), st.integers(1, 512), st.integers(1, 512),
       st.sampled_from([16, 32, 64]))
def test_systolic_cycles_monotone(m, k, n, d):
    spec = SystolicArraySpec(d)
    base = systolic_cycles(matrix_cost(m, k, n), spec)
    assert systolic_cycles(matrix_cost(m + 1, k, n), spec) >= base
    assert systolic_cycles(matrix_cost(m, k + 1, n), spec) >= base
    assert systolic_cycles(matrix_cost(m, k, n + 1), spec) >= base


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 512), st.integers(1, 512), st.integers(1, 512),
       st.sampled_from([16, 32, 64]))
def test_mac_rate_never_exceeds_array_capacity(m, k, n, d):
    cycles = systolic_cycles(matrix_cost(m, k, n), SystolicArraySpec(d))
    assert m * k * n / cycles <= d * d


def test_vector_only_op_unsupported_on_array():
    pool = TaskCost(OpType.POOL, vector_counts={"pool": 100})
    with pytest.raises(UnsupportedOp):
        systolic_cycles(pool, SystolicArraySpec(16))
    with pytest.raises(UnsupportedOp):
        task_cycles(pool, SystolicArraySpec(16), CC)


# --- vector timing -----------------------------------------------------------

def test_elementwise_cycles():
    relu = TaskCost(OpType.ACTIVATION, vector_counts={"activation": 4096})
    assert vector_cycles(relu, VectorProcessorSpec(16), CycleConstants(activation=1)) == 256


def test_vector_matrix_one_mac_per_lane():
    gemm = TaskCost(OpType.GEMM, macs=8192, matrix=(8, 32, 32, 1))
    assert vector_cycles(gemm, VectorProcessorSpec(16), CC) == 512


def test_softmax_stage_cycles():
    sm = TaskCost(OpType.SOFTMAX, vector_counts={"softmax": 1024},
                  softmax_rows=1, softmax_width=1024)
    cc = CycleConstants(softmax_exp=4, softmax_acc=1, softmax_div=8)
    assert vector_cycles(sm, VectorProcessorSpec(16), cc) == 832


def test_softmax_matches_unit_occupancy_reference():
    # scalar reference: walk each row in lane-wide chunks through the
    # exponent, accumulate, and divide units, counting occupied cycles
    def reference(rows, width, lanes, cc):
        total = 0
        for _ in range(rows):
            remaining = width
            while remaining > 0:
                remaining -= min(lanes, remaining)
                total += cc.softmax_exp + cc.softmax_acc + cc.softmax_div
        return total

    cc = CycleConstants()
    for rows, width, lanes in ((1, 1024, 16), (128, 128, 64), (7, 33, 32)):
        sm = TaskCost(OpType.SOFTMAX, vector_counts={"softmax": rows * width},
                      softmax_rows=rows, softmax_width=width)
        assert vector_cycles(sm, VectorProcessorSpec(lanes), cc) == \
            reference(rows, width, lanes, cc)


def test_data_ops_take_no_compute_cycles():
    c = TaskCost(OpType.RESHAPE, act_in_bytes=1024, act_out_bytes=1024)
    assert vector_cycles(c, VectorProcessorSpec(16), CC) == 0


def test_systolic_wins_at_scale_vector_owns_special_functions():
    big = matrix_cost(512, 512, 512)
    assert systolic_cycles(big, SystolicArraySpec(16)) < \
        vector_cycles(big, VectorProcessorSpec(64), CC)


# --- memory transfers ----------------------------------------------------------

HW = make_hw(1, make_cluster(1, 16, 1, 16, 45))  # 256 GB/s, 100 cycles, 800 MHz


def test_zero_bytes_is_latency_only():
    assert mem_transfer_cycles(0, HW) == 100


def test_256mb_transfer():
    assert mem_transfer_cycles(256 * 2**20, HW) == 100 + 838861


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**9))
def test_transfer_monotone_and_asymptotically_linear(nbytes):
    a = mem_transfer_cycles(nbytes, HW)
    b = mem_transfer_cycles(2 * nbytes, HW)
    assert b >= a
    if nbytes > 10**6:  # doubling the payload doubles the bandwidth term
        lat = HW.hbm_latency_cycles
        assert (b - lat) / (a - lat) == pytest.approx(2.0, rel=0.001)


# --- layer costs ---------------------------------------------------------------

def test_layer_cost_conv_dims():
    g = builtin_model("alexnet")
    conv1 = g.layers[0]
    c = layer_cost(conv1)
    assert c.matrix == (55 * 55, 3 * 11 * 11, 96, 1)
    assert c.macs == 55 * 55 * 363 * 96
    assert c.param_bytes == 96 * 363 + 96
    assert c.act_in_bytes == 3 * 224 * 224


def test_layer_cost_pool_scans_window():
    g = builtin_model("alexnet")
    pool1 = g.layers[2]
    c = layer_cost(pool1)
    assert c.vector_counts == {"pool": 96 * 27 * 27 * 9}


def test_time_estimate_invariants():
    e = TimeEstimate(t_mem=50, t_task=80, t_proc=20, t_comp=100)
    assert e.t_start == 80
    assert e.t_end == 180
