"""Cycle-stepped reference model of the weight-stationary systolic array.

Independent oracle for the analytical cycle formula: it simulates every
processing element every cycle (values included), capturing outputs as they
drain from the bottom row, and reports the controller finish cycle.  Each
tile pass runs in a fixed window; the simulation asserts that every result
has left the array within it and that the accumulated product equals the
plain matrix product.
"""

from __future__ import annotations

import numpy as np


def simulate_tile_pass(a_tile: np.ndarray, w_tile: np.ndarray, d: int):
    """Stream one M x d tile of inputs through d x d stationary weights.

    Returns (partial product M x d, last cycle index a result was written).
    Inputs are skewed one cycle per row; partial sums move down one row per
    cycle; results are written to the output buffer one cycle after leaving
    the bottom row.
    """
    m = a_tile.shape[0]
    a = np.zeros((m, d), dtype=np.int64)
    a[:, :a_tile.shape[1]] = a_tile
    w = np.zeros((d, d), dtype=np.int64)
    w[:w_tile.shape[0], :w_tile.shape[1]] = w_tile

    window = m + 2 * d
    x = np.zeros((d, d), dtype=np.int64)   # activations moving right
    p = np.zeros((d, d), dtype=np.int64)   # partial sums moving down
    out = np.zeros((m, d), dtype=np.int64)
    last_write = -1
    for t in range(window):
        x[:, 1:] = x[:, :-1]
        rows = np.arange(d)
        m_idx = t - rows
        valid = (m_idx >= 0) & (m_idx < m)
        x[:, 0] = np.where(valid, a[np.clip(m_idx, 0, m - 1), rows], 0)
        p[1:] = p[:-1]
        p[0] = 0
        p += w * x
        # a value leaving row d-1 in column n at cycle t belongs to input row
        # t - (d-1) - n and is buffered on the following cycle
        n_idx = np.arange(d)
        om = t - (d - 1) - n_idx
        ok = (om >= 0) & (om < m)
        if ok.any():
            out[om[ok], n_idx[ok]] = p[d - 1, n_idx[ok]]
            if t + 1 > last_write:
                last_write = t + 1
    assert last_write < window, "result drained after the pass window closed"
    return out, last_write


def reference_gemm(m: int, k: int, n: int, d: int, seed: int = 0):
    """Run an M x K . K x N product tile by tile on the reference array.

    Returns (finish_cycles, product) where finish_cycles counts the fixed
    per-pass windows the controller spends and product is the value-exact
    result accumulated across K tiles.
    """
    rng = np.random.default_rng(seed)
    a = rng.integers(-4, 5, size=(m, k), dtype=np.int64)
    b = rng.integers(-4, 5, size=(k, n), dtype=np.int64)
    c = np.zeros((m, n), dtype=np.int64)
    cycles = 0
    for n0 in range(0, n, d):
        n1 = min(n0 + d, n)
        for k0 in range(0, k, d):
            k1 = min(k0 + d, k)
            out, _ = simulate_tile_pass(a[:, k0:k1], b[k0:k1, n0:n1], d)
            c[:, n0:n1] += out[:, :n1 - n0]
            cycles += m + 2 * d
    assert np.array_equal(c, a @ b), "dataflow produced a wrong product"
    return cycles, c
