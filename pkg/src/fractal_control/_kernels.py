"""Hot loops of the walk simulator and their dispatch.

Every kernel exists twice: a numba ``@njit`` version in ``_numba_kernels``
that loops over blocks of paths, and the numpy version here, vectorised over
paths and looping over steps.  ``FRACTAL_CONTROL_NUMBA=0`` selects numpy.
The walk kernel is bit-identical across the two routes; kernels that call
``exp`` agree to rounding (numpy and LLVM ship different ``exp``).

Draw layout per path: one 64-bit draw for the start vertex, then one draw per
21 steps.  Step ``k`` reads 3 bits at offset ``3*((k-1) % 21)``: the low bit
is the sign of dW and the upper two index the padded 4-slot neighbor table
(degree-2 corners list each neighbor twice).
"""
from __future__ import annotations

import numpy as np

from . import rng
from ._config import numba_enabled

STEPS_PER_DRAW = 21
_SEVEN = np.uint64(7)
_CHUNK = 1 << 15


def backend(name: str | None = None) -> str:
    if name is None:
        return "numba" if numba_enabled() else "numpy"
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    return name


def set_workers(workers: int | None) -> None:
    if workers is None or not numba_enabled():
        return
    import numba

    numba.set_num_threads(max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS)))


def _nb():
    from . import _numba_kernels

    return _numba_kernels


def padded_neighbors(neighbors: np.ndarray, degree: np.ndarray) -> np.ndarray:
    nb4 = np.array(neighbors, dtype=np.int32)
    two = degree == 2
    nb4[two] = nb4[two][:, [0, 0, 1, 1]]
    return nb4


class _Streams:
    """Vectorised mirror of the per-path draw schedule."""

    def __init__(self, seed, path0, n, pool):
        with np.errstate(over="ignore"):
            self.state = rng.path_states(int(seed), int(path0), n) + rng.GAMMA
            z = rng.mix64(self.state)
        self.start = pool[(rng.unit_float(z) * pool.size).astype(np.int64)]
        self.pos = STEPS_PER_DRAW
        self.z = None

    def bits(self) -> np.ndarray:
        if self.pos == STEPS_PER_DRAW:
            with np.errstate(over="ignore"):
                self.state = self.state + rng.GAMMA
                self.z = rng.mix64(self.state)
            self.pos = 0
        out = ((self.z >> np.uint64(3 * self.pos)) & _SEVEN).astype(np.int64)
        self.pos += 1
        return out


def _walk_snapshots_np(nb4, root, qv, pool, seed, path0, n_paths, snaps, keep_signs):
    n_snap = snaps.size
    n_steps = int(snaps[n_snap - 1])
    out_v = np.empty((n_paths, n_snap), dtype=np.int32)
    out_w = np.empty((n_paths, n_snap))
    out_q = np.empty((n_paths, n_snap))
    signs = np.empty((n_paths, n_steps if keep_signs else 0), dtype=np.int8)
    for lo in range(0, n_paths, _CHUNK):
        hi = min(n_paths, lo + _CHUNK)
        s = _Streams(seed, path0 + lo, hi - lo, pool)
        v = s.start.astype(np.int32)
        w = np.zeros(hi - lo)
        q = np.zeros(hi - lo)
        g = 0
        while g < n_snap and snaps[g] == 0:
            out_v[lo:hi, g], out_w[lo:hi, g], out_q[lo:hi, g] = v, w, q
            g += 1
        for k in range(1, n_steps + 1):
            bits = s.bits()
            r = root[v]
            q = q + qv[v]
            up = (bits & 1).astype(bool)
            w = np.where(up, w + r, w - r)
            if keep_signs:
                signs[lo:hi, k - 1] = np.where(up, 1, -1)
            v = nb4[v, bits >> 1]
            while g < n_snap and snaps[g] == k:
                out_v[lo:hi, g], out_w[lo:hi, g], out_q[lo:hi, g] = v, w, q
                g += 1
    return out_v, out_w, out_q, signs


def walk_snapshots(nb4, root, qv, pool, seed, path0, n_paths, snaps, keep_signs=False, which=None):
    """Simulate ``n_paths`` walks; record (vertex, W, <W>) after each step
    count in ``snaps`` (sorted; its last entry is the number of steps).

    Returns ``(vertex, W, QV, signs)``; the first three have shape
    ``(n_paths, len(snaps))``, ``signs`` is ``(n_paths, steps)`` int8 when
    ``keep_signs`` is set and empty otherwise.
    """
    snaps = np.ascontiguousarray(snaps, dtype=np.int64)
    if snaps.size == 0 or np.any(np.diff(snaps) < 0) or snaps[0] < 0:
        raise ValueError("snapshot steps must be a nonempty sorted nonnegative array")
    args = (
        np.ascontiguousarray(nb4, dtype=np.int32),
        np.ascontiguousarray(root, dtype=np.float64),
        np.ascontiguousarray(qv, dtype=np.float64),
        np.ascontiguousarray(pool, dtype=np.int64),
        np.uint64(seed),
        np.int64(path0),
        np.int64(n_paths),
        snaps,
        bool(keep_signs),
    )
    if backend(which) == "numba":
        return _nb().walk_snapshots(*args)
    return _walk_snapshots_np(*args)


def _effective_np(k, ramp, coef, spike_coef, spike_lo, spike_hi, spike_on):
    inside = (spike_lo <= k) & (k < spike_hi)
    src = np.where((inside[:, None] & spike_on)[:, :, None], spike_coef, coef)
    return src[:, :, :3], 1.0 + src[:, :, 3] * ramp


def _regulator_pass_np(nb4, root, qv, pool, seed, path0, n_paths, grid, theta_tab, eta_tab, a, dt,
                       coef, spike_coef, spike_lo, spike_hi, spike_on):
    n_grid = grid.size
    n_steps = int(grid[-1])
    n_ctrl = coef.shape[0]
    out_v = np.empty((n_paths, n_grid), dtype=np.int32)
    out_w = np.empty((n_paths, n_grid))
    out_q = np.empty((n_paths, n_grid))
    out_mart = np.empty((n_paths, n_grid))
    out_x = np.empty((n_paths, n_grid))
    out_xf = np.empty((n_paths, n_ctrl))
    out_cost = np.empty((n_paths, n_ctrl))
    for lo in range(0, n_paths, _CHUNK):
        hi = min(n_paths, lo + _CHUNK)
        n = hi - lo
        s = _Streams(seed, path0 + lo, n, pool)
        v = s.start.astype(np.int32)
        w = np.zeros(n)
        q = np.zeros(n)
        intphi = np.zeros(n)
        p0 = 1.0 / theta_tab[0, v]
        x = np.ones((n, n_ctrl))
        run = np.zeros((n, n_ctrl))
        g = 0

        def record(g):
            phi = np.exp(-2.0 * w - q)
            out_v[lo:hi, g], out_w[lo:hi, g], out_q[lo:hi, g] = v, w, q
            out_mart[lo:hi, g] = phi * theta_tab[g, v] - intphi / a
            out_x[lo:hi, g] = x[:, 0]

        for k in range(n_steps):
            if k == grid[g]:
                record(g)
                g += 1
            lam = (k - grid[g - 1]) / (grid[g] - grid[g - 1])
            ramp = k * dt - 0.5
            bits = s.bits()
            r = root[v]
            dq = qv[v]
            dw = np.where(bits & 1, r, -r)
            theta = theta_tab[g - 1, v] * (1.0 - lam) + theta_tab[g, v] * lam
            eta = eta_tab[g - 1, v] * (1.0 - lam) + eta_tab[g, v] * lam
            ex = np.exp(-w - 0.5 * q)
            p = p0 * ex
            intphi = intphi + ex * ex * dt
            base_p = p / a
            base_b = (eta - theta) * p
            eff, scale = _effective_np(k, ramp, coef, spike_coef, spike_lo, spike_hi, spike_on)
            for c in range(n_ctrl):
                e = eff[c]
                u_ac = (e[0, 0] * base_p + e[0, 1] * base_b + e[0, 2]) * scale[c, 0]
                u_s = (e[1, 0] * base_p + e[1, 1] * base_b + e[1, 2]) * scale[c, 1]
                run[:, c] += 0.5 * a * u_ac * u_ac * dt
                x[:, c] += u_ac * dt + u_s * (dq + dw)
            w = w + dw
            q = q + dq
            v = nb4[v, bits >> 1]
        record(g)
        out_xf[lo:hi] = x
        out_cost[lo:hi] = run
    return out_v, out_w, out_q, out_mart, out_x, out_xf, out_cost


def regulator_pass(nb4, root, qv, pool, seed, path0, n_paths, grid, theta_tab, eta_tab, a, dt,
                   coef, spike_coef, spike_lo, spike_hi, spike_on, which=None):
    """One pass of the linear regulator over common paths for a control suite.

    Control ``c`` on channel ``h`` (0: dt, 1: d<W>/dW) is
    ``(coef[c,h,0]*p/a + coef[c,h,1]*(eta-theta)*p + coef[c,h,2]) * (1 + coef[c,h,3]*(t-1/2))``,
    replaced by ``spike_coef`` on steps ``spike_lo[c] <= k < spike_hi[c]``
    when ``spike_on[c,h]``.  Returns grid snapshots (vertex, W, QV, the
    martingale Phi*theta - (1/a)*int Phi, state of control 0), terminal
    states and running costs per control.
    """
    grid = np.ascontiguousarray(grid, dtype=np.int64)
    if grid.size < 2 or grid[0] != 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must start at step 0 and be strictly increasing")
    args = (
        np.ascontiguousarray(nb4, dtype=np.int32),
        np.ascontiguousarray(root, dtype=np.float64),
        np.ascontiguousarray(qv, dtype=np.float64),
        np.ascontiguousarray(pool, dtype=np.int64),
        np.uint64(seed),
        np.int64(path0),
        np.int64(n_paths),
        grid,
        np.ascontiguousarray(theta_tab, dtype=np.float64),
        np.ascontiguousarray(eta_tab, dtype=np.float64),
        float(a),
        float(dt),
        np.ascontiguousarray(coef, dtype=np.float64),
        np.ascontiguousarray(spike_coef, dtype=np.float64),
        np.ascontiguousarray(spike_lo, dtype=np.int64),
        np.ascontiguousarray(spike_hi, dtype=np.int64),
        np.ascontiguousarray(spike_on, dtype=np.bool_),
    )
    if backend(which) == "numba":
        return _nb().regulator_pass(*args)
    return _regulator_pass_np(*args)
