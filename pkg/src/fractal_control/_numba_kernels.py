"""numba versions of the hot loops; imported lazily by ``_kernels``.

Paths are processed in blocks of ``BLOCK`` interleaved walkers so the
per-path dependency chains (draw -> neighbor -> table lookups) overlap.
"""
import numpy as np
from numba import njit, prange

from . import rng as _rng

BLOCK = 32
STEPS_PER_DRAW = 21

GAMMA = _rng.GAMMA
_KEY = _rng._KEY
_S11 = _rng._S11
_SEVEN = np.uint64(7)
_ONE = np.uint64(1)
TO_UNIT = _rng.TO_UNIT

mix64 = njit(cache=True)(_rng.mix64)


@njit(cache=True)
def stream_state(seed, path):
    return mix64(mix64(seed * GAMMA + _KEY) ^ mix64(path + _ONE))


@njit(cache=True)
def _start_block(seed, lo, nb, pool, state, v):
    for j in range(nb):
        s = stream_state(seed, np.uint64(lo + j)) + GAMMA
        state[j] = s
        v[j] = pool[np.int64((mix64(s) >> _S11) * TO_UNIT * pool.size)]


@njit(parallel=True, cache=True)
def walk_snapshots(nb4, root, qv, pool, seed, path0, n_paths, snaps, keep_signs):
    n_snap = snaps.size
    n_steps = snaps[n_snap - 1]
    out_v = np.empty((n_paths, n_snap), dtype=np.int32)
    out_w = np.empty((n_paths, n_snap))
    out_q = np.empty((n_paths, n_snap))
    signs = np.empty((n_paths, n_steps if keep_signs else 0), dtype=np.int8)
    n_blocks = (n_paths + BLOCK - 1) // BLOCK
    for b in prange(n_blocks):
        lo = b * BLOCK
        nb = min(BLOCK, n_paths - lo)
        state = np.empty(BLOCK, dtype=np.uint64)
        z = np.empty(BLOCK, dtype=np.uint64)
        v = np.empty(BLOCK, dtype=np.int32)
        w = np.zeros(BLOCK)
        q = np.zeros(BLOCK)
        _start_block(seed, path0 + lo, nb, pool, state, v)
        g = 0
        while g < n_snap and snaps[g] == 0:
            for j in range(nb):
                out_v[lo + j, g] = v[j]
                out_w[lo + j, g] = w[j]
                out_q[lo + j, g] = q[j]
            g += 1
        pos = STEPS_PER_DRAW
        for k in range(1, n_steps + 1):
            if pos == STEPS_PER_DRAW:
                for j in range(nb):
                    state[j] += GAMMA
                    z[j] = mix64(state[j])
                pos = 0
            sh = np.uint64(3 * pos)
            for j in range(nb):
                bits = np.int64((z[j] >> sh) & _SEVEN)
                vv = v[j]
                r = root[vv]
                q[j] += qv[vv]
                if bits & 1:
                    w[j] += r
                else:
                    w[j] -= r
                if keep_signs:
                    signs[lo + j, k - 1] = 1 if bits & 1 else -1
                v[j] = nb4[vv, bits >> 1]
            pos += 1
            while g < n_snap and snaps[g] == k:
                for j in range(nb):
                    out_v[lo + j, g] = v[j]
                    out_w[lo + j, g] = w[j]
                    out_q[lo + j, g] = q[j]
                g += 1
    return out_v, out_w, out_q, signs


@njit(cache=True)
def _effective(k, ramp, coef, spike_coef, spike_lo, spike_hi, spike_on, eff, scale):
    # per-step channel coefficients; the ramp factor is folded into ``scale``
    for c in range(coef.shape[0]):
        inside = spike_lo[c] <= k < spike_hi[c]
        for h in range(2):
            src = spike_coef if inside and spike_on[c, h] else coef
            for i in range(3):
                eff[c, h, i] = src[c, h, i]
            scale[c, h] = 1.0 + src[c, h, 3] * ramp


@njit(parallel=True, cache=True)
def regulator_pass(nb4, root, qv, pool, seed, path0, n_paths, grid, theta_tab, eta_tab, a, dt,
                   coef, spike_coef, spike_lo, spike_hi, spike_on):
    n_grid = grid.size
    n_steps = grid[n_grid - 1]
    n_ctrl = coef.shape[0]
    out_v = np.empty((n_paths, n_grid), dtype=np.int32)
    out_w = np.empty((n_paths, n_grid))
    out_q = np.empty((n_paths, n_grid))
    out_mart = np.empty((n_paths, n_grid))
    out_x = np.empty((n_paths, n_grid))
    out_xf = np.empty((n_paths, n_ctrl))
    out_cost = np.empty((n_paths, n_ctrl))
    n_blocks = (n_paths + BLOCK - 1) // BLOCK
    for b in prange(n_blocks):
        lo = b * BLOCK
        nb = min(BLOCK, n_paths - lo)
        state = np.empty(BLOCK, dtype=np.uint64)
        z = np.empty(BLOCK, dtype=np.uint64)
        v = np.empty(BLOCK, dtype=np.int32)
        w = np.zeros(BLOCK)
        q = np.zeros(BLOCK)
        intphi = np.zeros(BLOCK)
        p0 = np.empty(BLOCK)
        x = np.ones((n_ctrl, BLOCK))
        run = np.zeros((n_ctrl, BLOCK))
        bp = np.zeros(BLOCK)
        bb = np.zeros(BLOCK)
        inc = np.zeros(BLOCK)
        eff = np.empty((n_ctrl, 2, 3))
        scale = np.empty((n_ctrl, 2))
        _start_block(seed, path0 + lo, nb, pool, state, v)
        for j in range(nb):
            p0[j] = 1.0 / theta_tab[0, v[j]]
        pos = STEPS_PER_DRAW
        g = 0
        for k in range(n_steps):
            if k == grid[g]:
                for j in range(nb):
                    phi = np.exp(-2.0 * w[j] - q[j])
                    out_v[lo + j, g] = v[j]
                    out_w[lo + j, g] = w[j]
                    out_q[lo + j, g] = q[j]
                    out_mart[lo + j, g] = phi * theta_tab[g, v[j]] - intphi[j] / a
                    out_x[lo + j, g] = x[0, j]
                g += 1
            lam = (k - grid[g - 1]) / (grid[g] - grid[g - 1])
            ramp = k * dt - 0.5
            _effective(k, ramp, coef, spike_coef, spike_lo, spike_hi, spike_on, eff, scale)
            if pos == STEPS_PER_DRAW:
                for j in range(nb):
                    state[j] += GAMMA
                    z[j] = mix64(state[j])
                pos = 0
            sh = np.uint64(3 * pos)
            for j in range(nb):
                bits = np.int64((z[j] >> sh) & _SEVEN)
                vv = v[j]
                r = root[vv]
                dq = qv[vv]
                dw = r if bits & 1 else -r
                theta = theta_tab[g - 1, vv] * (1.0 - lam) + theta_tab[g, vv] * lam
                eta = eta_tab[g - 1, vv] * (1.0 - lam) + eta_tab[g, vv] * lam
                ex = np.exp(-w[j] - 0.5 * q[j])
                p = p0[j] * ex
                intphi[j] += ex * ex * dt
                bp[j] = p / a
                bb[j] = (eta - theta) * p
                inc[j] = dq + dw
                w[j] += dw
                q[j] += dq
                v[j] = nb4[vv, bits >> 1]
            # controls outside, paths inside: contiguous and vectorisable
            for c in range(n_ctrl):
                e00, e01, e02, s0 = eff[c, 0, 0], eff[c, 0, 1], eff[c, 0, 2], scale[c, 0]
                e10, e11, e12, s1 = eff[c, 1, 0], eff[c, 1, 1], eff[c, 1, 2], scale[c, 1]
                xc = x[c]
                rc = run[c]
                for j in range(BLOCK):
                    u_ac = (e00 * bp[j] + e01 * bb[j] + e02) * s0
                    u_s = (e10 * bp[j] + e11 * bb[j] + e12) * s1
                    rc[j] += 0.5 * a * u_ac * u_ac * dt
                    xc[j] += u_ac * dt + u_s * inc[j]
            pos += 1
        for j in range(nb):
            phi = np.exp(-2.0 * w[j] - q[j])
            out_v[lo + j, g] = v[j]
            out_w[lo + j, g] = w[j]
            out_q[lo + j, g] = q[j]
            out_mart[lo + j, g] = phi * theta_tab[g, v[j]] - intphi[j] / a
            out_x[lo + j, g] = x[0, j]
            for c in range(n_ctrl):
                out_xf[lo + j, c] = x[c, j]
                out_cost[lo + j, c] = run[c, j]
    return out_v, out_w, out_q, out_mart, out_x, out_xf, out_cost
