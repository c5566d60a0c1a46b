"""Gasket Brownian motion as the level-m nearest-neighbor walk.

One step of the walk lasts ``5**-m`` time units.  Each step carries a bracket
increment ``dQV = 5**-m * rho_m(v)`` (``rho_m`` the cell-averaged Kusuoka
density at the current vertex) and a martingale increment ``dW = +-sqrt(dQV)``
with an independent fair sign, so ``dW**2 == dQV`` exactly.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TextIO, Union

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .dirichlet import build_measure_table
from .gasket import PreGasket, build_pregasket

SPECTRAL_DIMENSION = 2 * math.log(3) / math.log(5)
WALK_DIMENSION = math.log(5) / math.log(2)

StartSpec = Union[str, int]


@dataclass(frozen=True)
class WalkConfig:
    """Walk parameters.

    ``start`` is ``"uniform"`` (uniform on V_m), ``"interior"`` (uniform on
    V_m minus V_0) or a vertex id (point mass).
    """

    level: int = 6
    horizon: float = 1.0
    start: StartSpec = "uniform"
    seed: int = 0
    paths: int = 100_000

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.paths < 1:
            raise ValueError(f"path count must be >= 1, got {self.paths}")
        if isinstance(self.start, str) and self.start not in ("uniform", "interior"):
            raise ValueError(f"unknown start distribution {self.start!r}")

    @property
    def dt(self) -> float:
        return 5.0 ** -self.level

    @property
    def steps(self) -> int:
        return steps_for(self.horizon, self.level)


def steps_for(t: float, m: int) -> int:
    """ceil(t * 5**m), tolerant to float noise in ``t``."""
    x = t * 5 ** m
    return max(0, math.ceil(x - 1e-9 * max(1.0, x)))


def steps_at(t: float, m: int) -> int:
    """Nearest step count to time ``t``."""
    return int(round(t * 5 ** m))


@dataclass(frozen=True, eq=False)
class WalkModel:
    """Tables the kernels need at one level."""

    graph: PreGasket
    nb4: np.ndarray
    density: np.ndarray
    root: np.ndarray
    qv: np.ndarray
    nu_mass: np.ndarray

    @property
    def level(self) -> int:
        return self.graph.level

    @property
    def n_vertices(self) -> int:
        return self.graph.n_vertices

    def pool(self, start: StartSpec) -> np.ndarray:
        n = self.n_vertices
        if isinstance(start, str):
            if start == "uniform":
                return np.arange(n, dtype=np.int64)
            if start == "interior":
                return np.setdiff1d(np.arange(n), self.graph.corner_ids).astype(np.int64)
            raise ValueError(f"unknown start distribution {start!r}")
        self.graph._check_vertex(start)
        return np.array([int(start)], dtype=np.int64)

    def start_distribution(self, start: StartSpec) -> np.ndarray:
        pool = self.pool(start)
        pi = np.zeros(self.n_vertices)
        pi[pool] = 1.0 / pool.size
        return pi


@functools.lru_cache(maxsize=16)
def walk_model(m: int) -> WalkModel:
    g = build_pregasket(m)
    density = build_measure_table(m, exact=False).density_float()
    root = np.sqrt(density * 5.0 ** -m)
    qv = root * root
    for arr in (density, root, qv):
        arr.setflags(write=False)
    nb4 = _kernels.padded_neighbors(g.neighbors, g.degree)
    nb4.setflags(write=False)
    return WalkModel(graph=g, nb4=nb4, density=density, root=root, qv=qv, nu_mass=g.vertex_nu_mass())


# ---------------------------------------------------------------------------
# exact finite-chain computations (oracles)


@functools.lru_cache(maxsize=16)
def transition_matrix(m: int) -> sp.csr_matrix:
    g = build_pregasket(m)
    rows = np.concatenate([g.edges[:, 0], g.edges[:, 1]])
    cols = np.concatenate([g.edges[:, 1], g.edges[:, 0]])
    vals = 1.0 / g.degree[rows]
    return sp.csr_matrix((vals, (rows, cols)), shape=(g.n_vertices, g.n_vertices))


def stationary_distribution(m: int) -> np.ndarray:
    g = build_pregasket(m)
    return g.degree / g.degree.sum()


def exact_distributions(m: int, start: np.ndarray, steps: Sequence[int]) -> np.ndarray:
    """Law of X after each step count in ``steps`` (sorted), by matrix powers."""
    pt = transition_matrix(m).T.tocsr()
    dist = np.asarray(start, dtype=float).copy()
    out = np.empty((len(steps), dist.size))
    k = 0
    for i, s in enumerate(steps):
        while k < s:
            dist = pt @ dist
            k += 1
        out[i] = dist
    return out


def exact_bracket_mean(m: int, start: StartSpec, steps: Sequence[int]) -> np.ndarray:
    """E[<W>] after each step count, summed exactly over the chain's laws."""
    model = walk_model(m)
    pt = transition_matrix(m).T.tocsr()
    dist = model.start_distribution(start)
    out = np.empty(len(steps))
    acc = 0.0
    k = 0
    for i, s in enumerate(steps):
        while k < s:
            acc += dist @ model.qv
            dist = pt @ dist
            k += 1
        out[i] = acc
    return out


# ---------------------------------------------------------------------------
# path sampling


@dataclass(frozen=True, eq=False)
class PathSample:
    """One trajectory: ``vertex[k]`` is X at step k (``steps+1`` entries);
    ``dW[k]``, ``dQV[k]`` are the increments of step k."""

    dt: float
    vertex: np.ndarray
    dW: np.ndarray
    dQV: np.ndarray

    @property
    def steps(self) -> int:
        return int(self.dW.size)

    @property
    def W(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.dW)])

    @property
    def QV(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.dQV)])

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def write_csv(self, out: TextIO) -> None:
        out.write("step,vertex,dW,dQV\n")
        for k in range(self.steps):
            out.write(f"{k},{int(self.vertex[k])},{float(self.dW[k])!r},{float(self.dQV[k])!r}\n")


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Full per-step record of ``n`` paths, stored step-major.

    ``vertex`` has shape ``(steps+1, n)`` and ``sign`` shape ``(steps, n)``.
    """

    level: int
    seed: int
    path0: int
    vertex: np.ndarray
    sign: np.ndarray
    model: WalkModel = field(repr=False)

    @property
    def n(self) -> int:
        return int(self.vertex.shape[1])

    @property
    def steps(self) -> int:
        return int(self.sign.shape[0])

    @property
    def dt(self) -> float:
        return 5.0 ** -self.level

    def increments(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """(dW, dQV) of step ``k`` for every path."""
        v = self.vertex[k]
        return self.sign[k] * self.model.root[v], self.model.qv[v]

    def dqv(self) -> np.ndarray:
        return self.model.qv[self.vertex[:-1]]

    def dw(self) -> np.ndarray:
        return self.sign * self.model.root[self.vertex[:-1]]

    def cumulative(self) -> tuple[np.ndarray, np.ndarray]:
        """(W, QV) at every step, shape ``(steps+1, n)``."""
        zero = np.zeros((1, self.n))
        return (
            np.concatenate([zero, np.cumsum(self.dw(), axis=0)]),
            np.concatenate([zero, np.cumsum(self.dqv(), axis=0)]),
        )

    def path(self, i: int) -> PathSample:
        v = self.vertex[:, i]
        dqv = self.model.qv[v[:-1]]
        dw = self.sign[:, i] * self.model.root[v[:-1]]
        return PathSample(dt=self.dt, vertex=v.copy(), dW=dw, dQV=dqv)


def sample_paths(cfg: WalkConfig, n: int | None = None, path0: int = 0, which: str | None = None) -> PathBatch:
    """Full per-step paths ``path0 .. path0+n-1`` of the configured walk."""
    n = cfg.paths if n is None else n
    model = walk_model(cfg.level)
    steps = cfg.steps
    snaps = np.arange(steps + 1)
    v, _, _, signs = _kernels.walk_snapshots(
        model.nb4, model.root, model.qv, model.pool(cfg.start), cfg.seed, path0, n, snaps,
        keep_signs=True, which=which,
    )
    return PathBatch(
        level=cfg.level, seed=cfg.seed, path0=path0,
        vertex=np.ascontiguousarray(v.T), sign=np.ascontiguousarray(signs.T), model=model,
    )


def sample_path(cfg: WalkConfig, index: int = 0) -> PathSample:
    """Path number ``index`` of the configured stream family."""
    return sample_paths(cfg, n=1, path0=index).path(0)


@dataclass(frozen=True, eq=False)
class Snapshots:
    """(vertex, W, QV) of ``n`` paths at the step counts ``steps``."""

    level: int
    steps: np.ndarray
    vertex: np.ndarray
    W: np.ndarray
    QV: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.steps * 5.0 ** -self.level


def simulate_snapshots(cfg: WalkConfig, steps: Iterable[int], n: int | None = None, path0: int = 0,
                       which: str | None = None) -> Snapshots:
    steps = np.unique(np.asarray(list(steps), dtype=np.int64))
    n = cfg.paths if n is None else n
    model = walk_model(cfg.level)
    v, w, q, _ = _kernels.walk_snapshots(
        model.nb4, model.root, model.qv, model.pool(cfg.start), cfg.seed, path0, n, steps, which=which
    )
    return Snapshots(level=cfg.level, steps=steps, vertex=v, W=w, QV=q)


# ---------------------------------------------------------------------------
# estimators


@dataclass(frozen=True)
class Estimate:
    name: str
    value: float
    stderr: float
    n: int

    def ci(self, z: float = 1.96) -> tuple[float, float]:
        return self.value - z * self.stderr, self.value + z * self.stderr


def mean_estimate(name: str, samples: np.ndarray) -> Estimate:
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    se = float(samples.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return Estimate(name, float(samples.mean()), se, n)


def write_estimates(rows: Iterable[Estimate], out: TextIO) -> None:
    out.write("name,value,stderr,n\n")
    for e in rows:
        out.write(f"{e.name},{float(e.value)!r},{float(e.stderr)!r},{int(e.n)}\n")


def fit_loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log y against log x."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(lx, ly, 1)[0])


@dataclass(frozen=True)
class KernelEstimate:
    t: np.ndarray
    p_hat: np.ndarray
    stderr: np.ndarray
    n: int

    @property
    def slope(self) -> float:
        return fit_loglog_slope(self.t, self.p_hat)

    def write_csv(self, out: TextIO) -> None:
        out.write("t,p_hat,stderr\n")
        for t, p, s in zip(self.t, self.p_hat, self.stderr):
            out.write(f"{float(t)!r},{float(p)!r},{float(s)!r}\n")
        out.write(f"# slope,{float(self.slope)!r}\n")


def min_resolvable_time(m: int) -> float:
    return 10 * 5.0 ** -m


def estimate_kernel(m: int, t: Union[float, Sequence[float]], x: int, y: int | None = None,
                    paths: int = 200_000, seed: int = 0) -> KernelEstimate:
    """Occupation estimate of the heat kernel p_t(x, y) w.r.t. nu (y = x by default)."""
    y = x if y is None else y
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    tmin = min_resolvable_time(m)
    if np.any(ts < tmin * (1 - 1e-12)):
        raise ValueError(f"time below resolution: t must be >= 10*5**-{m} = {tmin:g}")
    model = walk_model(m)
    model.graph._check_vertex(y)
    steps = np.array([steps_at(s, m) for s in ts])
    cfg = WalkConfig(level=m, horizon=float(ts.max()), start=int(x), seed=seed, paths=paths)
    snap = simulate_snapshots(cfg, steps)
    idx = np.searchsorted(snap.steps, steps)
    hit = (snap.vertex[:, idx] == y).mean(axis=0)
    mass = model.nu_mass[y]
    return KernelEstimate(
        t=steps * 5.0 ** -m, p_hat=hit / mass, stderr=np.sqrt(hit * (1 - hit) / paths) / mass, n=paths
    )


def estimate_kernel_on_diagonal(m: int, t, x: int, paths: int = 200_000, seed: int = 0) -> KernelEstimate:
    return estimate_kernel(m, t, x, None, paths=paths, seed=seed)


def exact_kernel(m: int, t: Union[float, Sequence[float]], x: int, y: int | None = None) -> np.ndarray:
    """p_t(x, y) of the level-m chain computed from exact matrix powers."""
    y = x if y is None else y
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    steps = [steps_at(s, m) for s in ts]
    start = np.zeros(build_pregasket(m).n_vertices)
    start[x] = 1.0
    order = np.argsort(steps)
    dist = exact_distributions(m, start, [steps[i] for i in order])
    out = np.empty(len(steps))
    out[order] = dist[:, y]
    return out / walk_model(m).nu_mass[y]


Interval = tuple[float, float]


@dataclass(frozen=True, eq=False)
class StepState:
    """What a policy or predicate may look at on step ``k`` (arrays over paths)."""

    k: int
    t: float
    vertex: np.ndarray
    W: np.ndarray
    QV: np.ndarray


StepPredicate = Callable[[StepState], np.ndarray]


def iter_steps(paths: PathBatch, stop: int | None = None):
    """Yield ``(state, dW, dQV)`` for steps ``0 .. stop-1`` of ``paths``."""
    stop = paths.steps if stop is None else min(stop, paths.steps)
    w = np.zeros(paths.n)
    q = np.zeros(paths.n)
    for k in range(stop):
        dw, dq = paths.increments(k)
        yield StepState(k, k * paths.dt, paths.vertex[k], w, q), dw, dq
        w = w + dw
        q = q + dq


@dataclass(frozen=True)
class MomentReport:
    """Estimates of E[(int_I 1_E d<W>)^k] on a family of sets I."""

    k: np.ndarray
    sizes: np.ndarray  # Lebesgue measure of each I
    estimates: np.ndarray  # (len(sizes), len(k))
    stderr: np.ndarray
    n: int

    def slope(self, k_index: int = 0) -> float:
        return fit_loglog_slope(self.sizes, self.estimates[:, k_index])

    def ratio_slope(self, num: int = 1, den: int = 0) -> float:
        return fit_loglog_slope(self.sizes, self.estimates[:, num] / self.estimates[:, den])


def _normalise_intervals(I) -> list[Interval]:
    if len(I) == 2 and np.isscalar(I[0]):
        I = [I]
    out = []
    for lo, hi in I:
        if hi < lo:
            raise ValueError(f"interval ({lo}, {hi}) is reversed")
        out.append((float(lo), float(hi)))
    return out


def _interval_steps(intervals: list[Interval], m: int) -> list[tuple[int, int]]:
    return [(steps_at(lo, m), steps_at(hi, m)) for lo, hi in intervals]


def bracket_on(intervals: list[Interval], m: int, QV: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """int_I d<W> per path from QV snapshots taken at ``steps``."""
    pos = {int(s): i for i, s in enumerate(steps)}
    total = np.zeros(QV.shape[0])
    for lo, hi in _interval_steps(intervals, m):
        total += QV[:, pos[hi]] - QV[:, pos[lo]]
    return total


def estimate_moment(k, intervals, predicate: Union[str, StepPredicate, None], cfg: WalkConfig,
                    paths: PathBatch | None = None) -> MomentReport:
    """Monte Carlo m_k(I; E) = E[(sum over steps in I with E true of dQV)^k].

    ``intervals`` is one ``(lo, hi)`` pair, a union of pairs, or a list of
    such families (one report row each).  ``predicate`` is ``None``/"always",
    "never", or a callable ``StepState -> bool mask``; callables need a full
    ``PathBatch``.
    """
    ks = np.atleast_1d(np.asarray(k, dtype=float))
    if np.any(ks <= 0):
        raise ValueError("moment orders must be positive")
    families = _as_families(intervals)
    for fam in families:
        for lo, hi in fam:
            if lo < 0 or hi > cfg.horizon + 1e-12:
                raise ValueError(f"interval ({lo}, {hi}) not inside [0, {cfg.horizon}]")
    sizes = np.array([sum(hi - lo for lo, hi in fam) for fam in families])
    m = cfg.level
    if predicate == "never":
        n = paths.n if paths is not None else cfg.paths
        if n < 1:
            raise ValueError("empty path set")
        zeros = np.zeros((len(families), ks.size))
        return MomentReport(ks, sizes, zeros, zeros.copy(), n)

    if predicate is None or predicate == "always":
        if paths is None:
            edges = sorted({s for fam in families for pair in _interval_steps(fam, m) for s in pair})
            snap = simulate_snapshots(cfg, [0] + edges)
            integrals = [bracket_on(fam, m, snap.QV, snap.steps) for fam in families]
            n = cfg.paths
        else:
            _, qv = paths.cumulative()
            steps = np.arange(paths.steps + 1)
            integrals = [bracket_on(fam, m, qv.T, steps) for fam in families]
            n = paths.n
    else:
        if paths is None:
            raise ValueError("a step predicate needs a full PathBatch")
        n = paths.n
        step_sets = [_interval_steps(fam, m) for fam in families]
        last = max((hi for ss in step_sets for _, hi in ss), default=0)
        integrals = [np.zeros(n) for _ in families]
        for state, _, dq in iter_steps(paths, last):
            mask = None
            for total, ss in zip(integrals, step_sets):
                if any(lo <= state.k < hi for lo, hi in ss):
                    if mask is None:
                        mask = np.broadcast_to(np.asarray(predicate(state), dtype=bool), (n,))
                    total += np.where(mask, dq, 0.0)
    if n < 1:
        raise ValueError("empty path set")
    est = np.empty((len(families), ks.size))
    se = np.empty_like(est)
    for i, integ in enumerate(integrals):
        for j, kk in enumerate(ks):
            e = mean_estimate("m", integ ** kk)
            est[i, j], se[i, j] = e.value, e.stderr
    return MomentReport(ks, sizes, est, se, n)


def _as_families(intervals) -> list[list[Interval]]:
    # a single pair, a union (list of pairs) or a list of unions
    if len(intervals) == 2 and np.isscalar(intervals[0]):
        return [_normalise_intervals(intervals)]
    first = intervals[0]
    if len(first) == 2 and np.isscalar(first[0]):
        return [_normalise_intervals(intervals)]
    return [_normalise_intervals(fam) for fam in intervals]


def singularity_profile(qv_edges: np.ndarray) -> np.ndarray:
    """Path-averaged Lorenz-type curve of bracket mass over equal dt-bins.

    ``qv_edges`` is ``(paths, B+1)`` cumulative bracket at the bin edges.
    Entry ``i`` is the share of total mass held by the ``i+1`` heaviest bins.
    """
    qv_edges = np.atleast_2d(qv_edges)
    mass = np.diff(qv_edges, axis=1)
    total = mass.sum(axis=1, keepdims=True)
    share = -np.sort(-mass / total, axis=1)
    return np.cumsum(share, axis=1).mean(axis=0)


def top_share(curve: np.ndarray, fraction: float = 0.1) -> float:
    b = max(1, int(round(fraction * curve.size)))
    return float(curve[b - 1])


def bracket_bin_edges(cfg: WalkConfig, bins: int, n: int | None = None) -> np.ndarray:
    steps = cfg.steps
    if steps % bins:
        raise ValueError(f"{bins} bins do not divide the {steps} steps evenly")
    snap = simulate_snapshots(cfg, np.arange(0, steps + 1, steps // bins), n=n)
    return snap.QV


@dataclass(frozen=True)
class ExpBracketCheck:
    kappa: float
    t: float
    estimate: Estimate
    doubled: Estimate
    stable: bool


def exp_bracket_check(kappa: float, t: float, cfg: WalkConfig) -> ExpBracketCheck:
    """E[exp(kappa <W>_t)] with a stability check under doubling the paths."""
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    k = steps_at(t, cfg.level)
    if kappa == 0:
        one = Estimate("exp_bracket", 1.0, 0.0, cfg.paths)
        return ExpBracketCheck(kappa, t, one, Estimate("exp_bracket", 1.0, 0.0, 2 * cfg.paths), True)
    snap = simulate_snapshots(cfg, [0, k], n=2 * cfg.paths)
    vals = np.exp(kappa * snap.QV[:, -1])
    base = mean_estimate("exp_bracket", vals[: cfg.paths])
    doubled = mean_estimate("exp_bracket", vals)
    stable = bool(np.isfinite(doubled.value) and abs(doubled.value - base.value) < 2 * 1.96 * base.stderr)
    return ExpBracketCheck(kappa, t, base, doubled, stable)
