"""The scalar linear regulator on the gasket.

Minimise ``E[(a/2) int_0^1 u^2 dt + x(1)^2]`` subject to
``dx = u dt + u d<W> + u dW``, ``x(0) = 1``.  The candidate optimum is

    u_ac = p/a,   u_sing = (eta - theta) p,   p = p0 exp(-W - <W>/2),

where ``theta`` solves the backward equation with ``theta(1) = -1/2`` and
``Phi theta - (1/a) int Phi`` is a martingale, ``Phi = exp(-2W - <W>)``.
``theta(t, v)`` is a function of time and the current vertex; it is computed
here by the exact backward recursion of the level-m chain and stored on a
coarse time grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .control import (
    AdjointGenerator,
    BasisSpec,
    GridObservation,
    coarse_grid,
    hamiltonians,
    regulator_coefficients,
    solve_linear_adjoint,
)
from .diffusion import (
    Estimate,
    PathBatch,
    PathSample,
    WalkConfig,
    fit_loglog_slope,
    mean_estimate,
    sample_paths,
    transition_matrix,
    walk_model,
)

GRID_POINTS = 33
SPIKE_EPSILONS = tuple(2.0 ** -j for j in range(3, 7))
Z99 = 2.5758293035489004


class CoverageError(RuntimeError):
    def __init__(self, vertices: Sequence[int]):
        super().__init__(f"too few sub-samples at vertices {list(vertices)}")
        self.vertices = list(vertices)


@dataclass(frozen=True)
class RegulatorConfig:
    a: float = 1.0
    level: int = 6
    paths: int = 100_000
    seed: int = 0
    start: str | int = "uniform"
    grid_points: int = GRID_POINTS
    spike_epsilons: tuple = SPIKE_EPSILONS

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"a must be positive, got {self.a}")
        if self.paths < 2:
            raise ValueError("need at least two paths")
        if self.grid_points < 2:
            raise ValueError("grid needs at least two points")

    @property
    def walk(self) -> WalkConfig:
        return WalkConfig(level=self.level, horizon=1.0, start=self.start, seed=self.seed, paths=self.paths)

    @property
    def steps(self) -> int:
        return 5 ** self.level

    @property
    def dt(self) -> float:
        return 5.0 ** -self.level


def phi_along_path(path: PathSample) -> np.ndarray:
    """Phi = exp(-2W - <W>) at every step of ``path``."""
    return np.exp(-2.0 * path.W - path.QV)


def ito_residual(paths: PathBatch) -> Estimate:
    """Mean over paths of sum_k [dPhi - (Phi dQV - 2 Phi dW)] on the batch horizon."""
    W, QV = paths.cumulative()
    phi = np.exp(-2.0 * W - QV)
    res = np.diff(phi, axis=0) - (phi[:-1] * paths.dqv() - 2.0 * phi[:-1] * paths.dw())
    return mean_estimate("ito_residual", res.sum(axis=0))


# ---------------------------------------------------------------------------
# theta and eta


@dataclass(frozen=True, eq=False)
class ThetaTable:
    """theta and eta at grid steps (rows) and vertices (columns).

    ``theta_se`` is zero for the exact recursion and carries Monte Carlo
    errors for sub-simulated entries.
    """

    a: float
    level: int
    grid: np.ndarray
    theta: np.ndarray
    eta: np.ndarray
    theta_se: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.grid * 5.0 ** -self.level


def theta_recursion(a: float, m: int, grid: np.ndarray):
    """Exact backward recursion for G = -theta on the level-m chain.

    ``G_K = 1/2`` and ``G_k(v) = dt/a + cosh(2 r_v) exp(-q_v) (P G_{k+1})(v)``
    with ``r_v = sqrt(q_v)`` the step size of W at v.  The dW-coefficient of
    the martingale increment is projected exactly:
    ``eta_k = sinh(2 r_v) exp(-q_v) (P G_{k+1})(v) / r_v - 2 G_k(v)``.
    Returns ``(theta, eta)`` sampled at ``grid``.
    """
    model = walk_model(m)
    P = transition_matrix(m)
    dt = 5.0 ** -m
    r, q = model.root, model.qv
    carry = np.cosh(2 * r) * np.exp(-q)
    slope = np.sinh(2 * r) * np.exp(-q) / r
    K = int(grid[-1])
    want = {int(s): i for i, s in enumerate(grid)}
    theta = np.empty((grid.size, model.n_vertices))
    eta = np.empty_like(theta)
    G = np.full(model.n_vertices, 0.5)
    theta[-1] = -G
    last_eta = None
    for k in range(K - 1, -1, -1):
        PG = P @ G
        G = dt / a + carry * PG
        if k in want or k == K - 1:
            e = slope * PG - 2 * G
            if k == K - 1:
                last_eta = e
            if k in want:
                theta[want[k]] = -G
                eta[want[k]] = e
    eta[-1] = last_eta
    return theta, eta


def tabulate_theta_eta(cfg: RegulatorConfig) -> ThetaTable:
    grid = coarse_grid(cfg.steps, cfg.grid_points)
    theta, eta = theta_recursion(cfg.a, cfg.level, grid)
    return ThetaTable(cfg.a, cfg.level, grid, theta, eta, np.zeros_like(theta))


def theta_subsimulation(cfg: RegulatorConfig, grid_index: int, vertices: Sequence[int], samples: int,
                        grid: np.ndarray | None = None, min_samples: int = 2):
    """Monte Carlo theta(t_j, v) from fresh walks started at each vertex.

    Estimates ``-E[Phi(1)/Phi(t)/2 + (1/a) int_t^1 Phi(r)/Phi(t) dr]`` over
    ``samples`` walks per vertex; returns ``(estimates, stderrs)``.
    """
    if samples < min_samples:
        raise CoverageError(vertices)
    grid = coarse_grid(cfg.steps, cfg.grid_points) if grid is None else grid
    remaining = (cfg.steps - int(grid[grid_index])) * cfg.dt
    est, se = [], []
    for i, v in enumerate(vertices):
        if remaining <= 0:
            est.append(-0.5)
            se.append(0.0)
            continue
        wc = WalkConfig(level=cfg.level, horizon=remaining, start=int(v),
                        seed=cfg.seed + 7919 * (grid_index + 1), paths=samples)
        pb = sample_paths(wc, path0=i * samples)
        W, QV = pb.cumulative()
        phi = np.exp(-2.0 * W - QV)
        vals = -(phi[-1] / 2 + phi[:-1].sum(axis=0) * cfg.dt / cfg.a)
        e = mean_estimate("theta", vals)
        est.append(e.value)
        se.append(e.stderr)
    return np.array(est), np.array(se)


def dp_optimum(cfg: RegulatorConfig) -> float:
    """Exact optimal cost of the discrete problem with vertex feedback.

    Value ``A_k(v) x^2``: with ``B = (P A_{k+1})(v)`` the bracket channel
    gives ``B/(1+q)`` and the dt channel ``u = -2B'x/(a + 2B' dt)``.
    """
    m = cfg.level
    model = walk_model(m)
    P = transition_matrix(m)
    dt, a, q = cfg.dt, cfg.a, model.qv
    A = np.ones(model.n_vertices)
    for _ in range(cfg.steps):
        Bp = (P @ A) / (1.0 + q)
        c = -2.0 * Bp / (a + 2.0 * Bp * dt)
        A = 0.5 * a * c * c * dt + Bp * (1.0 + c * dt) ** 2
    return float(model.start_distribution(cfg.start) @ A)


# ---------------------------------------------------------------------------
# control suite and the forward pass

# channel value: (c0 p/a + c1 (eta - theta) p + c2) (1 + c3 (t - 1/2))
_UBAR = ((1, 0, 0, 0), (0, 1, 0, 0))


def _coef(ac, sing):
    return np.array([ac, sing], dtype=float)


def competitor_suite() -> dict[str, np.ndarray]:
    """Named (2, 4) channel coefficients; the first entry is the candidate optimum."""
    zero = (0, 0, 0, 0)
    suite = {
        "u_bar": _coef(*_UBAR),
        "zero": _coef(zero, zero),
        "const_plus_half": _coef((0, 0, 0.5, 0), (0, 0, 0.5, 0)),
        "const_minus_half": _coef((0, 0, -0.5, 0), (0, 0, -0.5, 0)),
        "p_over_a_everywhere": _coef((1, 0, 0, 0), (1, 0, 0, 0)),
        "eta_theta_p_everywhere": _coef((0, 1, 0, 0), (0, 1, 0, 0)),
        "dt_channel_only": _coef((1, 0, 0, 0), zero),
    }
    for s in (0.5, 0.9, 1.1, 1.5):
        suite[f"u_bar_scaled_{s:g}"] = _coef((s, 0, 0, 0), (0, s, 0, 0))
    for r in (-0.5, 0.5):
        suite[f"u_bar_ramp_{r:+g}"] = _coef((1, 0, 0, r), (0, 1, 0, r))
    return suite


@dataclass(frozen=True)
class SpikeSpec:
    """Replace one channel of u_bar on steps [0, eps) by ``coef``."""

    name: str
    channel: int  # 0: dt, 1: bracket
    epsilon: float
    coef: tuple


def spike_suite(epsilons: Sequence[float]) -> list[SpikeSpec]:
    out = []
    for channel, label in ((0, "dt"), (1, "bracket")):
        for eps in epsilons:
            out.append(SpikeSpec(f"spike_{label}_zero_eps{eps:g}", channel, eps, (0, 0, 0, 0)))
            shift = (1, 0, 0.5, 0) if channel == 0 else (0, 1, 0.5, 0)
            out.append(SpikeSpec(f"spike_{label}_shift_eps{eps:g}", channel, eps, shift))
    return out


@dataclass(frozen=True, eq=False)
class RegulatorRun:
    """Output of one forward pass over common paths."""

    names: list
    grid: np.ndarray
    vertex: np.ndarray
    W: np.ndarray
    QV: np.ndarray
    mart: np.ndarray
    xbar: np.ndarray
    x_final: np.ndarray
    run_cost: np.ndarray
    p0: np.ndarray

    def cost(self, name: str) -> np.ndarray:
        i = self.names.index(name)
        return self.run_cost[:, i] + self.x_final[:, i] ** 2

    def J(self, name: str) -> Estimate:
        return mean_estimate(name, self.cost(name))

    def p(self, g: int | None = None) -> np.ndarray:
        """p at grid point ``g`` (all grid points if None), shape ``(n, ...)``."""
        W = self.W if g is None else self.W[:, g]
        QV = self.QV if g is None else self.QV[:, g]
        p0 = self.p0 if g is None else self.p0
        return (p0[:, None] if g is None else p0) * np.exp(-W - 0.5 * QV)


def run_regulator(cfg: RegulatorConfig, table: ThetaTable, controls: dict[str, np.ndarray] | None = None,
                  spikes: Sequence[SpikeSpec] = (), which: str | None = None) -> RegulatorRun:
    controls = competitor_suite() if controls is None else controls
    names = list(controls) + [s.name for s in spikes]
    C = len(names)
    coef = np.zeros((C, 2, 4))
    spike_coef = np.zeros((C, 2, 4))
    lo = np.zeros(C, dtype=np.int64)
    hi = np.zeros(C, dtype=np.int64)
    on = np.zeros((C, 2), dtype=bool)
    for i, name in enumerate(controls):
        coef[i] = controls[name]
    for j, s in enumerate(spikes):
        i = len(controls) + j
        coef[i] = _coef(*_UBAR)
        spike_coef[i, s.channel] = s.coef
        on[i, s.channel] = True
        hi[i] = int(round(s.epsilon * cfg.steps))
    model = walk_model(cfg.level)
    out = _kernels.regulator_pass(
        model.nb4, model.root, model.qv, model.pool(cfg.start), cfg.seed, 0, cfg.paths, table.grid,
        table.theta, table.eta, cfg.a, cfg.dt, coef, spike_coef, lo, hi, on, which=which,
    )
    v, W, QV, mart, xbar, xf, cost = out
    p0 = 1.0 / table.theta[0, v[:, 0]]
    return RegulatorRun(names, table.grid, v, W, QV, mart, xbar, xf, cost, p0)


def estimate_theta0(cfg: RegulatorConfig, table: ThetaTable | None = None) -> Estimate:
    """Monte Carlo theta(0) = -E[Phi(1)/2 + (1/a) int_0^1 Phi dt]."""
    table = tabulate_theta_eta(cfg) if table is None else table
    run = run_regulator(cfg, table, controls={"zero": _coef((0,) * 4, (0,) * 4)})
    return mean_estimate("theta0", run.mart[:, -1])


def theta0_over_a(cfg: RegulatorConfig, a_values: Sequence[float]) -> list[Estimate]:
    """theta(0) for several ``a`` on one common path set."""
    table = tabulate_theta_eta(cfg)
    run = run_regulator(cfg, table, controls={"zero": _coef((0,) * 4, (0,) * 4)})
    phi1 = np.exp(-2.0 * run.W[:, -1] - run.QV[:, -1])
    intphi = -cfg.a * (run.mart[:, -1] + 0.5 * phi1)
    return [mean_estimate(f"theta0_a{a:g}", -(0.5 * phi1 + intphi / a)) for a in a_values]


def pooled_se(x: Estimate, y: Estimate) -> float:
    return math.hypot(x.stderr, y.stderr)


@dataclass(frozen=True)
class Comparison:
    name: str
    J: Estimate
    diff: float  # J(u) - J(u_bar)
    pooled_se: float

    @property
    def ok(self) -> bool:
        return self.diff >= -2.0 * self.pooled_se


def cost_tournament(run: RegulatorRun, reference: str = "u_bar") -> list[Comparison]:
    ref = run.J(reference)
    out = []
    for name in run.names:
        if name == reference:
            continue
        j = run.J(name)
        out.append(Comparison(name, j, j.value - ref.value, pooled_se(j, ref)))
    return sorted(out, key=lambda c: c.J.value)


# ---------------------------------------------------------------------------
# the full audit


@dataclass
class RegulatorReport:
    a: float
    level: int
    N: int
    theta0: Estimate
    J: dict
    checks: dict
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "a": self.a,
            "level": self.level,
            "N": self.N,
            "theta0": {"est": self.theta0.value, "se": self.theta0.stderr},
            "J": {k: {"est": v.value, "se": v.stderr} for k, v in self.J.items()},
            "checks": {k: ("pass" if v else "fail") for k, v in self.checks.items()},
            "details": self.details,
        }


def drift_check(run: RegulatorRun, z: float = 3.0):
    """Per grid interval: mean increment of Phi theta - (1/a) int Phi and its SE."""
    inc = np.diff(run.mart, axis=1)
    mean = inc.mean(axis=0)
    se = inc.std(axis=0, ddof=1) / math.sqrt(inc.shape[0])
    return mean, se, bool(np.all(np.abs(mean) <= z * se))


def exp_martingale_check(run: RegulatorRun, times=(0.25, 0.5, 1.0), tol: float = 0.03):
    t = run.grid * 5.0 ** -_level_of(run)
    out = {}
    for s in times:
        g = int(np.argmin(np.abs(t - s)))
        out[s] = float(np.exp(-run.W[:, g] - 0.5 * run.QV[:, g]).mean())
    return out, all(abs(v - 1.0) <= tol for v in out.values())


def _level_of(run: RegulatorRun) -> int:
    return int(round(math.log(run.grid[-1], 5)))


def terminal_consistency(run: RegulatorRun) -> Estimate:
    """Mean of x_bar(1) + p(1)/2."""
    i = run.names.index("u_bar")
    return mean_estimate("terminal_gap", run.x_final[:, i] + 0.5 * run.p(-1))


def adjoint_from_run(run: RegulatorRun, cfg: RegulatorConfig, basis: BasisSpec = BasisSpec(),
                     rows: slice = slice(None)):
    obs = GridObservation(cfg.level, run.grid, run.vertex[rows].T, run.W[rows].T, run.QV[rows].T,
                          run.xbar[rows].T)
    G, n = run.grid.size - 1, obs.x.shape[1]
    return solve_linear_adjoint(regulator_coefficients(cfg.a), obs, AdjointGenerator.zeros(G, n), basis)


@dataclass(frozen=True)
class AdjointAudit:
    """Batch-means audit of the regressed first and second adjoints.

    The regression coefficients are themselves random and shared by every
    path in a fit, so per-path standard errors understate the noise; each
    batch is fitted independently and the spread across batches gives the SE.
    """

    p_plus_q: Estimate
    p_mean_drift: Estimate  # E[p(0)] - E[p(T-)] averaged over batches
    second_exact: bool


def adjoint_audit(run: RegulatorRun, cfg: RegulatorConfig, batches: int = 10,
                  basis: BasisSpec = BasisSpec()) -> AdjointAudit:
    n = run.vertex.shape[0]
    edges = np.linspace(0, n, batches + 1).astype(int)
    pq, drift, exact = [], [], True
    for b in range(batches):
        adj = adjoint_from_run(run, cfg, basis, slice(edges[b], edges[b + 1]))
        exact &= bool(np.all(adj.P == -2.0) and np.all(adj.Q == 0.0))
        pq.append((adj.p[:-1] + adj.q).mean())
        drift.append(adj.p[0].mean() - adj.p[-2].mean())
    return AdjointAudit(mean_estimate("p_plus_q", np.array(pq)),
                        mean_estimate("p_mean_drift", np.array(drift)), exact)


def hamiltonian_check(cfg: RegulatorConfig, run: RegulatorRun, table: ThetaTable, n_paths: int = 16,
                      u_grid: np.ndarray | None = None, tol: float = 1e-12) -> bool:
    """argmax of H1 at p/a and of H2 at u_bar on a u-grid, with q = -p, P = -2."""
    c = regulator_coefficients(cfg.a)
    u_grid = np.linspace(-3, 3, 121) if u_grid is None else u_grid
    ok = True
    for g in range(run.grid.size - 1):
        v = run.vertex[:n_paths, g]
        p = run.p(g)[:n_paths]
        u_ac = p / cfg.a
        u_s = (table.eta[g, v] - table.theta[g, v]) * p
        t = run.grid[g] * cfg.dt
        for i in range(p.size):
            cand_ac = np.append(u_grid, u_ac[i])
            cand_s = np.append(u_grid, u_s[i])
            h1, _ = hamiltonians(c, p[i], -p[i], -2.0, t, 0.0, cand_ac, u_s[i])
            _, h2 = hamiltonians(c, p[i], -p[i], -2.0, t, 0.0, cand_s, u_s[i])
            ok &= bool(h1[-1] >= h1.max() - tol and h2[-1] >= h2.max() - tol)
    return ok


def regulator_suite(cfg: RegulatorConfig, spikes: bool = True) -> RegulatorReport:
    table = tabulate_theta_eta(cfg)
    spike_list = spike_suite(cfg.spike_epsilons) if spikes else []
    run = run_regulator(cfg, table, spikes=spike_list)
    theta0 = mean_estimate("theta0", run.mart[:, -1])
    checks, details = {}, {}

    checks["theta_terminal_exact"] = bool(np.all(table.theta[-1] == -0.5))
    checks["theta0_negative_99"] = theta0.value + Z99 * theta0.stderr < 0
    _, _, checks["martingale_drift_3se"] = drift_check(run)
    em, checks["exp_martingale_3pct"] = exp_martingale_check(run)
    details["exp_martingale"] = {f"{k:g}": v for k, v in em.items()}

    audit = adjoint_audit(run, cfg)
    checks["second_adjoint_exact"] = audit.second_exact
    pq = audit.p_plus_q
    checks["q_equals_minus_p_3se"] = abs(pq.value) <= 3 * pq.stderr
    details["p_plus_q"] = {"est": pq.value, "se": pq.stderr, "batches": pq.n}
    pd = audit.p_mean_drift
    checks["p_martingale_mean_3se"] = abs(pd.value) <= 3 * pd.stderr + 1e-12
    details["p_mean_drift"] = {"est": pd.value, "se": pd.stderr}

    tg = terminal_consistency(run)
    details["terminal_gap"] = {"est": tg.value, "se": tg.stderr}

    zero = run.cost("zero")
    checks["zero_control_exact"] = bool(np.all(zero == 1.0))

    comps = cost_tournament(run)
    plain = [c for c in comps if not c.name.startswith("spike_")]
    spiked = [c for c in comps if c.name.startswith("spike_")]
    checks["tournament_2se"] = all(c.ok for c in plain)
    if spike_list:
        checks["spike_dt_2se"] = all(c.ok for c in spiked if c.name.startswith("spike_dt"))
        checks["spike_bracket_2se"] = all(c.ok for c in spiked if c.name.startswith("spike_bracket"))
    checks["nonnegative_costs"] = bool(np.all(run.run_cost >= 0))
    checks["hamiltonian_argmax"] = hamiltonian_check(cfg, run, table)

    j_star = dp_optimum(cfg)
    jbar = run.J("u_bar")
    details["J_dp_optimum"] = j_star
    checks["above_dp_optimum_2se"] = jbar.value >= j_star - 2 * jbar.stderr

    J = {name: run.J(name) for name in run.names}
    return RegulatorReport(cfg.a, cfg.level, cfg.paths, theta0, J, checks, details)
