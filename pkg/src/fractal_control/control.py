"""Controlled SDEs driven by (dt, d<W>, dW), costs, spikes, variations and adjoints.

The state equation is stepped explicitly along the increments of a shared
:class:`~fractal_control.diffusion.PathBatch`::

    x[k+1] = x[k] + b1 dt + b2 dQV[k] + sigma dW[k]

with ``b1`` fed the dt-channel control and ``b2``, ``sigma`` the
bracket-channel control.  Coefficients are vectorised callables ``(t, x, u)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, TextIO, Union

import numpy as np

from .diffusion import (
    Estimate,
    PathBatch,
    StepState,
    fit_loglog_slope,
    iter_steps,
    mean_estimate,
)
from .gasket import build_pregasket

Coef = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
Rule = Callable[[StepState, np.ndarray], np.ndarray]

FD_STEP = 1e-5
COEFFICIENTS = ("b1", "b2", "sigma", "f1", "f2")


class IntegrationBlowupError(ArithmeticError):
    def __init__(self, step: int, what: str = "state"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class AdmissibilityError(ArithmeticError):
    pass


class BasisDegeneracyError(ArithmeticError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"rank-deficient regression at grid step {step}" + (f": {detail}" if detail else ""))
        self.step = step


def _zero(t, x, u):
    return np.zeros(np.broadcast(x, u).shape)


@dataclass(frozen=True)
class CoefficientSet:
    """b1, b2, sigma, f1, f2 as ``(t, x, u) -> array`` and ``h(x)``.

    ``derivatives`` may map a coefficient name (or ``"h"``) to a pair
    ``(d/dx, d2/dx2)`` of callables with the same signature; anything not
    listed is differentiated by central differences with step ``1e-5``.
    """

    b1: Coef = _zero
    b2: Coef = _zero
    sigma: Coef = _zero
    f1: Coef = _zero
    f2: Coef = _zero
    h: Callable[[np.ndarray], np.ndarray] = lambda x: np.zeros_like(x)
    M: float = 1.0
    derivatives: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        if not self.M > 0:
            raise ValueError("bound constant M must be positive")

    def _fn(self, name: str):
        return getattr(self, name)

    def dx(self, name: str, t, x, u=None):
        if name in self.derivatives:
            d = self.derivatives[name][0]
            return d(x) if name == "h" else d(t, x, u)
        f = self._fn(name)
        if name == "h":
            return (f(x + FD_STEP) - f(x - FD_STEP)) / (2 * FD_STEP)
        return (f(t, x + FD_STEP, u) - f(t, x - FD_STEP, u)) / (2 * FD_STEP)

    def dxx(self, name: str, t, x, u=None):
        if name in self.derivatives:
            d = self.derivatives[name][1]
            return d(x) if name == "h" else d(t, x, u)
        f = self._fn(name)
        if name == "h":
            return (f(x + FD_STEP) - 2 * f(x) + f(x - FD_STEP)) / FD_STEP ** 2
        return (f(t, x + FD_STEP, u) - 2 * f(t, x, u) + f(t, x - FD_STEP, u)) / FD_STEP ** 2


def regulator_coefficients(a: float) -> CoefficientSet:
    """dx = u dt + u d<W> + u dW, cost (a/2) int u^2 dt + x(1)^2."""
    if not a > 0:
        raise ValueError("control-cost weight a must be positive")

    def same(t, x, u):
        return np.broadcast_to(u, np.broadcast(x, u).shape).astype(float)

    def zero2(t, x, u):
        return np.zeros(np.broadcast(x, u).shape)

    return CoefficientSet(
        b1=same, b2=same, sigma=same,
        f1=lambda t, x, u: 0.5 * a * u * u + 0.0 * x,
        h=lambda x: x * x,
        M=1.0,
        derivatives={
            "b1": (zero2, zero2), "b2": (zero2, zero2), "sigma": (zero2, zero2),
            "f1": (zero2, zero2), "f2": (zero2, zero2),
            "h": (lambda x: 2 * x, lambda x: np.full_like(x, 2.0)),
        },
    )


def smooth_test_coefficients(M: float = 0.25) -> CoefficientSet:
    """A bounded, smooth, genuinely nonlinear problem for variation-order runs.

    b1 = M(u - sin x), b2 = M u cos(x)/2, sigma = M(u(1 + sin(x)/2) + cos(x)/2),
    with analytic x-derivatives.  Costs are zero.
    """

    def b1(t, x, u):
        return M * (u - np.sin(x))

    def b2(t, x, u):
        return 0.5 * M * u * np.cos(x)

    def sigma(t, x, u):
        return M * (u * (1 + 0.5 * np.sin(x)) + 0.5 * np.cos(x))

    der = {
        "b1": (lambda t, x, u: -M * np.cos(x) + 0 * u, lambda t, x, u: M * np.sin(x) + 0 * u),
        "b2": (lambda t, x, u: -0.5 * M * u * np.sin(x), lambda t, x, u: -0.5 * M * u * np.cos(x)),
        "sigma": (
            lambda t, x, u: 0.5 * M * (u * np.cos(x) - np.sin(x)),
            lambda t, x, u: -0.5 * M * (u * np.sin(x) + np.cos(x)),
        ),
    }
    return CoefficientSet(b1=b1, b2=b2, sigma=sigma, M=M, derivatives=der)


@dataclass(frozen=True)
class ControlPolicy:
    """Two-channel feedback rule; ``u_sing`` defaults to ``u_ac``.

    Rules receive the current :class:`StepState` and state ``x`` and return
    one value per path.  ``uses_history`` flags rules that look beyond the
    current step.
    """

    u_ac: Rule
    u_sing: Rule | None = None
    name: str = "policy"
    uses_history: bool = False

    def sing(self, state, x):
        return (self.u_ac if self.u_sing is None else self.u_sing)(state, x)

    def ac(self, state, x):
        return self.u_ac(state, x)

    @classmethod
    def constant(cls, value: float, name: str | None = None) -> "ControlPolicy":
        def rule(state, x):
            return np.full(np.shape(x), float(value))

        return cls(rule, None, name or f"const({value:g})")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Controlled state along a path batch.

    ``x`` is the full ``(steps+1, n)`` history when kept; ``x_grid`` holds the
    state at ``grid`` steps.  Accumulators are per path.
    """

    x_final: np.ndarray
    run_dt: np.ndarray
    run_bracket: np.ndarray
    terminal: np.ndarray
    grid: np.ndarray
    x_grid: np.ndarray
    x: np.ndarray | None = None
    generator: "AdjointGenerator | None" = None

    @property
    def cost(self) -> np.ndarray:
        return self.terminal + self.run_dt + self.run_bracket


@dataclass(frozen=True, eq=False)
class AdjointGenerator:
    """Per-interval integrals of the adjoint drivers along (x_bar, u_bar).

    Row ``j`` covers steps ``grid[j] .. grid[j+1]-1``; see
    :func:`solve_linear_adjoint` for how they enter.
    """

    A: np.ndarray
    S: np.ndarray
    F: np.ndarray
    A2: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    F2: np.ndarray

    @classmethod
    def zeros(cls, n_intervals: int, n: int) -> "AdjointGenerator":
        return cls(*(np.zeros((n_intervals, n)) for _ in range(7)))


def _check_grid(grid, steps: int) -> np.ndarray:
    grid = np.asarray(grid if grid is not None else [0, steps], dtype=np.int64)
    if grid[0] != 0 or grid[-1] != steps or np.any(np.diff(grid) <= 0):
        raise ValueError(f"grid must run strictly from 0 to {steps}")
    return grid


def coarse_grid(steps: int, points: int = 33) -> np.ndarray:
    """``points`` nearly equally spaced step indices from 0 to ``steps``."""
    return np.unique(np.round(np.linspace(0, steps, points)).astype(np.int64))


def integrate_sde(c: CoefficientSet, u: ControlPolicy, paths: PathBatch, x0: float | np.ndarray,
                  grid=None, keep_path: bool = True, adjoint: bool = False) -> Trajectory:
    """Explicit forward integration with coefficients frozen at the left point."""
    grid = _check_grid(grid, paths.steps)
    n = paths.n
    x = np.broadcast_to(np.asarray(x0, dtype=float), (n,)).copy()
    run1 = np.zeros(n)
    run2 = np.zeros(n)
    dt = paths.dt
    hist = np.empty((paths.steps + 1, n)) if keep_path else None
    x_grid = np.empty((grid.size, n))
    gen = AdjointGenerator.zeros(grid.size - 1, n) if adjoint else None
    g = 0
    for state, dw, dq in iter_steps(paths):
        k, t = state.k, state.t
        if hist is not None:
            hist[k] = x
        if k == grid[g]:
            x_grid[g] = x
            g += 1
        ua = u.ac(state, x)
        us = u.sing(state, x)
        if gen is not None:
            _accumulate_generator(c, gen, g - 1, t, x, ua, us, dt, dq)
        run1 += c.f1(t, x, ua) * dt
        run2 += c.f2(t, x, us) * dq
        x = x + c.b1(t, x, ua) * dt + c.b2(t, x, us) * dq + c.sigma(t, x, us) * dw
        if not np.all(np.isfinite(x)):
            raise IntegrationBlowupError(k + 1)
    if hist is not None:
        hist[-1] = x
    x_grid[-1] = x
    return Trajectory(
        x_final=x, run_dt=run1, run_bracket=run2, terminal=np.asarray(c.h(x), dtype=float),
        grid=grid, x_grid=x_grid, x=hist, generator=gen,
    )


def _accumulate_generator(c, gen, j, t, x, ua, us, dt, dq):
    db1, db2, ds = c.dx("b1", t, x, ua), c.dx("b2", t, x, us), c.dx("sigma", t, x, us)
    gen.A[j] += db1 * dt + db2 * dq
    gen.S[j] += ds * dq
    gen.F[j] += c.dx("f1", t, x, ua) * dt + c.dx("f2", t, x, us) * dq
    gen.A2[j] += 2 * db1 * dt + (2 * db2 + ds * ds) * dq
    gen.C1[j] += c.dxx("b1", t, x, ua) * dt + c.dxx("b2", t, x, us) * dq
    gen.C2[j] += c.dxx("sigma", t, x, us) * dq
    gen.F2[j] += c.dxx("f1", t, x, ua) * dt + c.dxx("f2", t, x, us) * dq


def evaluate_cost(c: CoefficientSet, u: ControlPolicy, paths: PathBatch, x0, name: str = "J") -> Estimate:
    """Monte Carlo cost with standard error; rejects non-finite accumulators."""
    traj = integrate_sde(c, u, paths, x0, keep_path=False)
    return cost_estimate(traj, name)


def cost_estimate(traj: Trajectory, name: str = "J") -> Estimate:
    parts = (traj.terminal, traj.run_dt, traj.run_bracket)
    bad = ~np.logical_and.reduce([np.isfinite(p) for p in parts])
    if bad.any():
        raise AdmissibilityError(f"non-finite cost accumulator on {int(bad.sum())} path(s)")
    return mean_estimate(name, traj.cost)


# ---------------------------------------------------------------------------
# spikes and variations

Classifier = Callable[[StepState], np.ndarray]


def _in_steps(k: int, windows) -> bool:
    return any(lo <= k < hi for lo, hi in windows)


def spike_perturb(ubar: ControlPolicy, u1: ControlPolicy, u2: ControlPolicy, intervals,
                  classifier: Classifier | int, dt: float):
    """Spike control u_eps and its perturbation set E.

    Inside the time set ``intervals`` (a list of ``(lo, hi)``), paths the
    classifier marks 1 use ``u1`` and those marked 2 use ``u2``; elsewhere
    ``ubar``.  E is returned as a predicate ``(state, x) -> mask`` that is
    true where the spike differs from ``ubar`` on either channel.
    """
    windows = [(int(round(lo / dt)), int(round(hi / dt))) for lo, hi in intervals]
    for lo, hi in intervals:
        if hi < lo or lo < 0:
            raise ValueError(f"bad interval ({lo}, {hi})")

    def which(state):
        return np.broadcast_to(np.asarray(classifier(state) if callable(classifier) else classifier),
                               state.vertex.shape)

    def pick(channel):
        def rule(state, x):
            base = getattr(ubar, channel)(state, x)
            if not _in_steps(state.k, windows):
                return base
            s = which(state)
            return np.where(s == 1, getattr(u1, channel)(state, x), getattr(u2, channel)(state, x))

        return rule

    policy = ControlPolicy(pick("ac"), pick("sing"), name=f"spike[{ubar.name}]",
                           uses_history=ubar.uses_history or u1.uses_history or u2.uses_history)

    def E(state, x):
        if not _in_steps(state.k, windows):
            return np.zeros(state.vertex.shape, dtype=bool)
        s = which(state)
        d1 = (ubar.ac(state, x) != u1.ac(state, x)) | (ubar.sing(state, x) != u1.sing(state, x))
        d2 = (ubar.ac(state, x) != u2.ac(state, x)) | (ubar.sing(state, x) != u2.sing(state, x))
        return np.where(s == 1, d1, d2)

    return policy, E


def default_kappa(k: float, M: float) -> float:
    return 8.0 * k * k * (M + 1.0) ** 2


VARIATION_NAMES = ("xi", "y", "z", "xi_minus_y", "xi_minus_y_minus_z")


@dataclass(frozen=True, eq=False)
class VariationResult:
    """Variation processes for one spike on a common path batch.

    ``T[name]`` holds per-path samples of the T_{2k} integrand (rows follow
    ``k``); ``m1`` is the per-path bracket mass of E.  ``series`` holds the
    full histories when requested.
    """

    k: np.ndarray
    kappa: float
    T: dict
    m1: np.ndarray
    xi_final: np.ndarray
    y_final: np.ndarray
    z_final: np.ndarray
    series: dict | None = None

    def T_estimate(self, name: str, k_index: int = 0) -> Estimate:
        return mean_estimate(f"T{2 * self.k[k_index]:g}_{name}", self.T[name][k_index])


def integrate_variations(c: CoefficientSet, ubar: ControlPolicy, spikes, paths: PathBatch, x0,
                         E=None, k=(1.0,), kappa: float | None = None, keep_series: bool = False):
    """Integrate x_bar, x_eps, y_eps and z_eps with common noise.

    ``spikes`` is one policy or a sequence (x_bar is shared); ``E`` the
    matching perturbation predicates (optional, for the m1 column).
    Returns one :class:`VariationResult` per spike (a single one if a single
    policy was given).
    """
    single = isinstance(spikes, ControlPolicy)
    spikes = [spikes] if single else list(spikes)
    Es = [E] if single else (list(E) if E is not None else [None] * len(spikes))
    ks = np.atleast_1d(np.asarray(k, dtype=float))
    kap = default_kappa(float(ks.max()), c.M) if kappa is None else float(kappa)
    n, dt, ns = paths.n, paths.dt, len(spikes)
    xb = np.broadcast_to(np.asarray(x0, dtype=float), (n,)).copy()
    xe = np.tile(xb, (ns, 1))
    y = np.zeros((ns, n))
    z = np.zeros((ns, n))
    m1 = np.zeros((ns, n))
    sup = {name: np.zeros((ns, ks.size, n)) for name in VARIATION_NAMES}
    integ = {name: np.zeros((ns, ks.size, n)) for name in VARIATION_NAMES}
    series = {name: np.zeros((ns, paths.steps + 1, n)) for name in ("xbar", "xi", "y", "z")} if keep_series else None

    def update_sup(qv, dq=None):
        disc = np.exp(-kap * qv)
        xi = xe - xb
        vals = {"xi": xi, "y": y, "z": z, "xi_minus_y": xi - y, "xi_minus_y_minus_z": xi - y - z}
        for name, phi in vals.items():
            for i, kk in enumerate(ks):
                term = np.abs(phi) ** (2 * kk) * disc
                np.maximum(sup[name][:, i], term, out=sup[name][:, i])
                if dq is not None:
                    integ[name][:, i] += term * dq

    for state, dw, dq in iter_steps(paths):
        t = state.t
        if series is not None:
            series["xbar"][:, state.k] = xb
            series["xi"][:, state.k] = xe - xb
            series["y"][:, state.k] = y
            series["z"][:, state.k] = z
        update_sup(state.QV, dq)
        ua, us = ubar.ac(state, xb), ubar.sing(state, xb)
        db1, db2, ds = c.dx("b1", t, xb, ua), c.dx("b2", t, xb, us), c.dx("sigma", t, xb, us)
        d2b1, d2b2, d2s = c.dxx("b1", t, xb, ua), c.dxx("b2", t, xb, us), c.dxx("sigma", t, xb, us)
        b1, b2, s = c.b1(t, xb, ua), c.b2(t, xb, us), c.sigma(t, xb, us)
        for j, pol in enumerate(spikes):
            ea, es = pol.ac(state, xb), pol.sing(state, xb)
            d_b1 = c.b1(t, xb, ea) - b1
            d_b2 = c.b2(t, xb, es) - b2
            d_s = c.sigma(t, xb, es) - s
            d_ds = c.dx("sigma", t, xb, es) - ds
            y2 = y[j] * y[j]
            z[j] = z[j] + (db1 * z[j] + d_b1 + 0.5 * d2b1 * y2) * dt \
                + (db2 * z[j] + d_b2 + 0.5 * d2b2 * y2) * dq \
                + (ds * z[j] + d_ds * y[j] + 0.5 * d2s * y2) * dw
            y[j] = y[j] + db1 * y[j] * dt + db2 * y[j] * dq + (d_s + ds * y[j]) * dw
            xa, xs = pol.ac(state, xe[j]), pol.sing(state, xe[j])
            xe[j] = xe[j] + c.b1(t, xe[j], xa) * dt + c.b2(t, xe[j], xs) * dq + c.sigma(t, xe[j], xs) * dw
            if Es[j] is not None:
                m1[j] += np.where(Es[j](state, xb), dq, 0.0)
        xb = xb + b1 * dt + b2 * dq + s * dw
        if not (np.all(np.isfinite(xb)) and np.all(np.isfinite(xe))):
            raise IntegrationBlowupError(state.k + 1)
    qv_T = np.sum(paths.dqv(), axis=0)
    update_sup(qv_T)
    if series is not None:
        series["xbar"][:, -1] = xb
        series["xi"][:, -1] = xe - xb
        series["y"][:, -1] = y
        series["z"][:, -1] = z
    out = []
    for j in range(ns):
        T = {name: sup[name][j] + integ[name][j] for name in VARIATION_NAMES}
        ser = {key: val[j] for key, val in series.items()} if series is not None else None
        out.append(VariationResult(ks, kap, T, m1[j], xe[j] - xb, y[j].copy(), z[j].copy(), ser))
    return out[0] if single else out


@dataclass(frozen=True)
class VariationReport:
    epsilon: np.ndarray
    k: float
    kappa: float
    T: dict  # name -> (values, stderr) arrays over epsilon
    m1: tuple
    correlation: np.ndarray  # corr(xi(T), y(T)) per epsilon

    def slope(self, name: str, against: str = "epsilon") -> float:
        x = self.epsilon if against == "epsilon" else self.m1[0]
        return fit_loglog_slope(x, self.T[name][0])

    def write_csv(self, out: TextIO) -> None:
        cols = ("xi", "xi_minus_y", "xi_minus_y_minus_z")
        out.write("epsilon," + ",".join(f"T2_{c}" for c in cols) + ",m1,"
                  + ",".join(f"stderr_{c}" for c in cols) + ",stderr_m1\n")
        for i, e in enumerate(self.epsilon):
            vals = [self.T[c][0][i] for c in cols] + [self.m1[0][i]]
            ses = [self.T[c][1][i] for c in cols] + [self.m1[1][i]]
            out.write(f"{float(e)!r}," + ",".join(repr(float(v)) for v in vals + ses) + "\n")


def variation_orders(c: CoefficientSet, ubar: ControlPolicy, u1: ControlPolicy, u2: ControlPolicy,
                     classifier, epsilons: Sequence[float], paths: PathBatch, x0,
                     k: float = 1.0, kappa: float | None = None) -> VariationReport:
    """T_{2k} of xi, xi - y and xi - y - z on spikes over I_eps = [0, eps)."""
    pairs = [spike_perturb(ubar, u1, u2, [(0.0, e)], classifier, paths.dt) for e in epsilons]
    res = integrate_variations(c, ubar, [p for p, _ in pairs], paths, x0, E=[e for _, e in pairs],
                               k=(k,), kappa=kappa)
    T = {}
    for name in VARIATION_NAMES:
        ests = [r.T_estimate(name) for r in res]
        T[name] = (np.array([e.value for e in ests]), np.array([e.stderr for e in ests]))
    m1s = [mean_estimate("m1", r.m1) for r in res]
    corr = np.array([np.corrcoef(r.xi_final, r.y_final)[0, 1] for r in res])
    return VariationReport(np.asarray(epsilons, float), k, res[0].kappa, T,
                           (np.array([e.value for e in m1s]), np.array([e.stderr for e in m1s])), corr)


# ---------------------------------------------------------------------------
# Hamiltonians


def hamiltonians(c: CoefficientSet, p, q, P, t: float, x, u, ubar):
    """(H1, H2) at control value ``u`` given the optimal ``ubar`` and adjoints."""
    h1 = c.b1(t, x, u) * p - c.f1(t, x, u)
    ds = c.sigma(t, x, u) - c.sigma(t, x, ubar)
    h2 = c.b2(t, x, u) * p + c.sigma(t, x, u) * q - c.f2(t, x, u) + 0.5 * ds * ds * P
    return h1, h2


def hamiltonian_scan(c: CoefficientSet, p: float, q: float, P: float, t: float, x: float, ubar: float,
                     u_grid: Sequence[float]) -> np.ndarray:
    """Rows ``(t, u, H1, H2)`` over ``u_grid``."""
    u = np.asarray(u_grid, dtype=float)
    h1, h2 = hamiltonians(c, p, q, P, t, np.full_like(u, x), u, np.full_like(u, ubar))
    return np.column_stack([np.full_like(u, t), u, h1, h2])


def write_hamiltonian_scan(rows: np.ndarray, out: TextIO) -> None:
    out.write("t,u,H1,H2\n")
    for r in rows:
        out.write(",".join(repr(float(v)) for v in r) + "\n")


# ---------------------------------------------------------------------------
# least-squares adjoint


@dataclass(frozen=True)
class BasisSpec:
    """Cell indicators at ``cell_level`` tensored with polynomials of total
    degree <= ``degree`` in (W, <W>)."""

    cell_level: int = 3
    degree: int = 2

    def powers(self) -> list[tuple[int, int]]:
        return [(i, d - i) for d in range(self.degree + 1) for i in range(d, -1, -1)]

    def vertex_cells(self, m: int) -> np.ndarray:
        lvl = min(self.cell_level, m)
        g = build_pregasket(m)
        return (g.vertex_cells[:, 0] // 3 ** (m - lvl)).astype(np.int64)

    def n_cells(self, m: int) -> int:
        return 3 ** min(self.cell_level, m)


def conditional_expectation(cells: np.ndarray, n_cells: int, W: np.ndarray, QV: np.ndarray,
                            targets: np.ndarray, basis: BasisSpec, step: int = 0) -> np.ndarray:
    """Least-squares projection of each target column on the basis.

    ``targets`` is ``(n, r)``; the fitted ``(n, r)`` values are returned.
    Targets that are constant across paths are returned unchanged.
    """
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        return conditional_expectation(cells, n_cells, W, QV, targets[:, None], basis, step)[:, 0]
    out = np.empty_like(targets)
    const = np.ptp(targets, axis=0) == 0
    out[:, const] = targets[0, const]
    live = np.flatnonzero(~const)
    if live.size == 0:
        return out
    order = np.argsort(cells, kind="stable")
    bounds = np.searchsorted(cells[order], np.arange(n_cells + 1))
    pw = basis.powers()
    for cidx in range(n_cells):
        idx = order[bounds[cidx]:bounds[cidx + 1]]
        if idx.size == 0:
            continue
        w, q = W[idx], QV[idx]
        cols = [np.ones(idx.size)]
        for i, j in pw[1:]:
            col = w ** i * q ** j
            sd = col.std()
            if sd > 0:
                cols.append((col - col.mean()) / sd)
        X = np.column_stack(cols)
        if idx.size < X.shape[1]:
            raise BasisDegeneracyError(step, f"cell {cidx} has {idx.size} paths for {X.shape[1]} columns")
        sv = np.linalg.svd(X, compute_uv=False)
        if sv[-1] <= 1e-10 * sv[0]:
            raise BasisDegeneracyError(step, f"cell {cidx}, condition {sv[0] / max(sv[-1], 1e-300):.3g}")
        coef, *_ = np.linalg.lstsq(X, targets[idx][:, live], rcond=None)
        out[np.ix_(idx, live)] = X @ coef
    return out


@dataclass(frozen=True, eq=False)
class AdjointPath:
    """p, P on the grid and q, Q per grid interval for one path."""

    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    P: np.ndarray
    Q: np.ndarray


@dataclass(frozen=True, eq=False)
class AdjointSolution:
    """Adjoints for all paths: ``p``, ``P`` are ``(G+1, n)``, ``q``, ``Q`` ``(G, n)``."""

    grid: np.ndarray
    dt: float
    p: np.ndarray
    q: np.ndarray
    P: np.ndarray
    Q: np.ndarray

    def path(self, i: int) -> AdjointPath:
        return AdjointPath(self.grid * self.dt, self.p[:, i], self.q[:, i], self.P[:, i], self.Q[:, i])


@dataclass(frozen=True, eq=False)
class GridObservation:
    """State of the forward pass at the grid steps: arrays ``(G+1, n)``."""

    level: int
    grid: np.ndarray
    vertex: np.ndarray
    W: np.ndarray
    QV: np.ndarray
    x: np.ndarray

    @classmethod
    def from_paths(cls, paths: PathBatch, traj: Trajectory) -> "GridObservation":
        W, QV = paths.cumulative()
        g = traj.grid
        return cls(paths.level, g, paths.vertex[g], W[g], QV[g], traj.x_grid)


def solve_linear_adjoint(c: CoefficientSet, obs: GridObservation, generator: AdjointGenerator | None = None,
                         basis: BasisSpec = BasisSpec(), scheme: str = "multistep") -> AdjointSolution:
    """Backward least-squares Monte Carlo for the first and second adjoints.

    On interval j (grid steps g_j .. g_{j+1})::

        q_j = E_j[p_{j+1} dW_j] / E_j[dW_j^2]
        p_j = E_j[p_{j+1} (1 + A_j) + q_j S_j - F_j]

    and likewise for (P, Q) with the second-order drivers; the
    ``generator`` rows hold interval integrals of the coefficient
    derivatives along (x_bar, u_bar).  With ``scheme="multistep"`` the
    continuation ``p_{j+1}`` inside the expectations is the realised value
    carried back from the terminal condition, so projection errors do not
    compound; ``"one-step"`` uses the fitted values instead.
    """
    if scheme not in ("multistep", "one-step"):
        raise ValueError(f"unknown scheme {scheme!r}")
    G = obs.grid.size - 1
    n = obs.x.shape[1]
    gen = AdjointGenerator.zeros(G, n) if generator is None else generator
    cells_of = basis.vertex_cells(obs.level)
    n_cells = basis.n_cells(obs.level)
    t_T = obs.grid[-1] * 5.0 ** -obs.level
    xT = obs.x[-1]
    p = np.empty((G + 1, n))
    P = np.empty((G + 1, n))
    q = np.empty((G, n))
    Q = np.empty((G, n))
    p[G] = -np.asarray(c.dx("h", t_T, xT), dtype=float)
    P[G] = -np.asarray(c.dxx("h", t_T, xT), dtype=float)
    cont_p, cont_P = p[G].copy(), P[G].copy()
    for j in range(G - 1, -1, -1):
        cells = cells_of[obs.vertex[j]]
        W, QV = obs.W[j], obs.QV[j]
        dW = obs.W[j + 1] - W

        def fit(cols):
            return conditional_expectation(cells, n_cells, W, QV, np.column_stack(cols), basis, step=j)

        # a constant continuation value has no martingale part
        flat_p, flat_P = np.ptp(cont_p) == 0, np.ptp(cont_P) == 0
        if flat_p and flat_P:
            num_p = num_P = np.zeros(n)
            den = np.ones(n)
        else:
            num_p, num_P, den = fit([cont_p * dW, cont_P * dW, dW * dW]).T
        safe = np.where(den > 0, den, 1.0)
        q[j] = 0.0 if flat_p else np.where(den > 0, num_p / safe, 0.0)
        Q[j] = 0.0 if flat_P else np.where(den > 0, num_P / safe, 0.0)
        tgt_p = cont_p * (1 + gen.A[j]) + q[j] * gen.S[j] - gen.F[j]
        tgt_P = cont_P * (1 + gen.A2[j]) + Q[j] * gen.S[j] + cont_p * gen.C1[j] + q[j] * gen.C2[j] - gen.F2[j]
        p[j], P[j] = fit([tgt_p, tgt_P]).T
        if scheme == "multistep":
            cont_p, cont_P = tgt_p, tgt_P
        else:
            cont_p, cont_P = p[j], P[j]
    return AdjointSolution(obs.grid, 5.0 ** -obs.level, p, q, P, Q)
