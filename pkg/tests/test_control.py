from io import StringIO

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fractal_control.control import (
    AdmissibilityError,
    BasisDegeneracyError,
    BasisSpec,
    CoefficientSet,
    ControlPolicy,
    GridObservation,
    IntegrationBlowupError,
    coarse_grid,
    conditional_expectation,
    cost_estimate,
    default_kappa,
    evaluate_cost,
    hamiltonian_scan,
    hamiltonians,
    integrate_sde,
    integrate_variations,
    regulator_coefficients,
    smooth_test_coefficients,
    solve_linear_adjoint,
    spike_perturb,
    variation_orders,
    write_hamiltonian_scan,
)
from fractal_control.diffusion import StepState, WalkConfig, sample_paths


@pytest.fixture(scope="module")
def paths():
    return sample_paths(WalkConfig(level=4, horizon=1.0, seed=12, paths=4000))


def test_zero_control_is_neutral(paths):
    c = regulator_coefficients(1.0)
    traj = integrate_sde(c, ControlPolicy.constant(0.0), paths, 1.0)
    assert np.all(traj.x == 1.0)
    J = cost_estimate(traj)
    assert J.value == 1.0 and J.stderr == 0.0


def test_drift_plus_noise_variance(paths):
    one = lambda t, x, u: np.ones_like(x)
    c = CoefficientSet(b1=one, sigma=one)
    traj = integrate_sde(c, ControlPolicy.constant(0.0), paths, 0.5, keep_path=False)
    W, QV = paths.cumulative()
    assert np.allclose(traj.x_final, 1.5 + W[-1])
    # Var W_1 = E<W>_1 = 2
    assert traj.x_final.var() == pytest.approx(2.0, rel=0.08)
    assert abs(traj.x_final.mean() - 1.5) < 4 * traj.x_final.std() / np.sqrt(paths.n)


@given(st.floats(-2, 2), st.floats(-2, 2))
def test_regulator_state_linear_in_constant_control(u, v):
    pb = sample_paths(WalkConfig(level=2, horizon=1.0, seed=1, paths=20))
    c = regulator_coefficients(2.0)
    xu = integrate_sde(c, ControlPolicy.constant(u), pb, 1.0).x_final
    xv = integrate_sde(c, ControlPolicy.constant(v), pb, 1.0).x_final
    xuv = integrate_sde(c, ControlPolicy.constant(u + v), pb, 1.0).x_final
    assert np.allclose(xuv - 1, (xu - 1) + (xv - 1), atol=1e-12)


def test_grid_recording(paths):
    c = regulator_coefficients(1.0)
    grid = coarse_grid(paths.steps, 9)
    traj = integrate_sde(c, ControlPolicy.constant(0.3), paths, 1.0, grid=grid)
    assert np.array_equal(traj.x_grid, traj.x[grid])
    with pytest.raises(ValueError):
        integrate_sde(c, ControlPolicy.constant(0.3), paths, 1.0, grid=[1, paths.steps])


def test_blowup_and_admissibility(paths):
    boom = CoefficientSet(b1=lambda t, x, u: 1e300 * (1 + x * x))
    with pytest.raises(IntegrationBlowupError), np.errstate(over="ignore"):
        integrate_sde(boom, ControlPolicy.constant(0.0), paths, 1.0)
    bad = CoefficientSet(h=lambda x: np.where(x > 0, np.inf, 0.0))
    with pytest.raises(AdmissibilityError):
        evaluate_cost(bad, ControlPolicy.constant(0.0), paths, 1.0)


def _state(k, n=5):
    return StepState(k, k * 0.01, np.arange(n), np.zeros(n), np.zeros(n))


def test_spike_contained_in_window():
    ubar, u1, u2 = ControlPolicy.constant(0.0), ControlPolicy.constant(1.0), ControlPolicy.constant(-1.0)
    cls = lambda s: np.where(s.vertex % 2 == 0, 1, 2)
    pol, E = spike_perturb(ubar, u1, u2, [(0.1, 0.2)], cls, 0.01)
    x = np.zeros(5)
    for k in (0, 9, 20, 50):
        assert np.all(pol.ac(_state(k), x) == 0) and not E(_state(k), x).any()
    inside = _state(15)
    assert np.array_equal(pol.ac(inside, x), [1, -1, 1, -1, 1])
    assert E(inside, x).all()
    same, E0 = spike_perturb(ubar, ubar, ubar, [(0.1, 0.2)], 1, 0.01)
    assert not E0(inside, x).any()
    with pytest.raises(ValueError):
        spike_perturb(ubar, u1, u2, [(0.2, 0.1)], 1, 0.01)


def test_variations_vanish_without_perturbation(paths):
    c = smooth_test_coefficients()
    ubar = ControlPolicy.constant(0.0)
    res = integrate_variations(c, ubar, ubar, paths, 0.5)
    for name in ("xi", "y", "z"):
        assert np.all(res.T[name] == 0)
    assert np.all(res.y_final == 0) and np.all(res.z_final == 0)


def test_variations_small_spike_orders(paths):
    c = smooth_test_coefficients()
    zero, one = ControlPolicy.constant(0.0), ControlPolicy.constant(1.0)
    rep = variation_orders(c, zero, one, one, 1, [2.0 ** -j for j in range(3, 7)], paths, 0.5)
    T = rep.T
    assert np.all(T["xi_minus_y"][0] < T["xi"][0])
    assert np.all(T["xi_minus_y_minus_z"][0] < T["xi_minus_y"][0])
    assert np.all(np.diff(rep.m1[0]) < 0)
    assert np.all(rep.correlation > 0.9)
    assert rep.kappa == default_kappa(1.0, 0.25)
    buf = StringIO()
    rep.write_csv(buf)
    assert buf.getvalue().startswith("epsilon,T2_xi,T2_xi_minus_y,T2_xi_minus_y_minus_z,m1,")


def test_finite_difference_derivatives_match_analytic():
    c = smooth_test_coefficients(0.7)
    fd = CoefficientSet(b1=c.b1, b2=c.b2, sigma=c.sigma, M=c.M)
    x = np.linspace(-2, 2, 11)
    u = np.linspace(-1, 1, 11)
    for name in ("b1", "b2", "sigma"):
        assert np.allclose(fd.dx(name, 0.3, x, u), c.dx(name, 0.3, x, u), atol=1e-8)
        assert np.allclose(fd.dxx(name, 0.3, x, u), c.dxx(name, 0.3, x, u), atol=1e-4)
    r = regulator_coefficients(1.0)
    assert np.allclose(CoefficientSet(h=r.h).dx("h", 0, x), 2 * x, atol=1e-8)


@pytest.mark.parametrize("a", [0.5, 1.0, 3.0])
def test_regulator_hamiltonian_argmax(a):
    c = regulator_coefficients(a)
    p, ubar = 0.7, -0.4
    grid = np.linspace(-3, 3, 6001)
    rows = hamiltonian_scan(c, p, -p, -2.0, 0.5, 0.0, ubar, grid)
    assert grid[np.argmax(rows[:, 2])] == pytest.approx(p / a, abs=1e-3)
    assert grid[np.argmax(rows[:, 3])] == pytest.approx(ubar, abs=1e-3)
    h1, h2 = hamiltonians(c, p, -p, -2.0, 0.5, 0.0, np.array([p / a, ubar]), ubar)
    assert h1[0] >= rows[:, 2].max() and h2[1] >= rows[:, 3].max()
    buf = StringIO()
    write_hamiltonian_scan(rows[:2], buf)
    assert buf.getvalue().splitlines()[0] == "t,u,H1,H2"


def test_regulator_coefficients_reject_bad_weight():
    with pytest.raises(ValueError):
        regulator_coefficients(0.0)


def _obs(paths, c, u):
    grid = coarse_grid(paths.steps, 9)
    traj = integrate_sde(c, u, paths, 0.5, grid=grid, adjoint=True)
    return GridObservation.from_paths(paths, traj), traj


def test_adjoint_terminal_condition_and_second_order(paths):
    c = regulator_coefficients(1.0)
    obs, traj = _obs(paths, c, ControlPolicy.constant(0.2))
    adj = solve_linear_adjoint(c, obs, traj.generator, BasisSpec(cell_level=1))
    assert np.allclose(adj.p[-1], -2 * traj.x_final)
    assert np.all(adj.P == -2.0) and np.all(adj.Q == 0.0)
    assert adj.path(0).p.shape == (obs.grid.size,)


def test_adjoint_of_pure_noise_state():
    # x = x0 + W: p_t = -2 (x0 + W_t), q = -2; SE from independent batch fits
    one = lambda t, x, u: np.ones_like(x)
    c = CoefficientSet(sigma=one, h=lambda x: x * x)
    cfg = WalkConfig(level=4, horizon=1.0, seed=21, paths=2000)
    q_means, p0_means = [], []
    for b in range(8):
        pb = sample_paths(cfg, path0=b * cfg.paths)
        obs, traj = _obs(pb, c, ControlPolicy.constant(0.0))
        adj = solve_linear_adjoint(c, obs, traj.generator, BasisSpec(cell_level=1))
        q_means.append(adj.q.mean())
        p0_means.append(adj.p[0].mean())
    for vals, target in ((q_means, -2.0), (p0_means, -1.0)):
        se = np.std(vals, ddof=1) / np.sqrt(len(vals))
        assert abs(np.mean(vals) - target) < 4 * se + 1e-3
    with pytest.raises(ValueError):
        solve_linear_adjoint(c, obs, traj.generator, scheme="backward")


def test_conditional_expectation_exact_on_span():
    rng = np.random.default_rng(0)
    n = 500
    cells = rng.integers(0, 3, n)
    W, QV = rng.normal(size=n), rng.uniform(size=n)
    target = 1 + 2 * W - QV * W + 3 * cells
    fit = conditional_expectation(cells, 3, W, QV, target, BasisSpec())
    assert np.allclose(fit, target)
    const = conditional_expectation(cells, 3, W, QV, np.full(n, 4.0), BasisSpec())
    assert np.all(const == 4.0)
    with pytest.raises(BasisDegeneracyError):
        conditional_expectation(np.zeros(3, int), 1, W[:3], QV[:3], W[:3], BasisSpec())
