import json

import numpy as np
import pytest

from fractal_control.diffusion import (
    WalkConfig,
    fit_loglog_slope,
    sample_path,
    sample_paths,
    transition_matrix,
    walk_model,
)
from fractal_control.regulator import (
    CoverageError,
    RegulatorConfig,
    competitor_suite,
    cost_tournament,
    dp_optimum,
    drift_check,
    estimate_theta0,
    exp_martingale_check,
    ito_residual,
    phi_along_path,
    pooled_se,
    regulator_suite,
    run_regulator,
    spike_suite,
    tabulate_theta_eta,
    theta0_over_a,
    theta_recursion,
    theta_subsimulation,
)
from fractal_control.control import coarse_grid


@pytest.fixture(scope="module")
def small():
    cfg = RegulatorConfig(a=1.0, level=3, paths=20_000, seed=3)
    table = tabulate_theta_eta(cfg)
    return cfg, table, run_regulator(cfg, table, spikes=spike_suite((0.25, 0.125)))


def test_config_validation():
    with pytest.raises(ValueError):
        RegulatorConfig(a=0)
    with pytest.raises(ValueError):
        RegulatorConfig(paths=1)


@pytest.mark.parametrize("a", [0.5, 1.0, 2.0])
def test_theta_terminal_and_sign(a):
    cfg = RegulatorConfig(a=a, level=3)
    table = tabulate_theta_eta(cfg)
    assert np.all(table.theta[-1] == -0.5)
    assert np.all(table.theta < 0)
    assert table.times[-1] == 1.0


def test_theta_recursion_vs_subsimulation():
    cfg = RegulatorConfig(a=1.0, level=3, seed=5)
    grid = coarse_grid(cfg.steps, cfg.grid_points)
    theta, _ = theta_recursion(cfg.a, cfg.level, grid)
    for gi in (0, 16, 30):
        verts = [0, 4, 17, 30]
        est, se = theta_subsimulation(cfg, gi, verts, 4000, grid)
        assert np.all(np.abs(est - theta[gi, verts]) < 3.5 * se), (gi, est, theta[gi, verts], se)
    est, se = theta_subsimulation(cfg, grid.size - 1, [3], 10, grid)
    assert est[0] == -0.5 and se[0] == 0.0
    with pytest.raises(CoverageError):
        theta_subsimulation(cfg, 0, [1], 1, grid)


def test_theta0_increasing_in_a(small):
    cfg, _, _ = small
    ests = theta0_over_a(cfg, [0.25, 0.5, 1.0, 2.0, 4.0])
    vals = [e.value for e in ests]
    assert vals == sorted(vals) and len(set(vals)) == len(vals)
    grid = coarse_grid(cfg.steps, cfg.grid_points)
    exact = [theta_recursion(a, cfg.level, grid)[0][0].mean() for a in (0.5, 1.0, 2.0)]
    assert exact == sorted(exact)
    assert ests[2].value == pytest.approx(estimate_theta0(cfg).value)


def test_initial_values(small):
    cfg, table, run = small
    path = sample_path(WalkConfig(level=3, horizon=1.0, paths=1), 0)
    assert phi_along_path(path)[0] == 1.0
    assert np.all(run.xbar[:, 0] == 1.0)
    assert np.all(run.x_final[:, run.names.index("zero")] == 1.0)
    assert np.allclose(run.p(0) * table.theta[0, run.vertex[:, 0]], 1.0)


def test_mart_starts_at_theta(small):
    _, table, run = small
    assert np.allclose(run.mart[:, 0], table.theta[0, run.vertex[:, 0]])
    _, _, ok = drift_check(run)
    assert ok
    vals, _ = exp_martingale_check(run)
    assert set(vals) == {0.25, 0.5, 1.0}


def test_exp_martingale_matches_exact_chain(small):
    # one step multiplies by cosh(r) exp(-q/2) at the current vertex
    cfg, _, run = small
    model = walk_model(cfg.level)
    P = transition_matrix(cfg.level)
    d = np.cosh(model.root) * np.exp(-0.5 * model.qv)
    steps = run.grid
    vals = np.exp(-run.W - 0.5 * run.QV)
    pi0 = model.start_distribution(cfg.start)
    for g in (8, 16, 32):
        u = np.ones(model.n_vertices)
        for _ in range(int(steps[g])):
            u = d * (P @ u)
        exact = pi0 @ u
        se = vals[:, g].std() / np.sqrt(vals.shape[0])
        assert abs(vals[:, g].mean() - exact) < 4 * se


def test_tournament_and_dp_bound(small):
    cfg, _, run = small
    comps = cost_tournament(run)
    assert all(c.ok for c in comps)
    assert {c.name for c in comps} == set(run.names) - {"u_bar"}
    jbar = run.J("u_bar")
    assert jbar.value >= dp_optimum(cfg) - 2 * jbar.stderr
    assert pooled_se(jbar, jbar) == pytest.approx(np.sqrt(2) * jbar.stderr)
    assert np.all(run.run_cost >= 0)


def test_dp_optimum_below_zero_control():
    cfg = RegulatorConfig(level=3)
    assert 0 < dp_optimum(cfg) < 1


def test_competitor_suite_layout():
    suite = competitor_suite()
    assert next(iter(suite)) == "u_bar"
    assert all(v.shape == (2, 4) for v in suite.values())
    names = [s.name for s in spike_suite((0.125, 0.0625))]
    assert len(names) == 8 and len(set(names)) == 8


def test_ito_residual_shrinks_with_level():
    res = []
    levels = [4, 5, 6, 7]
    for m in levels:
        pb = sample_paths(WalkConfig(level=m, horizon=0.1, seed=1, paths=2000))
        res.append(abs(ito_residual(pb).value))
    assert all(a > b for a, b in zip(res, res[1:]))
    assert fit_loglog_slope([5.0 ** m for m in levels], res) < 0


def test_suite_small_level_all_checks():
    rep = regulator_suite(RegulatorConfig(a=1.0, level=4, paths=40_000, seed=0))
    failed = [k for k, v in rep.checks.items() if not v]
    assert not failed, failed
    doc = json.loads(json.dumps(rep.to_json()))
    assert doc["checks"]["zero_control_exact"] == "pass"
    assert doc["J"]["zero"] == {"est": 1.0, "se": 0.0}
