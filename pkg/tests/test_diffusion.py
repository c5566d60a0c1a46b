from io import StringIO

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fractal_control.diffusion import (
    Estimate,
    SPECTRAL_DIMENSION,
    WalkConfig,
    bracket_bin_edges,
    estimate_kernel,
    estimate_moment,
    exact_bracket_mean,
    exact_kernel,
    exp_bracket_check,
    fit_loglog_slope,
    mean_estimate,
    sample_path,
    sample_paths,
    simulate_snapshots,
    singularity_profile,
    stationary_distribution,
    steps_for,
    top_share,
    transition_matrix,
    walk_model,
    write_estimates,
)


def test_config_validation():
    with pytest.raises(ValueError):
        WalkConfig(horizon=0)
    with pytest.raises(ValueError):
        WalkConfig(paths=0)
    with pytest.raises(ValueError):
        WalkConfig(start="corner")
    assert WalkConfig(level=3, horizon=1.0).steps == 125
    assert steps_for(0.2, 2) == 5


def test_bracket_is_square_of_increment():
    pb = sample_paths(WalkConfig(level=4, horizon=0.2, paths=40))
    assert np.array_equal(pb.dw() ** 2, pb.dqv())
    assert set(np.unique(pb.sign)) <= {-1, 1}


def test_transition_matrix_stochastic_and_reversible():
    P = transition_matrix(4).toarray()
    pi = stationary_distribution(4)
    assert np.allclose(P.sum(axis=1), 1.0)
    assert np.allclose(pi @ P, pi)
    assert np.allclose(pi[:, None] * P, (pi[:, None] * P).T)


def test_revuz_against_exact_chain():
    m = 4
    cfg = WalkConfig(level=m, horizon=1.0, seed=3, paths=20_000)
    steps = [125, 312, 625]
    snap = simulate_snapshots(cfg, [0] + steps)
    exact = exact_bracket_mean(m, "uniform", steps)
    mc = snap.QV[:, 1:].mean(axis=0)
    se = snap.QV[:, 1:].std(axis=0) / np.sqrt(cfg.paths)
    assert np.all(np.abs(mc - exact) < 4 * se)


@pytest.mark.parametrize("m", [3, 5])
def test_uniform_start_bracket_mean_is_linear(m):
    steps = [5 ** m // 4, 5 ** m // 2, 5 ** m]
    exact = exact_bracket_mean(m, "uniform", steps)
    t = np.array(steps) * 5.0 ** -m
    # the Kusuoka density averages to 2 against nu and nu is degree-proportional
    assert np.allclose(exact, 2 * t, rtol=0.05)


def test_kernel_estimate_matches_matrix_power():
    m, x = 4, 1
    ts = [0.02, 0.05, 0.1]
    est = estimate_kernel(m, ts, x, paths=40_000, seed=9)
    ex = exact_kernel(m, ts, x)
    assert np.all(np.abs(est.p_hat - ex) < 4 * est.stderr)


def test_kernel_symmetric():
    m = 3
    g = walk_model(m).graph
    interior = [v for v in range(g.n_vertices) if v not in g.corner_ids]
    for x, y in [(interior[0], interior[5]), (interior[3], interior[-1])]:
        assert np.allclose(exact_kernel(m, [0.1, 0.3], x, y), exact_kernel(m, [0.1, 0.3], y, x))
    a = estimate_kernel(m, 0.2, interior[0], interior[1], paths=40_000, seed=1)
    b = estimate_kernel(m, 0.2, interior[1], interior[0], paths=40_000, seed=2)
    assert abs(a.p_hat[0] - b.p_hat[0]) < 4 * np.hypot(a.stderr[0], b.stderr[0])


def test_kernel_resolution_guard():
    with pytest.raises(ValueError):
        estimate_kernel(4, 5.0 ** -4, 1)


def test_exact_kernel_decays_like_spectral_dimension():
    m = 7
    ts = np.geomspace(10 * 5.0 ** -m, 0.1, 10)
    slope = fit_loglog_slope(ts, exact_kernel(m, ts, 1))
    assert abs(slope + SPECTRAL_DIMENSION / 2) < 0.08


def test_never_predicate_is_zero():
    cfg = WalkConfig(level=3, horizon=0.5, paths=100)
    rep = estimate_moment([1, 2], (0.0, 0.5), "never", cfg)
    assert np.all(rep.estimates == 0) and np.all(rep.stderr == 0)


def test_callable_predicate_matches_always():
    cfg = WalkConfig(level=3, horizon=0.5, paths=300, seed=4)
    pb = sample_paths(cfg)
    fams = [[(0.0, 0.25)], [(0.1, 0.2), (0.3, 0.5)]]
    a = estimate_moment([1, 2], fams, "always", cfg, paths=pb)
    b = estimate_moment([1, 2], fams, lambda s: np.ones(s.vertex.shape, bool), cfg, paths=pb)
    c = estimate_moment([1, 2], fams, None, cfg)
    assert np.allclose(a.estimates, b.estimates)
    assert np.allclose(a.estimates, c.estimates)


def test_predicate_restricts_mass():
    cfg = WalkConfig(level=3, horizon=0.5, paths=300, seed=4)
    pb = sample_paths(cfg)
    full = estimate_moment(1, (0.0, 0.5), "always", cfg, paths=pb)
    part = estimate_moment(1, (0.0, 0.5), lambda s: s.W > 0, cfg, paths=pb)
    assert 0 < part.estimates[0, 0] < full.estimates[0, 0]


@given(st.floats(0.0, 0.2), st.floats(0.0, 0.2), st.floats(0.0, 0.3))
def test_moment_monotone_in_interval(lo, d1, d2):
    cfg = WalkConfig(level=3, horizon=1.0, paths=200, seed=6)
    inner = (lo, lo + d1)
    outer = (lo, lo + d1 + d2)
    rep = estimate_moment([1, 2], [[inner], [outer]], "always", cfg)
    assert np.all(rep.estimates[0] <= rep.estimates[1] + 1e-15)


def test_moment_validation():
    cfg = WalkConfig(level=2, horizon=0.5, paths=10)
    with pytest.raises(ValueError):
        estimate_moment(1, (0.0, 0.8), None, cfg)
    with pytest.raises(ValueError):
        estimate_moment(0, (0.0, 0.2), None, cfg)
    with pytest.raises(ValueError):
        estimate_moment(1, (0.0, 0.2), lambda s: s.W > 0, cfg)


def test_singularity_profile_shape():
    cfg = WalkConfig(level=4, horizon=1.0, paths=500)
    curve = singularity_profile(bracket_bin_edges(cfg, 125))
    assert curve[-1] == pytest.approx(1.0)
    assert np.all(np.diff(curve) >= 0)
    assert top_share(curve) >= 0.1
    with pytest.raises(ValueError):
        bracket_bin_edges(cfg, 7)


def test_exp_bracket_kappa_zero_and_monotone():
    cfg = WalkConfig(level=4, horizon=0.5, paths=2000, seed=8)
    assert exp_bracket_check(0.0, 0.5, cfg).estimate.value == 1.0
    vals = [exp_bracket_check(k, 0.5, cfg).estimate.value for k in (0.5, 1.0, 2.0)]
    assert vals[0] > 1 and vals == sorted(vals)
    assert exp_bracket_check(1.0, 0.5, cfg).stable
    with pytest.raises(ValueError):
        exp_bracket_check(-1.0, 0.5, cfg)


def test_sample_path_and_csv():
    cfg = WalkConfig(level=2, horizon=1.0, seed=1, paths=10)
    p = sample_path(cfg, 3)
    assert np.array_equal(p.vertex, sample_paths(cfg).vertex[:, 3])
    assert p.W[0] == 0 and p.QV[-1] == pytest.approx(p.dQV.sum())
    buf = StringIO()
    p.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "step,vertex,dW,dQV" and len(lines) == 26


def test_estimates_io():
    e = mean_estimate("x", np.array([1.0, 2.0, 3.0]))
    assert e.value == 2.0 and e.n == 3
    lo, hi = e.ci()
    assert lo < 2 < hi
    buf = StringIO()
    write_estimates([e, Estimate("y", 0.5, 0.1, 4)], buf)
    assert buf.getvalue().splitlines() == ["name,value,stderr,n", f"x,2.0,{e.stderr!r},3", "y,0.5,0.1,4"]


def test_fit_slope():
    x = np.geomspace(1e-3, 1, 7)
    assert fit_loglog_slope(x, 3 * x ** 0.7) == pytest.approx(0.7)
