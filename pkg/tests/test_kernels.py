import numpy as np
import pytest
from hypothesis import given, strategies as st

from fractal_control import _kernels, rng
from fractal_control.diffusion import WalkConfig, sample_paths, simulate_snapshots, walk_model
from fractal_control.regulator import RegulatorConfig, competitor_suite, run_regulator, spike_suite, tabulate_theta_eta


def test_splitmix_reference_output():
    # first output of SplitMix64 seeded with 0
    with np.errstate(over="ignore"):
        assert int(rng.mix64(rng.GAMMA)) == 0xE220A8397B1DCDAF


def test_uniforms_range_and_independence_of_split():
    u = rng.uniforms(3, 0, 50, 4)
    assert np.all((u >= 0) & (u < 1))
    assert np.array_equal(rng.uniforms(3, 20, 10, 4), u[20:30])
    assert not np.array_equal(rng.uniforms(4, 0, 50, 4), u)


def test_start_vertices_roughly_uniform():
    m = 3
    snap = simulate_snapshots(WalkConfig(level=m, horizon=0.01, paths=42_000), [0])
    counts = np.bincount(snap.vertex[:, 0], minlength=walk_model(m).n_vertices)
    assert counts.min() > 800 and counts.max() < 1200


@pytest.mark.parametrize("n", [1, 31, 33, 70])
@pytest.mark.parametrize("start", ["uniform", "interior", 5])
def test_walk_backends_bit_identical(n, start):
    cfg = WalkConfig(level=3, horizon=0.4, start=start, seed=11, paths=n)
    a = sample_paths(cfg, which="numba")
    b = sample_paths(cfg, which="numpy")
    assert np.array_equal(a.vertex, b.vertex)
    assert np.array_equal(a.sign, b.sign)


@given(st.integers(0, 40), st.integers(1, 40), st.integers(0, 2 ** 32))
def test_batch_split_consistency(path0, n, seed):
    cfg = WalkConfig(level=2, horizon=0.5, seed=seed, paths=80)
    full = sample_paths(cfg)
    part = sample_paths(cfg, n=n, path0=path0)
    assert np.array_equal(part.vertex, full.vertex[:, path0:path0 + n])
    assert np.array_equal(part.sign, full.sign[:, path0:path0 + n])


def test_workers_do_not_change_results():
    cfg = WalkConfig(level=4, horizon=0.5, seed=2, paths=300)
    _kernels.set_workers(1)
    a = simulate_snapshots(cfg, [0, 10, 200])
    _kernels.set_workers(4)
    b = simulate_snapshots(cfg, [0, 10, 200])
    _kernels.set_workers(None)
    assert np.array_equal(a.W, b.W) and np.array_equal(a.QV, b.QV)


def test_snapshots_match_full_paths():
    cfg = WalkConfig(level=3, horizon=1.0, seed=5, paths=64)
    pb = sample_paths(cfg)
    W, QV = pb.cumulative()
    steps = [0, 1, 17, 125]
    snap = simulate_snapshots(cfg, steps)
    assert np.array_equal(snap.vertex, pb.vertex[steps].T)
    assert np.allclose(snap.W, W[steps].T, rtol=0, atol=1e-13)
    assert np.allclose(snap.QV, QV[steps].T, rtol=0, atol=1e-13)


def test_walk_moves_along_edges():
    m = 3
    g = walk_model(m).graph
    pb = sample_paths(WalkConfig(level=m, horizon=1.0, seed=1, paths=50))
    adj = {(int(a), int(b)) for a, b in g.edges}
    for a, b in zip(pb.vertex[:-1].ravel(), pb.vertex[1:].ravel()):
        assert (min(a, b), max(a, b)) in adj


def test_snapshot_validation():
    m = walk_model(2)
    with pytest.raises(ValueError):
        _kernels.walk_snapshots(m.nb4, m.root, m.qv, m.pool("uniform"), 0, 0, 3, np.array([3, 1]))


def test_regulator_backends_agree():
    cfg = RegulatorConfig(a=1.0, level=3, paths=70, seed=4)
    table = tabulate_theta_eta(cfg)
    spikes = spike_suite((0.25, 0.125))
    a = run_regulator(cfg, table, competitor_suite(), spikes, which="numba")
    b = run_regulator(cfg, table, competitor_suite(), spikes, which="numpy")
    assert np.array_equal(a.vertex, b.vertex)
    for f in ("W", "QV", "mart", "xbar", "x_final", "run_cost"):
        assert np.allclose(getattr(a, f), getattr(b, f), rtol=1e-12, atol=1e-12), f


def test_backend_env_flag(monkeypatch):
    monkeypatch.setenv("FRACTAL_CONTROL_NUMBA", "0")
    assert _kernels.backend() == "numpy"
    monkeypatch.setenv("FRACTAL_CONTROL_NUMBA", "1")
    assert _kernels.backend() == "numba"
    with pytest.raises(ValueError):
        _kernels.backend("cuda")
