import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mflab.grid import Grid, GridField
from mflab.kernels import (Confinement, build_hegselmann_krause, build_mollified_coulomb_torus,
                           build_zero)
from mflab.meanfield import solve_mkv, solve_mkv_em
from mflab.particles import (ConfigError, DivergenceError, EnsembleState, InitLaw, SimConfig, run_ensemble,
                             sample_chaotic_init, step_overdamped, step_underdamped, steps_for)

HK = build_hegselmann_krause(0.2)


def minimal_image(dx):
    return dx - np.round(dx)


def test_uniform_init_two_points():
    s = sample_chaotic_init(SimConfig(N=2, R=1))
    assert s.positions.shape == (1, 2, 1)
    assert np.all((s.positions >= 0) & (s.positions < 1))
    assert s.positions[0, 0, 0] != s.positions[0, 1, 0]


def test_grid_density_sampler_matches_cells():
    g = Grid.torus(10)
    w = np.arange(1, 11, dtype=float)
    law = InitLaw("grid", density_field=GridField(1, g, w / (w.sum() * g.cell_volume)))
    n = 10**6
    x = law.sample(np.random.default_rng(5), n)
    counts = np.bincount(g.flat_index(x), minlength=10)
    p = w / w.sum()
    se = np.sqrt(n * p * (1 - p))
    assert np.max(np.abs(counts - n * p) / se) < 4


def test_grid_law_rejects_unnormalized_density():
    g = Grid.torus(4)
    with pytest.raises(ConfigError):
        InitLaw("grid", density_field=GridField(1, g, np.full(4, 2.0)))


def test_same_seed_same_state():
    cfg = SimConfig(N=16, R=5, seed=99, init=InitLaw("cosine", {"amplitude": 0.5}))
    a, b = sample_chaotic_init(cfg), sample_chaotic_init(cfg)
    np.testing.assert_array_equal(a.positions, b.positions)


def test_brownian_increment_variance():
    dt = 1e-4
    cfg = SimConfig(N=1000, R=1000, dt=dt, t_end=dt)
    s0 = sample_chaotic_init(cfg)
    s1 = step_overdamped(s0, cfg, rng=np.random.default_rng(1))
    d = minimal_image(s1.positions - s0.positions).ravel()
    n = d.size
    var = d.var(ddof=1)
    se = 2 * dt * np.sqrt(2.0 / (n - 1))
    assert abs(var - 2 * dt) < 5 * se
    assert np.all((s1.positions >= 0) & (s1.positions < 1))


def test_single_particle_feels_no_self_force():
    cfg = SimConfig(N=1, R=4, kappa=50.0, dt=0.001, t_end=0.001, kernel=HK)
    s0 = sample_chaotic_init(cfg)
    s1 = step_overdamped(s0, cfg, noise=np.zeros(s0.positions.shape))
    np.testing.assert_array_equal(s1.positions, s0.positions)


def test_overdamped_drift_formula_matches_direct_sum():
    cfg = SimConfig(N=7, R=2, kappa=3.0, dt=0.01, t_end=0.01, kernel=HK, seed=4)
    s0 = sample_chaotic_init(cfg)
    s1 = step_overdamped(s0, cfg, noise=np.zeros(s0.positions.shape))
    x = s0.positions[..., 0]
    dx = minimal_image(x[:, :, None] - x[:, None, :])
    K = HK.force0(dx[..., None])[..., 0]
    expected = np.mod(x + cfg.dt * cfg.kappa / cfg.N * K.sum(axis=2), 1.0)
    np.testing.assert_allclose(s1.positions[..., 0], expected, atol=1e-14)


def test_ou_stationary_variance_whole_space():
    k = build_zero(domain="whole", confinement=Confinement(1.0))
    cfg = SimConfig(N=10, R=1000, dt=0.01, t_end=50.0, kernel=k, seed=3,
                    init=InitLaw("gaussian", {"mean": 2.0, "std": 0.1}))
    s = run_ensemble(cfg, [50.0]).snapshot(0)
    assert s.positions.var() == pytest.approx(1.0, rel=0.05)


def test_underdamped_velocity_marginal():
    cfg = SimConfig("underdamped", N=100, R=1000, dt=0.1, t_end=100.0, seed=2,
                    velocity_init=InitLaw("gaussian", {"mean": 2.0, "std": 0.3}))
    s = run_ensemble(cfg, [100.0]).snapshot(0)
    v = s.velocities.ravel()
    assert v.size >= 10**5
    assert v.var() == pytest.approx(1.0, rel=0.02)
    assert abs(v.mean()) < 4 / np.sqrt(v.size)


def test_free_particles_stay_independent():
    cfg = SimConfig("underdamped", N=2, R=40000, dt=0.05, t_end=1.0, seed=8,
                    init=InitLaw("cosine", {"amplitude": 0.8}))
    s = run_ensemble(cfg, [1.0]).snapshot(0)
    a = np.cos(2 * np.pi * s.positions[:, 0, 0])
    b = np.cos(2 * np.pi * s.positions[:, 1, 0])
    cov = np.mean((a - a.mean()) * (b - b.mean()))
    se = a.std() * b.std() / np.sqrt(a.size)
    assert abs(cov) < 4 * se


def test_underdamped_deterministic_step_formula():
    cfg = SimConfig("underdamped", N=3, R=2, beta=2.0, dt=0.01, t_end=0.01)
    x = np.full((2, 3, 1), 0.5)
    v = np.array([0.3, -1.0, 2.0]).reshape(1, 3, 1).repeat(2, 0)
    s1 = step_underdamped(EnsembleState(x, v, 0.0, "torus", "underdamped"), cfg,
                          noise=np.zeros(x.shape))
    damp = np.exp(-cfg.beta * cfg.dt)
    np.testing.assert_allclose(s1.positions, np.mod(x + cfg.dt * damp * v, 1.0), atol=1e-15)
    np.testing.assert_allclose(s1.velocities, damp * v, atol=1e-15)


def test_observer_at_zero_returns_initial_state():
    cfg = SimConfig(N=8, R=3, seed=11, init=InitLaw("cosine", {"amplitude": 0.4}))
    run = run_ensemble(cfg, [0.0])
    assert run.times == [0.0]
    np.testing.assert_array_equal(run.snapshot(0).positions, sample_chaotic_init(cfg).positions)


def test_doubling_R_keeps_first_realizations():
    base = dict(N=16, dt=0.01, t_end=0.1, kappa=5.0, kernel=HK, seed=21)
    a = run_ensemble(SimConfig(R=6, **base), [0.1]).snapshot(0).positions
    b = run_ensemble(SimConfig(R=12, **base), [0.1]).snapshot(0).positions
    np.testing.assert_array_equal(a, b[:6])


def test_thread_count_and_blocking_do_not_change_results():
    base = dict(N=32, R=24, dt=0.01, t_end=0.2, kappa=10.0, kernel=HK, seed=5,
                init=InitLaw("cosine", {"amplitude": 0.5}))
    ref = run_ensemble(SimConfig(**base), [0.1, 0.2])
    alt = run_ensemble(SimConfig(threads=3, block_bytes=4096, **base), [0.1, 0.2], max_chunk=7)
    for k in range(2):
        np.testing.assert_array_equal(ref.snapshot(k).positions, alt.snapshot(k).positions)


@pytest.mark.parametrize("kernel,method", [(HK, "sorted"), (HK, "pairwise"),
                                           (build_mollified_coulomb_torus(0.3, k_max=12), "fourier")])
def test_exchangeability_bit_identical(kernel, method):
    cfg = SimConfig(N=29, R=3, kappa=5.0, dt=0.001, t_end=0.02, kernel=kernel, seed=13,
                    force_method=method)
    s = sample_chaotic_init(cfg)
    rng = np.random.default_rng(0)
    perm = rng.permutation(cfg.N)
    a, b = s, EnsembleState(s.positions[:, perm].copy(), None, 0.0, s.domain)
    for _ in range(20):
        xi = rng.standard_normal(s.positions.shape)
        a = step_overdamped(a, cfg, noise=xi)
        b = step_overdamped(b, cfg, noise=xi[:, perm])
    np.testing.assert_array_equal(a.positions, b.positions[:, np.argsort(perm)])


def test_sorted_and_pairwise_forces_agree():
    base = dict(N=40, R=4, kappa=12.5, dt=0.001, t_end=0.001, kernel=HK, seed=3)
    s = sample_chaotic_init(SimConfig(**base))
    z = np.zeros(s.positions.shape)
    a = step_overdamped(s, SimConfig(force_method="sorted", **base), noise=z)
    b = step_overdamped(s, SimConfig(force_method="pairwise", **base), noise=z)
    np.testing.assert_allclose(a.positions, b.positions, atol=1e-13)


def _sin_moment(mu):
    # exact for trigonometric polynomials sampled on the spectral nodes
    xs = (np.arange(mu.values.size) + 0.5) / mu.values.size
    return float(np.mean(mu.values * np.sin(2 * np.pi * xs)))


@pytest.mark.parametrize("t", [0.05, 1.0])
def test_ensemble_mean_matches_mean_field(t):
    init = InitLaw("cosine", {"amplitude": 0.5, "phase": 0.25})
    cfg = SimConfig(N=64, R=500, kappa=4.0, dt=0.001, t_end=t, kernel=HK, seed=17, init=init)
    x = run_ensemble(cfg, [t]).snapshot(0).positions.ravel()
    f = np.sin(2 * np.pi * x)
    per_real = f.reshape(cfg.R, -1).mean(axis=1)
    se = per_real.std(ddof=1) / np.sqrt(cfg.R)
    mu = solve_mkv(init.density, HK, cfg.kappa, t, 256, times=[t]).at(t)
    assert abs(f.mean() - _sin_moment(mu)) < 4 * se


def test_weak_order_one_under_dt_halving():
    init = InitLaw("cosine", {"amplitude": 0.5, "phase": 0.1}).density
    t = 0.08
    laws = [solve_mkv_em(init, HK, 12.5, dt, [t], resolution=512).at(t).values
            for dt in (0.008, 0.004, 0.002)]
    d1 = np.mean(np.abs(laws[0] - laws[1]))
    d2 = np.mean(np.abs(laws[1] - laws[2]))
    assert 1.5 <= d1 / d2 <= 2.5


def test_divergence_is_reported():
    k = build_zero(domain="whole", confinement=Confinement(1.0))
    cfg = SimConfig(N=2, R=2, dt=0.01, t_end=0.01, kernel=k)
    s = sample_chaotic_init(cfg)
    bad = s.positions.copy()
    bad[1, 0, 0] = np.inf
    with pytest.raises(DivergenceError) as err:
        step_overdamped(EnsembleState(bad, None, 0.0, "whole"), cfg, noise=np.zeros(bad.shape))
    assert err.value.realization == 1


def test_stability_guard_warns():
    with pytest.warns(RuntimeWarning, match="stability guard"):
        SimConfig(kappa=100.0, dt=0.1, kernel=HK)


@pytest.mark.parametrize("kw", [dict(N=0), dict(R=0), dict(dt=-1.0), dict(seed=-1),
                                dict(dynamics="odd"), dict(integrator="rk4"),
                                dict(kernel=build_zero(domain="whole"))])
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        SimConfig(**kw)


def test_observer_must_be_multiple_of_dt():
    with pytest.raises(ConfigError):
        steps_for(0.0105, 0.001)


def test_snapshot_binary_and_csv(tmp_path):
    cfg = SimConfig("underdamped", N=4, R=3, dt=0.01, t_end=0.02)
    s = run_ensemble(cfg, [0.02]).snapshot(0)
    s.dump(tmp_path / "s.bin")
    back = EnsembleState.load(tmp_path / "s.bin")
    np.testing.assert_array_equal(back.positions, s.positions)
    np.testing.assert_array_equal(back.velocities, s.velocities)
    assert back.t == pytest.approx(0.02) and back.dynamics == "underdamped"
    s.to_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().startswith("# ")


@settings(max_examples=15)
@given(st.integers(0, 2**63), st.floats(0.0, 20.0))
def test_torus_positions_stay_in_cell(seed, kappa):
    cfg = SimConfig(N=8, R=2, kappa=kappa, dt=0.005, t_end=0.05, kernel=HK, seed=seed)
    x = run_ensemble(cfg, [0.05]).snapshot(0).positions
    assert np.all((x >= 0) & (x < 1))
