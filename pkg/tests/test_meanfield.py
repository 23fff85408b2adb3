import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mflab.estimators import fit_exp_decay, weighted_l2_norm
from mflab.kernels import (Confinement, build_hegselmann_krause, build_mollified_coulomb_torus,
                           build_zero)
from mflab.meanfield import (NonContractionWarning, discrete_maxwellian, gibbs_fixed_point,
                             relax_to_stationary, solve_mkv, solve_mkv_em, solve_vfp,
                             stationary_overdamped)

HK = build_hegselmann_krause(0.2)
COULOMB = build_mollified_coulomb_torus(0.3)


def mode(u, k):
    n = u.size
    return np.fft.fft(u)[k] / n


def test_heat_semigroup_mode_decay():
    x0 = lambda x: 1.0 + 0.4 * np.cos(2 * np.pi * x) + 0.2 * np.sin(6 * np.pi * x)
    sol = solve_mkv(x0, build_zero(), 0.0, 0.1, 256, times=[0.1])
    u0, u1 = sol.at(0.0).values, sol.at(0.1).values
    for k in (1, 3):
        expected = mode(u0, k) * np.exp(-4 * np.pi ** 2 * k ** 2 * 0.1)
        assert abs(mode(u1, k) - expected) < 1e-8


def test_mass_conserved_at_every_step():
    ts = list(np.round(np.arange(1, 51) * 0.002, 10))
    init = lambda x: 1.0 + 0.8 * np.cos(2 * np.pi * x)
    for sol in (solve_mkv(init, HK, 12.5, 0.1, 128, dt=0.002, times=ts),
                solve_mkv(init, COULOMB, 5.0, 0.1, 128, dt=0.002, times=ts)):
        m = sol.masses()
        assert np.max(np.abs(m - 1.0)) < 1e-12
        assert min(float(s.values.min()) for s in sol.snapshots) >= -1e-12


@pytest.mark.parametrize("kappa", [1.0, 5.0, 20.0])
def test_h_stable_kernel_flows_to_uniform(kappa):
    init = lambda x: 1.0 + 0.3 * np.cos(2 * np.pi * x)
    sol = solve_mkv(init, COULOMB, kappa, 2.0, 256, times=[1.0, 2.0])
    d = [weighted_l2_norm(sol.at(t) - sol.at(t).like(np.ones(256))) for t in (1.0, 2.0)]
    assert d[1] <= d[0] + 1e-15 and d[1] < 1e-12


def test_spectral_self_convergence():
    init = lambda x: np.exp(np.cos(2 * np.pi * x)) / 1.2660658777520084
    t = 0.05
    a = solve_mkv(init, COULOMB, 5.0, t, 256, dt=1e-4, times=[t]).at(t).values
    b = solve_mkv(init, COULOMB, 5.0, t, 512, dt=1e-4, times=[t]).at(t).values
    # compare on the coarse nodes by exact trigonometric interpolation
    bh = np.fft.rfft(b)[:129] / 512
    ah = np.fft.rfft(a) / 256
    phase_a = np.exp(-1j * np.pi * np.arange(129) / 256)
    phase_b = np.exp(-1j * np.pi * np.arange(129) / 512)
    diff = np.abs(ah * phase_a - bh * phase_b)[:-1].sum() * 2
    assert diff < 1e-6


def test_em_law_approaches_pde_as_dt_shrinks():
    init = lambda x: 1.0 + 0.5 * np.cos(2 * np.pi * x)
    t = 0.04
    pde = solve_mkv(init, HK, 12.5, t, 512, times=[t]).at(t).values
    errs = [np.mean(np.abs(solve_mkv_em(init, HK, 12.5, dt, [t], 512).at(t).values - pde))
            for dt in (0.004, 0.002)]
    assert errs[1] < errs[0]


def test_whole_space_relaxation_is_log_linear():
    k = build_hegselmann_krause(0.2, domain="whole", confinement=Confinement(1.0))
    init = lambda x: np.exp(-0.5 * (x - 1.0) ** 2 / 0.25)
    ts = [2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 40.0]
    sol = solve_mkv(init, k, 12.5, 40.0, 256, dt=0.01, times=ts)
    ref = sol.at(40.0)
    d = [weighted_l2_norm(sol.at(t) - ref) for t in ts[:-1]]
    fit = fit_exp_decay(ts[:-1], d)
    assert fit.rate > 0 and fit.r2 >= 0.99


def test_vfp_relaxes_to_maxwellian():
    init = lambda x, v: (1 + 0.5 * np.cos(2 * np.pi * x)) * np.exp(-0.5 * (v - 1.0) ** 2)
    sol = solve_vfp(init, build_zero(), 0.0, 1.0, 20.0, resolution=(32, 128), v_max=9.0, dt=0.02,
                    times=[2.0, 4.0, 6.0, 8.0, 10.0, 20.0])
    M = discrete_maxwellian(sol.at(20.0).grid, 1.0)
    l1 = np.abs(sol.at(20.0).values - M.values).sum() * M.cell_volume
    assert l1 < 1e-3
    assert np.max(np.abs(sol.masses() - 1.0)) < 1e-10
    assert sol.meta["min_value"] >= 0.0
    d = [weighted_l2_norm(sol.at(t) - M, beta=1.0) for t in (2.0, 4.0, 6.0, 8.0, 10.0)]
    assert fit_exp_decay([2, 4, 6, 8, 10], d).rate > 0


def test_vfp_rejects_narrow_velocity_window():
    from mflab.meanfield import TruncationError
    with pytest.raises(TruncationError):
        solve_vfp(lambda x, v: np.exp(-v ** 2 / 2), build_zero(), 0.0, 1.0, 0.1, v_max=3.0)


# -- fixed points -------------------------------------------------------------

def test_translation_invariant_fixed_point_is_uniform_in_one_iteration():
    fp = gibbs_fixed_point(HK, 12.5, 1.0, 256)
    assert fp.iterations == 1 and fp.residual < 1e-12
    assert np.max(np.abs(fp.M.values - 1.0)) < 1e-12
    ps = fp.phase_space(6.0, 128)
    g = ps.values[0] / ps.values[0].sum()
    v = ps.grid.axes[1].centers
    np.testing.assert_allclose(g, np.exp(-v ** 2 / 2) / np.exp(-v ** 2 / 2).sum(), rtol=1e-12)


def test_uncoupled_fixed_point_is_closed_form():
    k = build_zero(domain="whole", confinement=Confinement(2.0))
    fp = gibbs_fixed_point(k, 0.0, 1.5, 400)
    x = fp.M.grid.axes[0].centers
    h = fp.M.grid.axes[0].width
    exact = np.exp(-1.5 * x ** 2)
    exact /= exact.sum() * h
    assert np.max(np.abs(fp.M.values - exact)) < 1e-12


def test_contraction_regime_converges_from_many_starts():
    x = (np.arange(256) + 0.5) / 256
    finals = []
    for a in (0.0, 0.3, -0.3, 0.6, -0.6):
        fp = gibbs_fixed_point(HK, 12.5, 1.0, 256, init=1.0 + a * np.cos(2 * np.pi * x))
        assert fp.converged and fp.residual < 1e-10
        assert fp.contraction == pytest.approx(0.5, rel=1e-6)
        finals.append(fp.M.values)
    for f in finals:
        assert np.abs(f - finals[0]).sum() / 256 <= 1e-9
        assert np.max(np.abs(f - 1.0)) < 1e-10


@pytest.mark.parametrize("kappa", [0.5, 2.0, 10.0])
def test_h_stable_stationary_state_is_uniform(kappa):
    fp = stationary_overdamped(COULOMB, kappa, 256, init=lambda x: 1 + 0.5 * np.sin(2 * np.pi * x))
    assert np.max(np.abs(fp.M.values - 1.0)) < 1e-10


def test_multistart_agreement_for_coulomb():
    rng = np.random.default_rng(4)
    finals = []
    for _ in range(5):
        c = rng.normal(size=4) * 0.2
        init = lambda x, c=c: 1 + sum(ci * np.cos(2 * np.pi * (i + 1) * x) for i, ci in enumerate(c))
        finals.append(stationary_overdamped(COULOMB, 2.0, 256, init=init).M.values)
    for f in finals[1:]:
        assert np.abs(f - finals[0]).sum() / 256 <= 1e-9


def test_confined_stationary_state_is_gaussian():
    k = build_zero(domain="whole", confinement=Confinement(1.0))
    fp = stationary_overdamped(k, 0.0, 2048)
    x, h = fp.M.grid.axes[0].centers, fp.M.grid.axes[0].width
    var = float(np.sum(x ** 2 * fp.M.values) * h)
    assert var == pytest.approx(1.0, abs=1e-8)


def test_non_contraction_is_reported():
    init = lambda x: 1 + 0.9 * np.cos(2 * np.pi * x)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fp = gibbs_fixed_point(HK, 400.0, 1.0, 128, max_iter=30, init=init)
    assert fp.contraction >= 1
    if not fp.converged:
        assert any(issubclass(w.category, NonContractionWarning) for w in caught)


def test_relaxed_stationary_state_is_flagged_surrogate():
    r = relax_to_stationary(lambda x: 1 + 0.5 * np.cos(2 * np.pi * x), COULOMB, 5.0, 128,
                            t_chunk=0.5)
    assert r.surrogate and r.converged
    assert np.max(np.abs(r.M.values - 1.0)) < 1e-10


def test_relaxed_state_approaches_fixed_point_at_second_order():
    k = build_hegselmann_krause(0.2, domain="whole", confinement=Confinement(1.0))
    gaps = []
    for n in (256, 512):
        r = relax_to_stationary(lambda x: np.exp(-(x - 1) ** 2), k, 12.5, n, t_chunk=2.0, dt=0.01)
        fp = stationary_overdamped(k, 12.5, n)
        gaps.append(np.max(np.abs(r.M.values - fp.M.values)))
    assert 3.0 < gaps[0] / gaps[1] < 5.0


@settings(max_examples=10)
@given(st.floats(0.0, 30.0), st.floats(0.0, 0.9))
def test_mkv_preserves_mass_and_positivity(kappa, amp):
    init = lambda x: 1.0 + amp * np.cos(2 * np.pi * x)
    sol = solve_mkv(init, HK, kappa, 0.02, 128, dt=0.001, times=[0.01, 0.02])
    assert np.max(np.abs(sol.masses() - 1.0)) < 1e-10
    assert min(float(s.values.min()) for s in sol.snapshots) >= -1e-12
