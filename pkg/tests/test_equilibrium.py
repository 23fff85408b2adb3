from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from mflab.equilibrium import (DiscreteGibbsToy, EquilibriumError, estimate_equilibrium_correlations,
                               gibbs_energy, sample_gibbs)
from mflab.estimators import anisotropy_statistic, estimate_marginal
from mflab.grid import Grid
from mflab.kernels import (Confinement, build_curl_torus, build_hegselmann_krause,
                           build_mollified_coulomb_torus, build_zero)

HK = build_hegselmann_krause(0.2)


def test_energy_example():
    # W(0) = 0.04, W(0.1) = 0.01; double sum includes the diagonal
    e = gibbs_energy(np.array([[0.0], [0.1]]), HK, kappa=1.0)
    assert e == pytest.approx((2 * 0.04 + 2 * 0.01) / 4, abs=1e-15)


def test_energy_scales_with_beta_and_adds_confinement():
    k = build_zero(domain="whole", confinement=Confinement(2.0))
    x = np.array([[0.5], [-1.0]])
    assert gibbs_energy(x, k, 0.0, beta=3.0) == pytest.approx(3.0 * (0.25 + 1.0))


@given(st.floats(-2, 2), st.integers(0, 2**16))
def test_torus_energy_is_shift_invariant(shift, seed):
    x = np.random.default_rng(seed).random((5, 1))
    for k in (HK, build_mollified_coulomb_torus(0.3, k_max=12)):
        assert gibbs_energy(x + shift, k, 4.0) == pytest.approx(gibbs_energy(x, k, 4.0), abs=1e-12)


def test_energy_needs_a_potential():
    with pytest.raises(EquilibriumError):
        gibbs_energy(np.zeros((3, 2)), build_curl_torus(), 1.0)


def test_whole_space_sampling_needs_confinement():
    with pytest.raises(EquilibriumError):
        sample_gibbs(build_zero(domain="whole"), 0.0, 1.0, 4, 2)


def test_uncoupled_samples_are_uniform():
    s = sample_gibbs(HK, 0.0, 1.0, N=10, R=20, burn_in=50, n_samples=500, thinning=3, seed=1)
    x = s.flat().reshape(-1)
    assert x.size == 100_000
    counts = np.bincount(np.floor(x * 32).astype(int) % 32, minlength=32)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_samples_are_reproducible_and_thread_independent():
    a = sample_gibbs(HK, 12.5, 1.0, N=6, R=4, burn_in=40, n_samples=20, seed=5)
    b = sample_gibbs(HK, 12.5, 1.0, N=6, R=4, burn_in=40, n_samples=20, seed=5, threads=2)
    np.testing.assert_array_equal(a.positions, b.positions)


def test_tuning_reaches_target_acceptance():
    s = sample_gibbs(build_zero(domain="whole", confinement=Confinement(1.0)), 0.0, 1.0,
                     N=4, R=3, burn_in=400, n_samples=50, seed=2)
    assert np.all(s.tuning_ok)
    assert np.all((s.acceptance > 0.15) & (s.acceptance < 0.6))


def test_one_marginal_is_uniform_on_the_torus():
    s = sample_gibbs(HK, 12.5, 1.0, N=8, R=40, burn_in=200, n_samples=200, thinning=2, seed=3)
    est = estimate_marginal(s.flat(), 1, Grid.torus(16), n_boot=300, groups=s.groups())
    z = np.abs(est.values - 1.0) / est.stderr
    assert np.max(z) < 4.0


def test_uncoupled_second_cumulant_vanishes():
    s = sample_gibbs(HK, 0.0, 1.0, N=4, R=40, burn_in=20, n_samples=400, thinning=2, seed=4)
    est = estimate_equilibrium_correlations(s, 2, Grid.torus(8), n_boot=200)
    z2 = (est.correlations[2].values / est.stderr[2]) ** 2
    assert np.mean(z2) < 2.0


def test_equilibrium_correlation_is_translation_invariant():
    s = sample_gibbs(HK, 12.5, 1.0, N=4, R=40, burn_in=100, n_samples=400, thinning=2, seed=6)
    est = estimate_equilibrium_correlations(s, 2, Grid.torus(8), n_boot=200)
    assert anisotropy_statistic(est.correlations[2], est.stderr[2]) < 2.0


# -- exact toy chain ----------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    return DiscreteGibbsToy(HK, 12.5, 1.0, cells=8, N=2, hop=3)


def test_toy_chain_satisfies_detailed_balance_exactly(toy):
    assert toy.detailed_balance_defect() == 0


def test_toy_target_is_stationary_exactly(toy):
    P = toy.transition_matrix()
    pi = toy.exact_weights()
    n = len(pi)
    for b in range(n):
        assert sum((pi[a] * P[a][b] for a in range(n)), Fraction(0)) == pi[b]
    assert all(sum(row) == 1 for row in P)


def test_toy_histogram_converges_to_target(toy):
    rng = np.random.default_rng(7)
    C = 100_000
    state = toy.sweep(np.zeros((C, 2), dtype=int), rng, sweeps=60)
    h = toy.histogram(state)
    se = np.sqrt(toy.pi * (1 - toy.pi) / C)
    assert np.max(np.abs(h - toy.pi) / se) < 4.0


def test_toy_sweep_preserves_exact_draws(toy):
    rng = np.random.default_rng(8)
    C = 100_000
    state = toy.sweep(toy.draw_exact(C, rng), rng, sweeps=1)
    se = np.sqrt(toy.pi * (1 - toy.pi) / C)
    assert np.max(np.abs(toy.histogram(state) - toy.pi) / se) < 4.0
