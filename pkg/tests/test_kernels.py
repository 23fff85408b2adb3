import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from mflab.kernels import (KernelError, build_barre, build_curl_torus, build_hegselmann_krause,
                           build_mollified_coulomb, build_mollified_coulomb_torus, build_zero,
                           check_case_tags, eval_force, kernel_from_config)

HK = build_hegselmann_krause(0.2)


def test_hk_force_examples():
    assert eval_force(HK, [0.3], [0.3])[0] == 0.0
    assert eval_force(HK, [0.4], [0.3])[0] == pytest.approx(0.2, abs=1e-14)
    assert eval_force(HK, [0.2], [0.3])[0] == pytest.approx(-0.2, abs=1e-14)


def test_hk_potential_examples():
    assert HK.potential(np.array([[0.0]]))[0] == pytest.approx(0.04)
    assert HK.potential(np.array([[0.25], [-0.3]])).tolist() == [0.0, 0.0]


def test_hk_force_is_zero_at_the_kink():
    assert eval_force(HK, [0.2], [0.0])[0] == 0.0


def test_barre_potential_at_origin():
    k = build_barre(0.3, 0.1)
    assert k.potential(np.array([[0.0]]))[0] == pytest.approx(0.1 ** 2 - 0.2 ** 2)


def test_whole_space_coulomb_example():
    k = build_mollified_coulomb(1.0)
    assert eval_force(k, [1.0], [0.0])[0] == pytest.approx(0.5)


@pytest.mark.parametrize("bad", [lambda: build_hegselmann_krause(-1),
                                 lambda: build_barre(0.1, 0.2),
                                 lambda: build_mollified_coulomb_torus(0.0),
                                 lambda: build_mollified_coulomb_torus(0.3, d=3)])
def test_parameter_violations(bad):
    with pytest.raises(KernelError):
        bad()


def test_domain_mismatch_rejected():
    with pytest.raises(KernelError):
        eval_force(HK, [0.1, 0.2], [0.0, 0.0])


def test_coulomb_torus_fourier_table():
    k = build_mollified_coulomb_torus(0.3)
    table = k.fourier.as_dict()
    assert table[(0,)] == 0.0
    assert min(table.values()) >= 0.0
    w1 = np.exp(-2 * np.pi ** 2 * 0.09) / (4 * np.pi ** 2)
    assert table[(1,)] == pytest.approx(w1, rel=1e-14)


def test_periodized_gaussian_coefficients_by_quadrature():
    sigma, n = 0.3, 4096
    x = np.arange(n) / n - 0.5
    images = np.arange(-20, 21)
    g = np.exp(-(x[:, None] + images) ** 2 / (2 * sigma ** 2)).sum(1) / np.sqrt(2 * np.pi * sigma ** 2)
    for kk in range(6):
        quad = np.sum(g * np.cos(2 * np.pi * kk * x)) / n
        assert quad == pytest.approx(np.exp(-2 * np.pi ** 2 * sigma ** 2 * kk ** 2), abs=1e-8)


def test_coulomb_sup_bound_stable_under_truncation():
    a = build_mollified_coulomb_torus(0.3, k_max=64).sup_bound()
    b = build_mollified_coulomb_torus(0.3, k_max=128).sup_bound()
    assert np.isfinite(a) and abs(a - b) / b < 1e-6


@pytest.mark.parametrize("spec", [HK, build_barre(0.3, 0.1), build_mollified_coulomb_torus(0.3),
                                  build_mollified_coulomb(0.5), build_zero(),
                                  build_hegselmann_krause(0.2, d=2)])
def test_gradient_tag_verified(spec):
    rep = check_case_tags(spec)
    assert rep.checks["gradient"].passed, rep.summary()
    assert rep.checks["translation-invariant"].passed
    assert rep.declared_ok(), rep.summary()


def test_curl_kernel_is_divergence_free_and_odd():
    rep = check_case_tags(build_curl_torus())
    assert rep.checks["divergence-free-odd"].passed
    assert not rep.checks["gradient"].passed
    assert rep.declared_ok()


def test_hk_h_stability_is_reported_against_fft_oracle():
    rep = check_case_tags(HK, kappa=12.5)
    n = 4096
    x = np.arange(n) / n
    w = np.where(np.abs(x - np.round(x)) <= 0.2, (np.abs(x - np.round(x)) - 0.2) ** 2, 0.0)
    oracle = float(np.min(np.fft.fft(w).real[:n // 2 + 1] / n))
    assert rep.min_fourier == pytest.approx(oracle, abs=1e-12)
    assert rep.relaxed_h_stability == pytest.approx(1 + 25 * oracle)


def test_closed_form_hk_coefficients_match_fft():
    k = build_hegselmann_krause(0.2)
    four = k.fourier_coefficients(10)
    n = 8192
    x = np.arange(n) / n
    fft = np.fft.fft(k.potential(x[:, None])).real / n
    for mode, c in zip(four.modes[:, 0], four.coeffs):
        assert c == pytest.approx(fft[mode % n], abs=1e-8)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(-3, 3))
def test_minimal_image_periodicity(x, y, j):
    # x + j rounds away offsets below ~1e-15, which would cross the HK force jump at 0
    assume(abs((x - y + 0.5) % 1.0 - 0.5) > 1e-12)
    for spec in (HK, build_mollified_coulomb_torus(0.3, k_max=12)):
        a = eval_force(spec, [x], [y])
        b = eval_force(spec, [x + j], [y])
        np.testing.assert_allclose(a, b, atol=1e-12)


@given(st.floats(-0.5, 0.5))
def test_force_is_odd_for_even_potentials(dx):
    for spec in (HK, build_barre(0.3, 0.1), build_mollified_coulomb_torus(0.3, k_max=12)):
        f = spec.force0(np.array([[dx]])) + spec.force0(np.array([[-dx]]))
        assert abs(f[0, 0]) < 1e-12


def test_config_errors_name_the_key():
    with pytest.raises(KernelError, match="kernel.r"):
        kernel_from_config({"name": "hegselmann_krause"})
    with pytest.raises(KernelError, match="kernel.name"):
        kernel_from_config({"name": "nope"})
    with pytest.raises(KernelError, match="kernel.q"):
        kernel_from_config({"name": "zero", "q": 1})


def test_config_round_trip():
    for spec in (HK, build_barre(0.3, 0.1), build_mollified_coulomb_torus(0.3, k_max=12)):
        back = kernel_from_config(spec.to_config())
        assert back.name == spec.name and dict(back.params) == dict(spec.params)


def test_fourier_table_csv(tmp_path):
    build_mollified_coulomb_torus(0.3, k_max=4).fourier.to_csv(tmp_path / "w.csv")
    rows = (tmp_path / "w.csv").read_text().splitlines()
    assert rows[0] == "# mflab-fourier-v1" and len(rows) == 2 + 9
