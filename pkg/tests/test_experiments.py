"""Small end-to-end runs of every pipeline; scaled down, so only plumbing and sanity are checked."""
import numpy as np
import pytest

from mflab.cli import build_run_config
from mflab.experiments import REGISTRY, Context
from mflab.manifest import read_csv


def run_small(name, tmp_path, seed=0, **params):
    run = build_run_config({"experiment": name, "seed": seed, "params": params})
    ctx = Context(tmp_path, run.seed, run.threads, run.memory_cap_mb)
    try:
        return REGISTRY[name].run(run.params, ctx)
    finally:
        ctx.close()


def test_factorization(tmp_path):
    out = run_small("exp_factorization", tmp_path, N=16, R=200, cells=8, n_boot=50)
    assert out.flags["factorization_ok"]
    cols, rows = read_csv(tmp_path / "g2_cells.csv")
    assert len(rows) == 64


def test_chaos_small_sweep_reports_each_arm(tmp_path):
    out = run_small("exp_chaos_scaling", tmp_path, N_sweep=[16, 32, 64], R=100,
                    calibration_R=[25, 50, 100], calibration_trials=50,
                    reference_resolution=256, n_boot=20, t_checkpoints=[0.5])
    assert {"m1_L2_t=0.5", "m2_t=0.5", "m1_W2_raw_t=0.5", "fitter_calibration"} <= set(out.fits)
    assert out.flags["kappa_beta_w_sup"] == pytest.approx(0.5)
    info = out.fits["m1_L2_t=0.5"]
    assert len(info["values"]) == 3 and all(v >= 0 for v in info["values"])
    if info["inconclusive"]:
        assert any(k.startswith("required_R") for k in info)


def test_relaxation_small(tmp_path):
    out = run_small("exp_gibbs_relaxation", tmp_path, N_sweep=[8, 16], particles_per_N=20_000,
                    n_batches=20, mcmc_chains=4, mcmc_burn_in=50, mcmc_particles=20_000,
                    n_boot=20, plateau_arm=False, underdamped_arm=False)
    rates = [v for k, v in out.fits.items() if k.startswith("rate_N=")]
    assert len(rates) == 2
    assert all(np.isfinite(r["rate"]) and r["rate"] > 0 for r in rates)


def test_cross_small_is_honest_about_the_floor(tmp_path):
    out = run_small("exp_cross_error", tmp_path, N_sweep=[4, 8], particles_per_N=20_000,
                    n_batches=20, reference_resolution=256, n_boot=20)
    assert (tmp_path / "results.csv").exists()
    assert "joint" in out.fits or out.inconclusive


def test_case2_small(tmp_path):
    out = run_small("exp_case2_large_kappa", tmp_path, kappas=[5.0], N=16, particles=20_000,
                    n_batches=20, mcmc_chains=4, mcmc_burn_in=50, mcmc_particles=20_000,
                    n_boot=20, case1_R=40, case1_t=0.1)
    assert out.flags["mkv_to_uniform_kappa=5"] and out.flags["MN1_uniform_kappa=5"]


def test_hierarchy_small(tmp_path):
    out = run_small("exp_bbgky_residual", tmp_path, mc_N=8, mc_R=200)
    assert out.flags["pde_residual_ok"]


def test_tools(tmp_path):
    (tmp_path / "s").mkdir()
    run_small("simulate", tmp_path / "s", N=16, R=10, observers=[0.0, 0.1])
    cols, rows = read_csv(tmp_path / "s" / "marginal.csv")
    assert len(rows) == 2 * 16
    (tmp_path / "f").mkdir()
    out = run_small("fixed_point", tmp_path / "f")
    assert all(v["l1_to_first"] <= 1e-9 for k, v in out.fits.items() if k.startswith("start="))
