"""Relaxation of the one-particle marginal towards the N-particle equilibrium marginal."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from ..config import init_field, kernel_field
from ..equilibrium import sample_gibbs
from ..estimators import EstimationError, fit_exp_decay, weighted_l2_norm
from ..grid import Grid, GridField
from ..kernels import build_zero
from ..particles import SimConfig
from .common import (Context, Outcome, batch_sizes, build_init, build_kernel, distance_record,
                     fit_record, grid_tag, log, m1_from_batches, simulate_occupancy, torus_grid,
                     velocity_grid, write_norm)


@dataclass
class RelaxationParams:
    N_sweep: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    particles_per_N: int = 1_000_000
    n_batches: int = 200
    kappa: float = 12.5
    kernel: dict = kernel_field({"name": "hegselmann_krause", "r": 0.2})
    init: dict = init_field({"kind": "cosine", "amplitude": 0.5, "phase": 0.0})
    dt: float = 0.001
    t_grid: list[float] = field(default_factory=lambda: [0.01, 0.02, 0.04, 0.08])
    cells: int = 16
    n_boot: int = 100
    force_method: str = "auto"
    mcmc_chains: int = 16
    mcmc_burn_in: int = 200
    mcmc_particles: int = 1_000_000
    mcmc_thinning: int = 1
    max_relative_spread: float = 0.25
    plateau_arm: bool = True
    plateau_t: float = 0.4
    underdamped_arm: bool = True
    ud_N: list[int] = field(default_factory=lambda: [32, 256])
    ud_particles: int = 200_000
    ud_beta: float = 1.0
    ud_dt: float = 0.01
    ud_t_grid: list[float] = field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0])
    ud_velocity_init: dict = init_field({"kind": "gaussian", "mean": 1.0, "std": 0.7})
    ud_v_max: float = 5.0
    ud_v_cells: int = 20


def maxwellian_cells(grid: Grid, beta: float) -> np.ndarray:
    """Exact cell masses of ``N(0, 1/beta)`` over a velocity window, tails folded into the edges."""
    e = grid.axes[0].edges * math.sqrt(beta)
    cdf = ndtr(e)
    cdf[0], cdf[-1] = 0.0, 1.0
    return np.diff(cdf) / grid.cell_volume


def equilibrium_reference(kernel, kappa, N, p: RelaxationParams, grid: Grid, seed: int):
    """MCMC estimate of the equilibrium one-particle marginal with chain-bootstrap replicates."""
    S = max(1, p.mcmc_particles // (N * p.mcmc_chains))
    smp = sample_gibbs(kernel, kappa, 1.0, N, p.mcmc_chains, p.mcmc_burn_in, S,
                       p.mcmc_thinning, seed)
    vol = grid.cell_volume
    flat = grid.flat_index(smp.positions.reshape(p.mcmc_chains, S * N, -1))
    cells = int(np.prod(grid.shape))
    counts = np.stack([np.bincount(f, minlength=cells) for f in flat]).astype(float)
    tot = S * N
    est = counts.sum(axis=0) / (counts.shape[0] * tot * vol)
    rng = np.random.default_rng(seed)
    W = rng.multinomial(p.mcmc_chains, np.full(p.mcmc_chains, 1.0 / p.mcmc_chains),
                        size=p.n_boot).astype(float)
    reps = (W @ counts) / (W.sum(axis=1)[:, None] * tot * vol)
    return GridField(1, grid, est), reps, smp


def _rate_info(ts, recs):
    vals = np.array([r.value for r in recs])
    ses = np.array([r.stderr for r in recs])
    info = {"t": list(ts), "values": vals.tolist(), "stderr": ses.tolist(),
            "floors": [r.floor for r in recs]}
    try:
        fit = fit_exp_decay(ts, vals, ses)
        info.update(fit_record(fit))
        info["rate"] = fit.rate
        info["rate_se"] = fit.slope_se
    except EstimationError as exc:
        info["error"] = str(exc)
        info["rate"] = float("nan")
        info["rate_se"] = float("nan")
    return info


def run(p: RelaxationParams, ctx: Context) -> Outcome:
    kernel = build_kernel(p.kernel)
    grid = torus_grid(p.cells)
    tag = grid_tag(grid)
    out = Outcome()
    long = ctx.csv("results.csv")
    fits_csv = ctx.csv("fits.csv", ("arm", "N", "rate", "rate_se", "r2", "n_points"))
    plot = ctx.csv("plot_relaxation.csv", ("N", "t", "value", "stderr", "floor", "raw"))
    init = build_init(p.init)
    times = sorted(p.t_grid)
    obs = times + ([p.plateau_t] if p.plateau_arm and p.plateau_t not in times else [])
    rates = {}
    for N in p.N_sweep:
        R = max(2, p.particles_per_N // N)
        batch = max(1, -(-R // p.n_batches))
        log.info("relaxation: N=%d R=%d", N, R)
        ref, ref_boot, smp = equilibrium_reference(kernel, p.kappa, N, p, grid, ctx.seed)
        long.row("mcmc_acceptance", N, "", float(np.mean(smp.acceptance)), float("nan"),
                 "fraction", "", ctx.seed)
        sim = SimConfig("overdamped", N, R, p.kappa, 1.0, p.dt, max(obs), kernel, ctx.seed,
                        init=init, force_method=p.force_method, threads=ctx.threads,
                        block_bytes=ctx.block_bytes)
        occs = simulate_occupancy(sim, obs, {"x": (grid, "x")}, batch=batch)
        sizes = batch_sizes(R, batch) * N
        recs = []
        for t in times:
            est = m1_from_batches(occs[t]["x"], sizes, grid, p.n_boot, ctx.seed)
            rec = distance_record(est, ref, weighted_l2_norm, ref_boot)
            recs.append(rec)
            write_norm(long, "F1_minus_MN1", N, t, rec, "L2", tag, ctx.seed)
            plot.row(N, t, rec.value, rec.stderr, rec.floor, rec.raw)
        info = _rate_info(times, recs)
        rates[N] = info
        out.fits[f"rate_N={N}"] = info
        fits_csv.row("gibbs_relaxation", N, info["rate"], info["rate_se"], info.get("r2"),
                     len(times))
        if p.plateau_arm:
            counts = occs[p.plateau_t]["x"]
            half = counts.shape[0] // 2
            full = m1_from_batches(counts, sizes, grid, 2, ctx.seed)
            part = m1_from_batches(counts[:half], sizes[:half], grid, 2, ctx.seed)
            r_full = weighted_l2_norm(full.field - ref)
            r_half = weighted_l2_norm(part.field - ref)
            long.row("plateau_raw", N, p.plateau_t, r_full, float("nan"), "L2_raw_full", tag,
                     ctx.seed)
            long.row("plateau_raw", N, p.plateau_t, r_half, float("nan"), "L2_raw_half", tag,
                     ctx.seed)
            out.fits[f"plateau_ratio_N={N}"] = r_half / r_full if r_full > 0 else float("nan")
            late = distance_record(m1_from_batches(counts, sizes, grid, p.n_boot, ctx.seed),
                                   ref, weighted_l2_norm, ref_boot)
            write_norm(long, "plateau", N, p.plateau_t, late, "L2", tag, ctx.seed)
            out.fits[f"plateau_N={N}"] = {"debiased": late.value, "stderr": late.stderr,
                                          "floor": late.floor, "raw": late.raw}
            out.flags[f"plateau_is_noise_N={N}"] = bool(late.value <= 2 * late.stderr)
    cs = np.array([rates[N]["rate"] for N in p.N_sweep])
    spread = float((cs.max() - cs.min()) / cs.mean()) if np.all(np.isfinite(cs)) else float("inf")
    out.fits["relative_spread"] = spread
    out.flags["all_rates_positive"] = bool(np.all(cs > 0))
    out.flags["uniform_in_N"] = bool(np.all(cs > 0) and spread < p.max_relative_spread)
    out.lines.append("rates " + ", ".join(f"N={N}: {rates[N]['rate']:.2f}" for N in p.N_sweep)
                     + f"; relative spread {spread:.3f}")

    if p.underdamped_arm:
        vgrid = velocity_grid(p.ud_v_max, p.ud_v_cells)
        maxw = GridField(1, vgrid, maxwellian_cells(vgrid, p.ud_beta))
        vtag = grid_tag(vgrid)
        norm = lambda f: weighted_l2_norm(f, p.ud_beta)
        ud = {}
        for N in p.ud_N:
            R = max(2, p.ud_particles // N)
            batch = max(1, -(-R // p.n_batches))
            sim = SimConfig("underdamped", N, R, 0.0, p.ud_beta, p.ud_dt, max(p.ud_t_grid),
                            build_zero(), ctx.seed, init=build_init({"kind": "uniform"}),
                            velocity_init=build_init(p.ud_velocity_init), threads=ctx.threads,
                            block_bytes=ctx.block_bytes)
            occs = simulate_occupancy(sim, p.ud_t_grid, {"v": (vgrid, "v")}, batch=batch)
            sizes = batch_sizes(R, batch) * N
            recs = []
            for t in sorted(p.ud_t_grid):
                est = m1_from_batches(occs[t]["v"], sizes, vgrid, p.n_boot, ctx.seed)
                rec = distance_record(est, maxw, norm)
                recs.append(rec)
                write_norm(long, "velocity_marginal_minus_maxwellian", N, t, rec, "L2_weighted",
                           vtag, ctx.seed)
            ud[N] = _rate_info(sorted(p.ud_t_grid), recs)
            out.fits[f"underdamped_rate_N={N}"] = ud[N]
            fits_csv.row("underdamped_velocity", N, ud[N]["rate"], ud[N]["rate_se"],
                         ud[N].get("r2"), len(p.ud_t_grid))
        a, b = p.ud_N[0], p.ud_N[-1]
        gap = abs(ud[a]["rate"] - ud[b]["rate"])
        tol = 2.0 * math.hypot(ud[a]["rate_se"], ud[b]["rate_se"])
        out.flags["underdamped_consistent"] = bool(gap <= tol)
        out.fits["underdamped_rate_gap"] = {"gap": gap, "two_sigma": tol}
    return out
