"""One-particle hierarchy residual for PDE-generated and Monte-Carlo inputs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..config import init_field, kernel_field
from ..estimators import correlations_from_occupancy, bbgky_residual_m1, marginal_from_occupancy
from ..grid import Grid
from ..kernels import build_zero
from ..meanfield import solve_mkv
from ..particles import SimConfig
from .common import Context, Outcome, build_init, build_kernel, grid_tag, simulate_occupancy


@dataclass
class HierarchyParams:
    kernel: dict = kernel_field({"name": "hegselmann_krause", "r": 0.2})
    kappa: float = 12.5
    pde_init: dict = init_field({"kind": "cosine", "amplitude": 0.3, "phase": 0.0})
    pde_resolution: int = 256
    pde_t0: float = 0.05
    pde_dt_obs: float = 1e-4
    pde_points: int = 5
    pde_tolerance: float = 1e-4
    mc_N: int = 32
    mc_R: int = 2000
    mc_R_factor: int = 4
    mc_dt: float = 0.001
    mc_t0: float = 0.05
    mc_dt_obs: float = 0.01
    mc_points: int = 5
    mc_cells: int = 16
    mc_init: dict = init_field({"kind": "cosine", "amplitude": 0.5, "phase": 0.0})
    ell: float = 2.0
    max_ratio: float = 0.7


def pde_inputs(kernel, kappa, init, resolution, times):
    """Mean-field marginals ``mu_t`` and ``mu_t (x) mu_t`` at the given times."""
    sol = solve_mkv(init, kernel, kappa, max(times), resolution, times=times)
    F1 = [sol.at(t) for t in times]
    F2 = [f.outer(f) for f in F1]
    return F1, F2


def run(p: HierarchyParams, ctx: Context) -> Outcome:
    kernel = build_kernel(p.kernel)
    out = Outcome()
    long = ctx.csv("results.csv")
    half = p.pde_points // 2
    times = [p.pde_t0 + (j - half) * p.pde_dt_obs for j in range(p.pde_points)]
    F1, F2 = pde_inputs(kernel, p.kappa, build_init(p.pde_init), p.pde_resolution, times)
    tt, pde_res = bbgky_residual_m1(times, F1, F2, kernel, p.kappa, None, p.ell)
    for t, r in zip(tt, pde_res):
        long.row("residual_pde", "inf", float(t), float(r), float("nan"), f"H-{p.ell:g}",
                 f"spectral{p.pde_resolution}", ctx.seed)
    out.fits["pde_residual_max"] = float(pde_res.max())
    out.flags["pde_residual_ok"] = bool(pde_res.max() < p.pde_tolerance)

    grid = Grid.torus(p.mc_cells)
    tag = grid_tag(grid)
    half = p.mc_points // 2
    mtimes = [p.mc_t0 + (j - half) * p.mc_dt_obs for j in range(p.mc_points)]
    Rmax = p.mc_R * p.mc_R_factor
    sim = SimConfig("overdamped", p.mc_N, Rmax, 0.0, 1.0, p.mc_dt, max(mtimes), build_zero(),
                    ctx.seed, init=build_init(p.mc_init), threads=ctx.threads,
                    block_bytes=ctx.block_bytes)
    occs = simulate_occupancy(sim, mtimes, {"x": (grid, "x")})
    means = {}
    for R in (p.mc_R, Rmax):
        F1, F2 = [], []
        for t in mtimes:
            occ = occs[t]["x"][:R]
            F1.append(marginal_from_occupancy(occ, p.mc_N, 1, grid, 0).field)
            F2.append(marginal_from_occupancy(occ, p.mc_N, 2, grid, 0).field)
        tt, res = bbgky_residual_m1(mtimes, F1, F2, build_zero(), 0.0, p.mc_N, p.ell)
        for t, r in zip(tt, res):
            long.row(f"residual_mc_R={R}", p.mc_N, float(t), float(r), float("nan"),
                     f"H-{p.ell:g}", tag, ctx.seed)
        means[R] = float(np.mean(res))
    ratio = means[Rmax] / means[p.mc_R]
    out.fits["mc_residual_ratio"] = ratio
    out.fits["mc_residual_means"] = {str(k): v for k, v in means.items()}
    out.flags["mc_ratio_ok"] = bool(ratio < p.max_ratio)
    out.lines.append(f"PDE residual max {pde_res.max():.2e}; MC ratio {ratio:.3f}")
    return out
