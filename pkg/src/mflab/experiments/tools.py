"""Ad-hoc tools: a single ensemble simulation and a mean-field fixed point."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..config import init_field, kernel_field
from ..estimators import marginal_from_occupancy
from ..kernels import check_case_tags
from ..meanfield import gibbs_fixed_point
from ..particles import SimConfig, run_ensemble
from .common import Context, Outcome, build_init, build_kernel, simulate_occupancy, torus_grid


@dataclass
class SimulateParams:
    dynamics: str = "overdamped"
    N: int = 64
    R: int = 100
    kappa: float = 0.0
    beta: float = 1.0
    dt: float = 0.01
    observers: list[float] = field(default_factory=lambda: [0.0, 0.5, 1.0])
    kernel: dict = kernel_field({"name": "zero"})
    init: dict = init_field({"kind": "uniform"})
    cells: int = 16
    dump_final: bool = False


def run_simulate(p: SimulateParams, ctx: Context) -> Outcome:
    kernel = build_kernel(p.kernel)
    sim = SimConfig(p.dynamics, p.N, p.R, p.kappa, p.beta, p.dt, max(p.observers), kernel,
                    ctx.seed, init=build_init(p.init), threads=ctx.threads,
                    block_bytes=ctx.block_bytes)
    ctx.check_memory(8.0 * p.N * p.R * kernel.d * 2, "ensemble state")
    out = Outcome()
    if kernel.domain == "torus" and kernel.d == 1:
        grid = torus_grid(p.cells)
        occs = simulate_occupancy(sim, p.observers, {"x": (grid, "x")})
        w = ctx.csv("marginal.csv", ("t", "cell", "density", "stderr"))
        for t in sorted(occs):
            est = marginal_from_occupancy(occs[t]["x"], p.N, 1, grid, 100, ctx.seed)
            for c in range(p.cells):
                w.row(t, c, float(est.values[c]), float(est.stderr[c]))
    else:
        w = ctx.csv("moments.csv", ("t", "component", "mean", "variance"))
        run = run_ensemble(sim, p.observers, callback=_position_sums)
        for t, blocks in zip(run.times, run.results):
            n, s1, s2 = (sum(b[i] for b in blocks) for i in range(3))
            for c in range(kernel.d):
                mean = s1[c] / n
                w.row(t, c, float(mean), float(s2[c] / n - mean ** 2))
    if p.dump_final:
        run = run_ensemble(sim, [max(p.observers)])
        run.snapshot(0).dump(ctx.out / "final_state.bin")
    return out


def _position_sums(state, first):
    x = state.positions.reshape(-1, state.positions.shape[-1])
    return x.shape[0], x.sum(axis=0), (x * x).sum(axis=0)


@dataclass
class FixedPointParams:
    kernel: dict = kernel_field({"name": "hegselmann_krause", "r": 0.2})
    kappa: float = 12.5
    beta: float = 1.0
    resolution: int = 256
    tol: float = 1e-13
    starts: list[float] = field(default_factory=lambda: [0.0, 0.3, -0.3, 0.6, -0.6])


def run_fixed_point(p: FixedPointParams, ctx: Context) -> Outcome:
    kernel = build_kernel(p.kernel)
    out = Outcome()
    w = ctx.csv("fixed_points.csv", ("start_amplitude", "iterations", "residual", "converged",
                                     "max_dev_from_first"))
    x = (np.arange(p.resolution) + 0.5) / p.resolution
    first = None
    for a in p.starts:
        fp = gibbs_fixed_point(kernel, p.kappa, p.beta, p.resolution, p.tol,
                               init=1.0 + a * np.cos(2 * np.pi * x))
        if first is None:
            first = fp.position.values
        dev = float(np.sum(np.abs(fp.position.values - first)) / p.resolution)
        w.row(a, fp.iterations, fp.residual, fp.converged, dev)
        out.fits[f"start={a:g}"] = {"iterations": fp.iterations, "residual": fp.residual,
                                    "l1_to_first": dev}
    report = check_case_tags(kernel, p.kappa)
    (ctx.out / "kernel_report.txt").write_text(report.summary() + "\n")
    return out
