"""Shared plumbing for experiment pipelines: contexts, ensembles to histograms, references."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..estimators import (MarginalEstimate, debiased_norm, marginal_from_occupancy,
                          occupancy)
from ..grid import Axis, Grid, GridField, cell_average_periodic
from ..kernels import KernelSpec, kernel_from_config
from ..manifest import LONG_COLUMNS, CsvWriter
from ..meanfield import solve_mkv, solve_mkv_em
from ..particles import InitLaw, SimConfig, run_ensemble

log = logging.getLogger("mflab")


class ResourceError(RuntimeError):
    """A configured resource limit would be exceeded."""


class InconclusiveError(RuntimeError):
    pass


@dataclass
class Context:
    """Where and how an experiment runs."""

    out: Path
    seed: int = 0
    threads: int = 1
    memory_cap_mb: int = 4096
    writers: dict = field(default_factory=dict)

    def csv(self, name: str, columns: Sequence[str] = LONG_COLUMNS) -> CsvWriter:
        if name not in self.writers:
            self.writers[name] = CsvWriter(self.out / name, columns)
        return self.writers[name]

    def close(self) -> None:
        for w in self.writers.values():
            w.close()
        self.writers.clear()

    @property
    def block_bytes(self) -> int:
        return int(min(32 * 2**20, self.memory_cap_mb * 2**20 // (4 * self.threads)))

    def check_memory(self, nbytes: float, what: str) -> None:
        if nbytes > self.memory_cap_mb * 2**20:
            raise ResourceError(f"{what} needs {nbytes / 2**20:.0f} MiB, "
                                f"above memory_cap_mb={self.memory_cap_mb}")


@dataclass
class Outcome:
    """What an experiment reports back to the harness."""

    fits: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    inconclusive: bool = False
    lines: list = field(default_factory=list)


def torus_grid(cells: int) -> Grid:
    return Grid.torus(cells)


def grid_tag(grid: Grid) -> str:
    parts = []
    for a in grid.axes:
        kind = "T" if a.periodic else "I"
        parts.append(f"{a.kind}{kind}{a.cells}[{a.lower:g};{a.upper:g}]")
    return "x".join(parts)


def simulate_occupancy(sim: SimConfig, times: Sequence[float],
                       grids: dict[str, tuple[Grid, str]], batch: int = 1
                       ) -> dict[float, dict[str, np.ndarray]]:
    """Run an ensemble and keep only cell counts at each time.

    ``grids`` maps a label to ``(grid, "x" | "v")`` selecting which coordinate
    is histogrammed.  With ``batch > 1`` the counts of realizations
    ``[k batch, (k+1) batch)`` are summed, which is exact for one-particle
    statistics and keeps memory flat for very large ensembles.
    """
    def observe(state, first):
        out = {}
        for name, (g, which) in grids.items():
            if which == "x":
                pts = state.positions
            else:   # tail mass beyond the velocity window lands in the edge cells
                ax = g.axes[0]
                pts = np.clip(state.velocities, ax.lower, np.nextafter(ax.upper, ax.lower))
            occ = occupancy(pts, g)
            if batch > 1:
                ids = (first + np.arange(occ.shape[0])) // batch
                lo = ids[0]
                summed = np.zeros((ids[-1] - lo + 1, occ.shape[1]))
                np.add.at(summed, ids - lo, occ)
                occ = (lo, summed)
            out[name] = occ
        return out

    run = run_ensemble(sim, times, observe)
    res = {}
    n_batches = -(-sim.R // batch)
    for t, blocks in zip(run.times, run.results):
        res[t] = {}
        for name, (g, _) in grids.items():
            if batch > 1:
                total = np.zeros((n_batches, int(np.prod(g.shape))))
                for b in blocks:      # blocks arrive in realization order
                    lo, summed = b[name]
                    total[lo:lo + summed.shape[0]] += summed
                res[t][name] = total
            else:
                res[t][name] = np.concatenate([b[name] for b in blocks])
    return res


def batch_sizes(R: int, batch: int) -> np.ndarray:
    n = -(-R // batch)
    sizes = np.full(n, batch, dtype=float)
    sizes[-1] = R - batch * (n - 1)
    return sizes


def m1_from_batches(counts: np.ndarray, particles: np.ndarray, grid: Grid, n_boot: int,
                    seed: int) -> MarginalEstimate:
    """One-particle histogram from batch-summed counts; bootstrap resamples batches."""
    vol = grid.cell_volume
    est = (counts.sum(axis=0) / (particles.sum() * vol)).reshape(grid.shape)
    rng = np.random.default_rng(seed)
    n = counts.shape[0]
    W = rng.multinomial(n, np.full(n, 1.0 / n), size=n_boot).astype(float)
    reps = (W @ counts) / ((W @ particles)[:, None] * vol)
    reps = reps.reshape((n_boot,) + grid.shape)
    se = reps.std(axis=0, ddof=1)
    return MarginalEstimate(1, GridField(1, grid, est), se, float(particles.sum()), n, reps)


def mean_field_reference(kernel: KernelSpec, kappa: float, init: InitLaw, times, cells: int,
                         method: str = "em", dt: float = 1e-3, resolution: int = 1024
                         ) -> dict[float, np.ndarray]:
    """Cell averages of the one-particle mean-field law at ``times``.

    ``em`` propagates the law of the time-discrete particle dynamics (so the
    comparison carries no integrator bias); ``pde`` solves the continuum
    equation spectrally.
    """
    if method == "em":
        sol = solve_mkv_em(init, kernel, kappa, dt, times, resolution)
    elif method == "pde":
        sol = solve_mkv(init, kernel, kappa, max(times), resolution, times=times)
    else:
        raise ValueError(f"unknown reference method {method!r}")
    return {float(t): cell_average_periodic(sol.at(t).values, cells) for t in times}


@dataclass
class NormRecord:
    value: float       # debiased
    raw: float
    floor: float
    stderr: float


def distance_record(est: MarginalEstimate, reference: GridField | None,
                    norm: Callable[[GridField], float], ref_boot: np.ndarray | None = None
                    ) -> NormRecord:
    """Debiased norm of ``estimate - reference`` with a bootstrap standard error.

    ``ref_boot`` holds bootstrap replicates of a noisy reference (for example
    an MCMC estimate); its floor is removed as well and its replicates are
    paired with the estimate's for the standard error.
    """
    deb, raw, floor = debiased_norm(est.field, reference, est.boot, norm)
    ref = 0.0 if reference is None else reference.values
    if ref_boot is not None:
        fl2 = float(np.mean([norm(reference.like(b - ref)) ** 2 for b in ref_boot]))
        floor = math.sqrt(floor ** 2 + fl2)
        deb = math.sqrt(max(raw ** 2 - floor ** 2, 0.0))
        k = min(len(ref_boot), len(est.boot))
        reps = np.array([norm(est.field.like(est.boot[b] - ref_boot[b])) for b in range(k)])
    else:
        reps = np.array([norm(est.field.like(b - ref)) for b in est.boot])
    se = float(reps.std(ddof=1)) if reps.size > 1 else float("nan")
    return NormRecord(deb, raw, floor, se)


def write_norm(w: CsvWriter, quantity: str, N, t, rec: NormRecord, norm_kind: str, grid: str,
               seed: int) -> None:
    w.row(quantity, N, t, rec.value, rec.stderr, norm_kind + "_debiased", grid, seed)
    w.row(quantity, N, t, rec.raw, rec.stderr, norm_kind + "_raw", grid, seed)
    w.row(quantity, N, t, rec.floor, float("nan"), norm_kind + "_floor", grid, seed)


def m1_estimate(occ: np.ndarray, N: int, grid: Grid, n_boot: int, seed: int) -> MarginalEstimate:
    return marginal_from_occupancy(occ, N, 1, grid, n_boot, seed, keep_boot=True)


def required_R(R: int, floor: float, signal: float, margin: float = 3.0) -> int:
    """Realizations needed for the floor to sit ``margin`` times below ``signal``."""
    if signal <= 0:
        return -1
    return int(math.ceil(R * (margin * floor / signal) ** 2))


def build_kernel(cfg: dict) -> KernelSpec:
    return kernel_from_config(cfg)


def build_init(cfg: dict) -> InitLaw:
    return InitLaw.from_config(cfg)


def fit_record(fit) -> dict:
    out = fit.summary()
    out["x"] = [float(v) for v in np.atleast_1d(fit.x)] if hasattr(fit, "x") else None
    out["values"] = [float(v) for v in np.atleast_1d(fit.values)] if hasattr(fit, "values") else None
    return out


def velocity_grid(v_max: float, cells: int) -> Grid:
    return Grid((Axis(-v_max, v_max, cells, False, "v"),))
