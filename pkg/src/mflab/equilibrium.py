"""Metropolis sampling of the N-particle Gibbs measure and equilibrium correlations.

Only positions are sampled: the velocity factor of the Gibbs measure is an
exact Gaussian of variance ``1/beta`` and is drawn directly when requested.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import _compiled as cc
from .estimators import CorrelationEstimate, estimate_correlations
from .grid import Grid
from .kernels import TORUS, KernelSpec
from .particles import EnsembleState

_CHAIN_STREAM = 0x6D636D63


class EquilibriumError(ValueError):
    pass


def gibbs_energy(positions, kernel: KernelSpec, kappa: float, beta: float = 1.0) -> np.ndarray:
    """Position part of ``beta H^N``: ``beta sum_i [A(x_i) + kappa/(2N) sum_j W(x_i - x_j)]``.

    The double sum includes ``j = i``.  Accepts ``(N, d)`` or ``(R, N, d)``.
    """
    if not kernel.has_potential:
        raise EquilibriumError("the Gibbs energy needs a gradient kernel")
    x = np.asarray(positions, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    N = x.shape[1]
    W = kernel.potential(x[:, :, None, :] - x[:, None, :, :])
    e = kappa / (2 * N) * W.sum(axis=(1, 2))
    if kernel.confinement is not None:
        e = e + kernel.confinement.potential(x).sum(axis=1)
    e = beta * e
    return e[0] if single else e


@dataclass
class GibbsSamples:
    """Position snapshots ``(R, S, N, d)`` from ``R`` independent chains."""

    positions: np.ndarray
    acceptance: np.ndarray
    steps: np.ndarray
    tuning_ok: np.ndarray
    velocities: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def R(self) -> int:
        return self.positions.shape[0]

    @property
    def n_samples(self) -> int:
        return self.positions.shape[1]

    def flat(self) -> np.ndarray:
        R, S, N, d = self.positions.shape
        return self.positions.reshape(R * S, N, d)

    def groups(self) -> np.ndarray:
        return np.repeat(np.arange(self.R), self.n_samples)

    def __iter__(self):
        for s in range(self.n_samples):
            yield self.positions[:, s]

    def to_state(self) -> EnsembleState:
        v = None
        if self.velocities is not None:
            R, S, N, d = self.velocities.shape
            v = self.velocities.reshape(R * S, N, d)
        return EnsembleState(self.flat(), v, 0.0, self.meta.get("domain", TORUS), "gibbs-mcmc")

    def step_report(self) -> str:
        bad = np.flatnonzero(~self.tuning_ok)
        if bad.size == 0:
            return "all chains tuned"
        return (f"{bad.size} chains outside acceptance [0.2, 0.5]: "
                f"steps {self.steps[bad][:5]} acceptance {self.acceptance[bad][:5]}")


def chain_rng(seed: int, r: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(seed, spawn_key=(_CHAIN_STREAM, r))))


def _draws(rng, sweeps, N, d):
    pick = rng.integers(0, N, size=(1, sweeps, N))
    prop = rng.uniform(-1.0, 1.0, size=(1, sweeps, N, d))
    unif = rng.random((1, sweeps, N))
    return pick, prop, unif


def _run_chain(r, kernel, kappa, beta, N, burn_in, n_samples, thinning, seed, step0,
               tune_every, velocities, kind, prm, modes, coefs, cap):
    rng = chain_rng(seed, r)
    d = kernel.d
    torus = kernel.domain == TORUS
    lam = 0.0 if kernel.confinement is None else kernel.confinement.lam
    if torus:
        x = rng.random((1, N, d))
    else:
        x = rng.standard_normal((1, N, d)) / math.sqrt(beta * lam)
    step = np.array([min(step0, cap)])
    acc = np.zeros(1, dtype=np.int64)
    done = 0
    while done < burn_in:
        w = min(tune_every, burn_in - done)
        acc[0] = 0
        pick, prop, unif = _draws(rng, w, N, d)
        cc.metropolis_block(x, step, w, pick, prop, unif, kappa, beta, lam, torus,
                            kind, prm, modes, coefs, acc)
        rate = acc[0] / (w * N)
        if rate > 0.5:
            step[0] = min(step[0] * 1.5, cap)
        elif rate < 0.2:
            step[0] = step[0] / 1.5
        done += w
    out = np.empty((n_samples, N, d))
    acc[0] = 0
    for s in range(n_samples):
        pick, prop, unif = _draws(rng, thinning, N, d)
        cc.metropolis_block(x, step, thinning, pick, prop, unif, kappa, beta, lam, torus,
                            kind, prm, modes, coefs, acc)
        out[s] = x[0]
    rate = acc[0] / max(1, n_samples * thinning * N)
    ok = (0.2 <= rate <= 0.5) or (rate > 0.5 and step[0] >= cap)
    vel = rng.standard_normal((n_samples, N, d)) / math.sqrt(beta) if velocities else None
    return out, rate, step[0], ok, vel


def sample_gibbs(kernel: KernelSpec, kappa: float, beta: float, N: int, R: int,
                 burn_in: int = 500, n_samples: int = 100, thinning: int = 1, seed: int = 0,
                 step: float = 0.25, tune_every: int = 20, velocities: bool = False,
                 threads: int = 1) -> GibbsSamples:
    """Random-scan single-site random-walk Metropolis for ``exp(-beta H^N)``.

    Each sweep makes ``N`` proposals ``x_i -> x_i + step * U[-1, 1)^d`` for
    uniformly chosen ``i``.  The step is retuned every ``tune_every`` burn-in
    sweeps towards acceptance in ``[0.2, 0.5]``; on the torus it is capped at
    ``1/2``.  Chains are independent and seeded by ``(seed, chain)``.
    """
    if not kernel.has_potential:
        raise EquilibriumError("Gibbs sampling needs a gradient kernel")
    if kernel.domain != TORUS and kernel.confinement is None:
        raise EquilibriumError("whole-space sampling needs a confinement")
    kind, prm = kernel.numba_kind()
    if kernel.fourier is not None:
        modes, coefs = kernel.fourier.half_space()
    else:
        modes, coefs = np.zeros((1, kernel.d)), np.zeros(1)
    if kappa == 0.0:
        kind = 0
    if kind not in (0, 1, 2, 4):
        raise EquilibriumError(f"no compiled potential for kernel {kernel.name!r}")
    modes = np.ascontiguousarray(modes)
    cap = 0.5 if kernel.domain == TORUS else 5.0 / math.sqrt(beta * kernel.confinement.lam)
    work = lambda r: _run_chain(r, kernel, kappa, beta, N, burn_in, n_samples, thinning, seed,
                                step, tune_every, velocities, kind, prm, modes, coefs, cap)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            res = list(ex.map(work, range(R)))
    else:
        res = [work(r) for r in range(R)]
    pos = np.stack([o[0] for o in res])
    vel = np.stack([o[4] for o in res]) if velocities else None
    return GibbsSamples(pos, np.array([o[1] for o in res]), np.array([o[2] for o in res]),
                        np.array([o[3] for o in res]), vel,
                        {"domain": kernel.domain, "burn_in": burn_in, "thinning": thinning,
                         "seed": seed, "kappa": kappa, "beta": beta, "N": N})


def estimate_equilibrium_correlations(samples: GibbsSamples, m_max: int, grid: Grid,
                                      n_boot: int = 200, seed: int = 0,
                                      keep_boot: bool = False) -> CorrelationEstimate:
    """Cumulants ``C^{N,m}`` of the sampled Gibbs measure; bootstrap resamples chains."""
    R, S, N, _ = samples.positions.shape
    if N < m_max or R < 2:
        raise EquilibriumError("too few samples or particles for the requested order")
    est = estimate_correlations(samples.flat(), m_max, grid, n_boot, seed,
                                groups=samples.groups(), keep_boot=keep_boot)
    est.correlations.kind = "C"
    return est


# --- discrete toy system with an exactly constructed transition matrix ----------------------

class DiscreteGibbsToy:
    """Single-site Metropolis on ``cells`` torus cells for ``N`` particles.

    Proposal: choose a particle uniformly, move it by a uniformly chosen
    offset in ``{-hop..hop} \\ {0}`` (mod ``cells``).  Target weights are
    ``exp(-gibbs_energy)`` at cell centers.
    """

    def __init__(self, kernel: KernelSpec, kappa: float, beta: float = 1.0, cells: int = 8,
                 N: int = 2, hop: int = 3):
        if kernel.domain != TORUS or kernel.d != 1:
            raise EquilibriumError("the toy system lives on the 1-torus")
        self.cells, self.N, self.hop = cells, N, hop
        centers = (np.arange(cells) + 0.5) / cells
        states = np.array(np.unravel_index(np.arange(cells ** N), (cells,) * N)).T
        self.states = states
        E = gibbs_energy(centers[states][..., None], kernel, kappa, beta)
        self.weights = np.exp(-(E - E.min()))
        self.pi = self.weights / self.weights.sum()
        self.offsets = np.array([o for o in range(-hop, hop + 1) if o != 0])

    def _neighbors(self, s: int):
        st = self.states[s]
        for i in range(self.N):
            for o in self.offsets:
                new = st.copy()
                new[i] = (new[i] + o) % self.cells
                yield int(np.ravel_multi_index(new, (self.cells,) * self.N))

    def transition_matrix(self) -> list[list[Fraction]]:
        """Exact rational transition matrix with float weights converted exactly."""
        n = self.states.shape[0]
        w = [Fraction(float(v)) for v in self.weights]
        q = Fraction(1, self.N * len(self.offsets))
        P = [[Fraction(0)] * n for _ in range(n)]
        for a in range(n):
            for b in self._neighbors(a):
                P[a][b] += q * min(Fraction(1), w[b] / w[a])
            P[a][a] += 1 - sum(P[a])
        return P

    def exact_weights(self) -> list[Fraction]:
        w = [Fraction(float(v)) for v in self.weights]
        z = sum(w)
        return [v / z for v in w]

    def detailed_balance_defect(self) -> Fraction:
        P = self.transition_matrix()
        pi = self.exact_weights()
        n = len(pi)
        worst = Fraction(0)
        for a in range(n):
            for b in range(n):
                worst = max(worst, abs(pi[a] * P[a][b] - pi[b] * P[b][a]))
        return worst

    def sweep(self, state: np.ndarray, rng: np.random.Generator, sweeps: int = 1) -> np.ndarray:
        """Vectorized sweeps over a batch of chains; ``state`` is ``(C, N)`` cell indices."""
        s = state.copy()
        C = s.shape[0]
        rows = np.arange(C)
        W = self.weights.reshape((self.cells,) * self.N)
        for _ in range(sweeps):
            for _ in range(self.N):
                i = rng.integers(0, self.N, C)
                o = self.offsets[rng.integers(0, self.offsets.size, C)]
                u = rng.random(C)
                new = s.copy()
                new[rows, i] = (new[rows, i] + o) % self.cells
                ratio = W[tuple(new.T)] / W[tuple(s.T)]
                take = u < np.minimum(1.0, ratio)
                s[take] = new[take]
        return s

    def draw_exact(self, C: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(self.pi.size, size=C, p=self.pi)
        return self.states[idx].copy()

    def histogram(self, state: np.ndarray) -> np.ndarray:
        flat = np.ravel_multi_index(state.T, (self.cells,) * self.N)
        return np.bincount(flat, minlength=self.pi.size) / state.shape[0]
