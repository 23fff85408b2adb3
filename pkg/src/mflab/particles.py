"""Ensembles of interacting Langevin particle systems.

Each realization owns a random stream derived from ``(seed, realization)``.
The stream is consumed in a fixed order: initial positions, initial
velocities (underdamped), then one ``(N, d)`` block of standard normals per
time step.  Results therefore do not depend on how realizations are grouped
into blocks or on the number of threads.
"""
from __future__ import annotations

import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _compiled as cc
from .grid import GridField
from .kernels import TORUS, WHOLE, Confinement, KernelSpec, build_zero

MAX_N = 4096
SNAPSHOT_TAG = "mflab-snapshot-v1"
_SNAP_MAGIC = b"MFSN"


class SimulationError(RuntimeError):
    """Base class for numerical failures in the particle integrators."""


class DivergenceError(SimulationError):
    def __init__(self, t: float, realization: int):
        super().__init__(f"non-finite state at t={t!r} in realization {realization}")
        self.t = t
        self.realization = realization


class ConfigError(ValueError):
    """Invalid simulation configuration."""


# --- initial laws ----------------------------------------------------------------

@dataclass(frozen=True)
class InitLaw:
    """Named one-particle law used for chaotic initial data.

    kinds
        ``uniform`` (torus), ``cosine`` (``1 + amplitude cos(2 pi (x - phase))``),
        ``von_mises`` (``mean``, ``concentration``), ``gaussian`` (``mean``, ``std``),
        ``grid`` (a :class:`GridField` density).
    """

    kind: str = "uniform"
    params: dict = field(default_factory=dict)
    density_field: GridField | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "cosine", "von_mises", "gaussian", "grid"):
            raise ConfigError(f"init.kind: unknown law {self.kind!r}")
        if self.kind == "grid":
            if self.density_field is None:
                raise ConfigError("grid law needs a density field")
            m = self.density_field.mass()
            if abs(m - 1.0) > 1e-10 or np.min(self.density_field.values) < 0:
                raise ConfigError(f"grid density is not normalized (mass {m!r})")
        if self.kind == "cosine" and abs(self.params.get("amplitude", 0.0)) > 1:
            raise ConfigError("cosine amplitude must be at most 1")

    def density(self, x: np.ndarray) -> np.ndarray:
        """Density at points ``x`` (d=1 arrays)."""
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "uniform":
            return np.ones_like(x)
        if self.kind == "cosine":
            return 1.0 + p.get("amplitude", 0.3) * np.cos(2 * np.pi * (x - p.get("phase", 0.0)))
        if self.kind == "von_mises":
            kap = p.get("concentration", 10.0)
            from scipy.special import i0e
            return np.exp(kap * (np.cos(2 * np.pi * (x - p.get("mean", 0.5))) - 1.0)) / i0e(kap)
        if self.kind == "gaussian":
            mu, s = p.get("mean", 0.0), p.get("std", 1.0)
            return np.exp(-0.5 * ((x - mu) / s) ** 2) / (s * math.sqrt(2 * math.pi))
        ax = self.density_field.grid.axes[0]
        return self.density_field.values[ax.cell_index(x)]

    def sample(self, rng: np.random.Generator, n: int, d: int = 1) -> np.ndarray:
        p = self.params
        if self.kind == "uniform":
            return rng.random((n, d))
        if self.kind == "gaussian":
            return p.get("mean", 0.0) + p.get("std", 1.0) * rng.standard_normal((n, d))
        if self.kind == "von_mises":
            mu = 2 * np.pi * (p.get("mean", 0.5) - 0.5)
            th = rng.vonmises(mu, p.get("concentration", 10.0), (n, d))
            return np.mod(th / (2 * np.pi) + 0.5, 1.0)
        if self.kind == "cosine":
            a = p.get("amplitude", 0.3)
            out = np.empty(n * d)
            filled = 0
            while filled < n * d:
                cand = rng.random(n * d)
                acc = rng.random(n * d) * (1 + abs(a)) < self.density(cand)
                take = cand[acc][: n * d - filled]
                out[filled:filled + take.size] = take
                filled += take.size
            return out.reshape(n, d)
        g = self.density_field
        probs = g.values.ravel() * g.cell_volume
        probs = probs / probs.sum()
        cells = rng.choice(probs.size, size=n, p=probs)
        coords = np.unravel_index(cells, g.grid.shape)
        out = np.empty((n, g.grid.k))
        for a, ax in enumerate(g.grid.axes):
            out[:, a] = ax.lower + ax.width * (coords[a] + rng.random(n))
        return out

    def to_config(self) -> dict:
        if self.kind == "grid":
            raise ConfigError("grid laws are not serializable to config")
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_config(cls, cfg) -> "InitLaw":
        cfg = dict(cfg)
        kind = cfg.pop("kind", "uniform")
        return cls(kind, cfg)


# --- state ----------------------------------------------------------------------------

@dataclass
class EnsembleState:
    """Positions (and velocities) of ``R`` realizations of ``N`` particles."""

    positions: np.ndarray
    velocities: np.ndarray | None = None
    t: float = 0.0
    domain: str = TORUS
    dynamics: str = "overdamped"

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 3:
            raise ConfigError("positions must have shape (R, N, d)")
        if self.dynamics == "underdamped":
            if self.velocities is None or self.velocities.shape != self.positions.shape:
                raise ConfigError("underdamped state needs velocities of matching shape")
        elif self.velocities is not None and self.velocities.shape != self.positions.shape:
            raise ConfigError("velocities must match positions")

    @property
    def R(self) -> int:
        return self.positions.shape[0]

    @property
    def N(self) -> int:
        return self.positions.shape[1]

    @property
    def d(self) -> int:
        return self.positions.shape[2]

    def copy(self) -> "EnsembleState":
        v = None if self.velocities is None else self.velocities.copy()
        return EnsembleState(self.positions.copy(), v, self.t, self.domain, self.dynamics)

    def frozen(self) -> "EnsembleState":
        st = self.copy()
        st.positions.setflags(write=False)
        if st.velocities is not None:
            st.velocities.setflags(write=False)
        return st

    # -- dump format ----------------------------------------------------------
    def to_bytes(self) -> bytes:
        tag = self.dynamics.encode()[:16].ljust(16, b" ")
        dom = self.domain.encode()[:8].ljust(8, b" ")
        has_v = self.velocities is not None
        head = _SNAP_MAGIC + struct.pack("<HIII16s8sd?", 1, self.R, self.N, self.d, tag, dom,
                                         self.t, has_v)
        body = np.ascontiguousarray(self.positions, dtype="<f8").tobytes()
        if has_v:
            body += np.ascontiguousarray(self.velocities, dtype="<f8").tobytes()
        return head + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "EnsembleState":
        if data[:4] != _SNAP_MAGIC:
            raise ConfigError("not a snapshot file")
        fmt = "<HIII16s8sd?"
        ver, R, N, d, tag, dom, t, has_v = struct.unpack_from(fmt, data, 4)
        off = 4 + struct.calcsize(fmt)
        size = R * N * d
        pos = np.frombuffer(data, "<f8", size, off).reshape(R, N, d).astype(float)
        vel = None
        if has_v:
            vel = np.frombuffer(data, "<f8", size, off + 8 * size).reshape(R, N, d).astype(float)
        return cls(pos, vel, t, dom.decode().strip(), tag.decode().strip())

    def dump(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EnsembleState":
        return cls.from_bytes(Path(path).read_bytes())

    def to_csv(self, path) -> None:
        if self.N * self.R > 10**5:
            raise ConfigError("CSV export is limited to N*R <= 1e5")
        with open(path, "w") as fh:
            fh.write(f"# {SNAPSHOT_TAG} dynamics={self.dynamics} t={self.t!r}\n")
            cols = ["realization", "particle"] + [f"x{a}" for a in range(self.d)]
            if self.velocities is not None:
                cols += [f"v{a}" for a in range(self.d)]
            fh.write(",".join(cols) + "\n")
            for r in range(self.R):
                for i in range(self.N):
                    row = [str(r), str(i)] + [repr(float(v)) for v in self.positions[r, i]]
                    if self.velocities is not None:
                        row += [repr(float(v)) for v in self.velocities[r, i]]
                    fh.write(",".join(row) + "\n")


# --- configuration ----------------------------------------------------------------------

@dataclass
class SimConfig:
    """Parameters of one ensemble simulation."""

    dynamics: str = "overdamped"
    N: int = 64
    R: int = 100
    kappa: float = 0.0
    beta: float = 1.0
    dt: float = 1e-3
    t_end: float = 1.0
    kernel: KernelSpec = field(default_factory=build_zero)
    seed: int = 0
    integrator: str | None = None
    init: InitLaw = field(default_factory=InitLaw)
    velocity_init: InitLaw | None = None
    force_method: str = "auto"
    threads: int = 1
    block_bytes: int = 32 * 2**20

    def __post_init__(self):
        if self.dynamics not in ("overdamped", "underdamped"):
            raise ConfigError(f"dynamics: unknown kind {self.dynamics!r}")
        default = "euler-maruyama" if self.dynamics == "overdamped" else "ou-splitting"
        if self.integrator is None:
            self.integrator = default
        if self.integrator != default:
            raise ConfigError(f"integrator {self.integrator!r} does not match {self.dynamics}")
        if not (1 <= self.N <= MAX_N):
            raise ConfigError(f"N must lie in 1..{MAX_N}")
        if self.R < 1:
            raise ConfigError("R must be positive")
        if self.kappa < 0 or self.beta <= 0 or self.dt <= 0 or self.t_end < 0:
            raise ConfigError("need kappa >= 0, beta > 0, dt > 0, t_end >= 0")
        if not (0 <= self.seed < 2**64):
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.kernel.domain == WHOLE and self.kernel.confinement is None:
            raise ConfigError("whole-space runs need a confinement")
        if self.velocity_init is None and self.dynamics == "underdamped":
            self.velocity_init = InitLaw("gaussian", {"mean": 0.0, "std": 1.0 / math.sqrt(self.beta)})
        self.method_code()
        bound = self.kappa * self.kernel.sup_bound(2000)
        lam = self.lam
        rate = max(bound, self.beta if self.dynamics == "underdamped" else 0.0, lam)
        if rate > 0 and self.dt > 0.1 / rate:
            warnings.warn(f"dt={self.dt} exceeds the stability guard 0.1/{rate:.3g}",
                          RuntimeWarning, stacklevel=3)

    @property
    def domain(self) -> str:
        return self.kernel.domain

    @property
    def d(self) -> int:
        return self.kernel.d

    @property
    def lam(self) -> float:
        c = self.kernel.confinement
        return 0.0 if c is None else c.lam

    @property
    def n_steps(self) -> int:
        return steps_for(self.t_end, self.dt)

    def method_code(self) -> int:
        k = self.kernel
        m = self.force_method
        if m == "auto":
            if k.name in ("hegselmann_krause", "barre") and k.d == 1:
                return cc.METHOD_SORTED
            if k.fourier is not None:
                return cc.METHOD_FOURIER
            return cc.METHOD_PAIRWISE
        if m == "sorted":
            if not (k.name in ("hegselmann_krause", "barre") and k.d == 1):
                raise ConfigError("sorted force method needs a d=1 piecewise-linear kernel")
            return cc.METHOD_SORTED
        if m == "fourier":
            if k.fourier is None:
                raise ConfigError("fourier force method needs a Fourier kernel")
            return cc.METHOD_FOURIER
        if m == "pairwise":
            if k.name == "mollified_coulomb_torus":
                raise ConfigError("pairwise method has no closed form for this kernel; use fourier")
            return cc.METHOD_PAIRWISE
        raise ConfigError(f"force_method: unknown method {m!r}")

    def compiled_args(self):
        kind, prm = self.kernel.numba_kind()
        if self.kernel.fourier is not None:
            modes, coefs = self.kernel.fourier.half_space()
        else:
            modes, coefs = np.zeros((1, self.d)), np.zeros(1)
        if self.kappa == 0.0:
            kind = 0
        return (self.method_code(), kind, prm, np.ascontiguousarray(modes), coefs)


def steps_for(t: float, dt: float) -> int:
    n = round(t / dt)
    if abs(n * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise ConfigError(f"time {t!r} is not a multiple of dt={dt!r}")
    return int(n)


# --- random streams -----------------------------------------------------------------------

def realization_rng(seed: int, r: int) -> np.random.Generator:
    """Independent stream for realization ``r``; depends only on ``(seed, r)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(r,))))


def _init_one(rng, config: SimConfig):
    x = config.init.sample(rng, config.N, config.d)
    if config.domain == TORUS:
        x = np.mod(x, 1.0)
        x[x >= 1.0] = 0.0
    v = None
    if config.dynamics == "underdamped":
        v = config.velocity_init.sample(rng, config.N, config.d)
    return x, v


def sample_chaotic_init(config: SimConfig, R: int | None = None) -> EnsembleState:
    """i.i.d. initial data for every particle of every realization."""
    R = config.R if R is None else R
    xs, vs = [], []
    for r in range(R):
        x, v = _init_one(realization_rng(config.seed, r), config)
        xs.append(x)
        vs.append(v)
    vel = np.stack(vs) if config.dynamics == "underdamped" else None
    return EnsembleState(np.stack(xs), vel, 0.0, config.domain, config.dynamics)


# --- single steps ---------------------------------------------------------------------------

def _advance(x, v, noise, config: SimConfig):
    method, kind, prm, modes, coefs = config.compiled_args()
    torus = config.domain == TORUS
    if config.dynamics == "overdamped":
        cc.overdamped_block(x, noise, config.dt, config.kappa, config.lam, torus,
                            method, kind, prm, modes, coefs)
    else:
        cc.underdamped_block(x, v, noise, config.dt, config.kappa, config.lam, config.beta,
                             torus, method, kind, prm, modes, coefs)


def _step(state: EnsembleState, config: SimConfig, noise, rng) -> EnsembleState:
    if state.dynamics != config.dynamics:
        raise ConfigError("state and config dynamics differ")
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng()
        noise = rng.standard_normal(state.positions.shape)
    noise = np.asarray(noise, dtype=float).reshape(state.R, 1, state.N, state.d)
    new = state.copy()
    _advance(new.positions, new.velocities, noise, config)
    new.t = state.t + config.dt
    bad = ~np.isfinite(new.positions).all(axis=(1, 2))
    if new.velocities is not None:
        bad |= ~np.isfinite(new.velocities).all(axis=(1, 2))
    if bad.any():
        raise DivergenceError(new.t, int(np.argmax(bad)))
    return new


def step_overdamped(state: EnsembleState, config: SimConfig, noise=None, rng=None
                    ) -> EnsembleState:
    """One Euler-Maruyama step ``X += dt [kappa/N sum_j K(X_i, X_j) - grad A] + sqrt(2 dt) xi``.

    The sum includes ``j = i``.  ``noise`` of shape ``(R, N, d)`` overrides ``rng``.
    """
    if config.dynamics != "overdamped":
        raise ConfigError("step_overdamped needs overdamped dynamics")
    return _step(state, config, noise, rng)


def step_underdamped(state: EnsembleState, config: SimConfig, noise=None, rng=None
                     ) -> EnsembleState:
    """One kick / OU / drift / kick step.

    ``v += dt/2 F(x)``; ``v = e^{-beta dt} v + sqrt((1 - e^{-2 beta dt})/beta) xi``;
    ``x += dt v``; ``v += dt/2 F(x)``.  With zero forces and zero noise the
    position update is ``x += dt e^{-beta dt} v``.
    """
    if config.dynamics != "underdamped":
        raise ConfigError("step_underdamped needs underdamped dynamics")
    return _step(state, config, noise, rng)


# --- ensembles -------------------------------------------------------------------------

Observer = Callable[[EnsembleState, int], object]


@dataclass
class EnsembleRun:
    """Per-observation-time results of :func:`run_ensemble`.

    ``results[k]`` is a list (one entry per realization block, in order) of
    the callback outputs at ``times[k]``, or the concatenated snapshot when
    no callback was given.
    """

    times: list[float]
    results: list
    config: SimConfig

    def snapshot(self, k: int) -> EnsembleState:
        return self.results[k]


def _block_plan(config: SimConfig, steps: int) -> list[tuple[int, int]]:
    per_real = max(1, steps) * config.N * config.d * 8
    size = int(max(1, min(config.R, config.block_bytes // per_real)))
    return [(a, min(config.R, a + size)) for a in range(0, config.R, size)]


def _chunk_steps(obs_steps: list[int], max_chunk: int) -> list[tuple[int, int, bool]]:
    """Step intervals between observation points, split to at most ``max_chunk``."""
    out = []
    prev = 0
    for s in obs_steps:
        while s - prev > max_chunk:
            out.append((prev, prev + max_chunk, False))
            prev += max_chunk
        out.append((prev, s, True))
        prev = s
    return out


def _run_block(config: SimConfig, lo: int, hi: int, obs_steps, callback, max_chunk):
    rngs = [realization_rng(config.seed, r) for r in range(lo, hi)]
    xs, vs = [], []
    for g in rngs:
        x, v = _init_one(g, config)
        xs.append(x)
        vs.append(v)
    x = np.ascontiguousarray(np.stack(xs))
    v = np.ascontiguousarray(np.stack(vs)) if config.dynamics == "underdamped" else None
    out = []
    for a, b, observe in _chunk_steps(obs_steps, max_chunk):
        n = b - a
        if n > 0:
            noise = np.empty((hi - lo, n, config.N, config.d))
            for q, g in enumerate(rngs):
                noise[q] = g.standard_normal((n, config.N, config.d))
            _advance(x, v, noise, config)
            bad = ~np.isfinite(x).all(axis=(1, 2))
            if v is not None:
                bad |= ~np.isfinite(v).all(axis=(1, 2))
            if bad.any():
                raise DivergenceError(b * config.dt, lo + int(np.argmax(bad)))
        if observe:
            st = EnsembleState(x.copy(), None if v is None else v.copy(), b * config.dt,
                               config.domain, config.dynamics).frozen()
            out.append(st if callback is None else callback(st, lo))
    return out


def run_ensemble(config: SimConfig, observers: Sequence[float],
                 callback: Observer | None = None, max_chunk: int = 200) -> EnsembleRun:
    """Integrate all realizations and record state or summaries at ``observers``.

    Parameters
    ----------
    config
        Simulation parameters; ``config.threads`` realization blocks run concurrently.
    observers
        Observation times, multiples of ``config.dt`` and at most ``t_end``.
    callback
        ``callback(state_block, first_realization)`` evaluated per realization
        block at each observation time.  Without a callback the full snapshots
        are concatenated.
    """
    times = sorted(float(t) for t in observers)
    obs_steps = [steps_for(t, config.dt) for t in times]
    if obs_steps and obs_steps[-1] > config.n_steps:
        raise ConfigError("observer time beyond t_end")
    chunk = min(max_chunk, max(obs_steps + [1]))
    plan = _block_plan(config, chunk)
    work = lambda lohi: _run_block(config, lohi[0], lohi[1], obs_steps, callback, chunk)
    if config.threads > 1 and len(plan) > 1:
        with ThreadPoolExecutor(config.threads) as ex:
            blocks = list(ex.map(work, plan))
    else:
        blocks = [work(p) for p in plan]
    results = []
    for k in range(len(times)):
        per = [b[k] for b in blocks]
        if callback is None:
            vel = None
            if config.dynamics == "underdamped":
                vel = np.concatenate([s.velocities for s in per])
            per = EnsembleState(np.concatenate([s.positions for s in per]), vel, times[k],
                                config.domain, config.dynamics)
        results.append(per)
    return EnsembleRun(times, results, config)
