"""Deterministic solvers for the mean-field limits and the mean-field Gibbs state.

Torus densities are stored as point values at the nodes ``(j + 1/2)/n``,
which coincide with the cell centers of a uniform periodic :class:`Grid`.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba as nb
import numpy as np

from .grid import Axis, Grid, GridField
from .kernels import TORUS, WHOLE, KernelSpec


class ResolutionError(RuntimeError):
    """The discretization lost positivity beyond tolerance."""


class TruncationError(RuntimeError):
    """The velocity box is too small: mass reaches the boundary cells."""


class NonContractionWarning(RuntimeWarning):
    pass


@dataclass
class MeanFieldSolution:
    times: list[float]
    snapshots: list[GridField]
    meta: dict = field(default_factory=dict)

    def at(self, t: float) -> GridField:
        i = int(np.argmin(np.abs(np.asarray(self.times) - t)))
        if abs(self.times[i] - t) > 1e-12 * max(1.0, abs(t)):
            raise KeyError(f"no snapshot at t={t}")
        return self.snapshots[i]

    def masses(self) -> np.ndarray:
        return np.array([s.mass() for s in self.snapshots])


# --- spectral helpers on the offset grid ------------------------------------------------

class _Spectral:
    """Real FFT with the half-cell node offset folded into the coefficients."""

    def __init__(self, n: int):
        self.n = n
        self.k = np.arange(n // 2 + 1)
        self._shift = np.exp(-1j * np.pi * self.k / n)

    def coef(self, u: np.ndarray) -> np.ndarray:
        c = np.fft.rfft(u, axis=-1) / self.n * self._shift
        if self.n % 2 == 0:
            c[..., -1] = 0.0
        return c

    def values(self, c: np.ndarray, m: int | None = None) -> np.ndarray:
        m = self.n if m is None else m
        kk = np.arange(m // 2 + 1)
        buf = np.zeros(c.shape[:-1] + (m // 2 + 1,), dtype=complex)
        q = min(c.shape[-1], m // 2 + 1)
        buf[..., :q] = c[..., :q]
        if m % 2 == 0:
            buf[..., -1] = 0.0
        return np.fft.irfft(buf * np.exp(1j * np.pi * kk / m) * m, m, axis=-1)


def _nodes(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def _as_values(mu_init, x: np.ndarray) -> np.ndarray:
    if isinstance(mu_init, GridField):
        if mu_init.values.shape != x.shape:
            raise ValueError("initial field resolution does not match the solver grid")
        return mu_init.values.astype(float).copy()
    if hasattr(mu_init, "density"):
        return np.asarray(mu_init.density(x), dtype=float)
    if callable(mu_init):
        return np.asarray(mu_init(x), dtype=float)
    return np.asarray(mu_init, dtype=float).copy()


def force_hat_1d(kernel: KernelSpec, k: np.ndarray) -> np.ndarray:
    """Fourier coefficients of ``K_0`` on the unit torus (d=1)."""
    if kernel.has_potential:
        return -2j * np.pi * k * kernel.kernel_hat_1d(k)
    n = 8192
    x = np.arange(n) / n
    f = kernel.force0(x[:, None])[:, 0]
    c = np.fft.fft(f) / n
    return c[np.mod(k, n)]


def _time_plan(times: Sequence[float], dt: float) -> list[tuple[float, int]]:
    out, prev = [], 0.0
    for t in times:
        span = t - prev
        n = max(1, int(math.ceil(span / dt - 1e-9))) if span > 0 else 0
        out.append((span / n if n else 0.0, n))
        prev = t
    return out


def _output_times(t_end: float, times) -> list[float]:
    ts = sorted(set([0.0, float(t_end)] + [float(t) for t in (times or [])]))
    if ts[-1] > t_end + 1e-12:
        raise ValueError("requested time beyond t_end")
    return ts


# --- McKean-Vlasov -------------------------------------------------------------------------

def solve_mkv(mu_init, kernel: KernelSpec, kappa: float, t_end: float,
              resolution: int = 256, dt: float | None = None, times=None,
              L: float | None = None) -> MeanFieldSolution:
    """Solve ``d_t mu = div((grad + grad A) mu) - kappa div((K * mu) mu)`` in d=1.

    Torus: pseudo-spectral with exact diffusion (integrating-factor RK4) and
    3/2-rule dealiasing of the transport product.  Whole space: the problem
    is truncated to ``[-L, L]`` and discretized by a Scharfetter-Gummel finite
    volume scheme with implicit Euler steps; ``L`` defaults to ``7 / sqrt(lam)``.
    """
    if kernel.d != 1:
        raise ValueError("solve_mkv supports d=1 only")
    ts = _output_times(t_end, times)
    if kernel.domain == TORUS:
        return _mkv_torus(mu_init, kernel, kappa, ts, resolution, dt)
    return _mkv_whole(mu_init, kernel, kappa, ts, resolution, dt, L)


def _mkv_torus(mu_init, kernel, kappa, ts, n, dt):
    sp = _Spectral(n)
    m = 3 * n // 2
    x = _nodes(n)
    u0 = _as_values(mu_init, x)
    c = sp.coef(u0)
    k = sp.k
    Lop = -4.0 * np.pi ** 2 * k ** 2
    Khat = force_hat_1d(kernel, k)
    if n % 2 == 0:
        Khat[-1] = 0.0
    deriv = 2j * np.pi * k
    grid = Grid((Axis(0.0, 1.0, n, True, "x"),))

    def nonlinear(cf):
        if kappa == 0.0:
            return np.zeros_like(cf)
        u = sp.values(cf, m)
        p = sp.values(Khat * cf, m)
        prod = _Spectral(m).coef(u * p)[: k.size]
        if n % 2 == 0:
            prod[-1] = 0.0
        return -kappa * deriv * prod

    if dt is None:
        speed = kappa * np.max(np.abs(sp.values(Khat * c))) if kappa else 0.0
        dt = 1e-3 if speed == 0 else min(1e-3, 0.5 / (n * speed))
    snaps, cfl_warned, min_seen = [], False, 0.0
    snaps.append(GridField(1, grid, sp.values(c)))
    for span, nsub in _time_plan(ts[1:], dt):
        if nsub == 0:
            snaps.append(GridField(1, grid, sp.values(c)))
            continue
        E = np.exp(Lop * span / 2)
        E2 = E * E
        for s in range(nsub):
            h = span
            a = nonlinear(c)
            u2 = E * (c + 0.5 * h * a)
            b = nonlinear(u2)
            u3 = E * c + 0.5 * h * b
            cc = nonlinear(u3)
            u4 = E2 * c + h * E * cc
            d = nonlinear(u4)
            c = E2 * c + h / 6.0 * (E2 * a + 2.0 * E * (b + cc) + d)
            c[0] = c[0].real
            if kappa and (s % 16 == 0 or s == nsub - 1):
                vals = sp.values(c)
                min_seen = min(min_seen, float(vals.min()))
                if vals.min() < -1e-8:
                    raise ResolutionError(f"density reached {vals.min():.3e}; refine the grid")
                speed = kappa * np.max(np.abs(sp.values(Khat * c)))
                if speed * h > 0.5 / n and not cfl_warned:
                    warnings.warn("transport CFL condition violated", RuntimeWarning)
                    cfl_warned = True
        snaps.append(GridField(1, grid, sp.values(c)))
    _check_snapshots(snaps)
    return MeanFieldSolution(ts, snaps, {"scheme": "spectral-ifrk4-dealiased", "resolution": n,
                                         "dt": dt, "min_value": min_seen})


def _bernoulli(z):
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-10
    zs = np.where(small, 1.0, z)
    return np.where(small, 1.0 - 0.5 * z, zs / np.expm1(zs))


@nb.njit(cache=True)
def _thomas_batched(lower, diag, upper, rhs):
    """Solve independent tridiagonal systems along the last axis, rows batched."""
    B, n = rhs.shape
    out = np.empty_like(rhs)
    cp = np.empty(n)
    dp = np.empty(n)
    for b in range(B):
        cp[0] = upper[b, 0] / diag[b, 0]
        dp[0] = rhs[b, 0] / diag[b, 0]
        for i in range(1, n):
            den = diag[b, i] - lower[b, i] * cp[i - 1]
            cp[i] = upper[b, i] / den
            dp[i] = (rhs[b, i] - lower[b, i] * dp[i - 1]) / den
        out[b, n - 1] = dp[n - 1]
        for i in range(n - 2, -1, -1):
            out[b, i] = dp[i] - cp[i] * out[b, i + 1]
    return out


def _sg_system(bface, h, dt):
    """Tridiagonal implicit-Euler matrix for ``d_t u = d_x(d_x u - b u)``, zero-flux ends.

    ``bface`` holds the drift at the interior faces, shape (B, n-1).
    """
    B, nf = bface.shape
    n = nf + 1
    z = bface * h
    alpha = np.zeros((B, n))
    gamma = np.zeros((B, n))
    alpha[:, :-1] = _bernoulli(-z) / h
    gamma[:, :-1] = _bernoulli(z) / h
    r = dt / h
    diag = 1.0 + r * alpha
    diag[:, 1:] += r * gamma[:, :-1]
    upper = -r * gamma
    lower = np.zeros((B, n))
    lower[:, 1:] = -r * alpha[:, :-1]
    return lower, diag, upper


def _mkv_whole(mu_init, kernel, kappa, ts, n, dt, L):
    lam = kernel.confinement.lam
    L = 7.0 / math.sqrt(lam) if L is None else L
    grid = Grid((Axis(-L, L, n, False, "x"),))
    x = grid.axes[0].centers
    h = grid.axes[0].width
    u = _as_values(mu_init, x)
    u = u / (u.sum() * h)
    faces = grid.axes[0].edges[1:-1]
    Kmat = kernel.force0((x[:, None] - x[None, :])[..., None])[..., 0] * h
    dt = 1e-3 if dt is None else dt
    snaps = [GridField(1, grid, u.copy())]
    for span, nsub in _time_plan(ts[1:], dt):
        for _ in range(nsub):
            b = kappa * (Kmat @ u) if kappa else np.zeros(n)
            bf = 0.5 * (b[1:] + b[:-1]) - lam * faces
            lo, di, up = _sg_system(bf[None, :], h, span)
            u = _thomas_batched(lo, di, up, u[None, :])[0]
        snaps.append(GridField(1, grid, u.copy()))
    _check_snapshots(snaps)
    edge = (u[0] + u[-1]) * h
    return MeanFieldSolution(ts, snaps, {"scheme": "scharfetter-gummel-implicit", "L": L,
                                         "resolution": n, "dt": dt, "boundary_mass": edge})


def solve_mkv_em(mu_init, kernel: KernelSpec, kappa: float, dt: float, times,
                 resolution: int = 1024) -> MeanFieldSolution:
    """Law of one particle under the Euler-Maruyama map with the mean-field drift.

    ``mu_{n+1}(y) = int mu_n(x) G_{2 dt}(y - x - dt kappa (K * mu_n)(x)) dx`` on the
    torus, with a periodized Gaussian ``G``.  This is the large-N limit of the
    time-discrete particle system, so it removes the integrator bias from
    particle-versus-mean-field comparisons.
    """
    if kernel.domain != TORUS or kernel.d != 1:
        raise ValueError("solve_mkv_em supports the d=1 torus only")
    n = resolution
    sp = _Spectral(n)
    x = _nodes(n)
    u = _as_values(mu_init, x)
    Khat = force_hat_1d(kernel, sp.k)
    if n % 2 == 0:
        Khat[-1] = 0.0
    ts = sorted(set([0.0] + [float(t) for t in times]))
    from .particles import steps_for
    steps = [steps_for(t, dt) for t in ts]
    grid = Grid((Axis(0.0, 1.0, n, True, "x"),))
    var = 2.0 * dt
    h = 1.0 / n
    snaps, done = [], 0
    for s in steps:
        while done < s:
            drift = kappa * sp.values(Khat * sp.coef(u)) if kappa else 0.0
            target = x + dt * drift
            diff = x[:, None] - target[None, :]
            diff -= np.round(diff)
            ker = np.zeros_like(diff)
            for img in (-1.0, 0.0, 1.0):
                ker += np.exp(-((diff + img) ** 2) / (2 * var))
            ker /= math.sqrt(2 * math.pi * var)
            u = ker @ (u * h)
            u /= u.sum() * h
            done += 1
        snaps.append(GridField(1, grid, u.copy()))
    return MeanFieldSolution(ts, snaps, {"scheme": "euler-maruyama-law", "resolution": n,
                                         "dt": dt})


def _check_snapshots(snaps):
    for s in snaps:
        if abs(s.mass() - 1.0) > 1e-10:
            raise ResolutionError(f"mass drifted to {s.mass()!r}")


# --- Vlasov-Fokker-Planck -------------------------------------------------------------------

def solve_vfp(mu_init: Callable, kernel: KernelSpec, kappa: float, beta: float, t_end: float,
              resolution: tuple[int, int] = (32, 128), v_max: float | None = None,
              dt: float = 0.01, times=None) -> MeanFieldSolution:
    """Solve the kinetic mean-field equation on the d=1 torus in position.

    Strang splitting: half a step of exact spectral transport in ``x``, one
    implicit step of the velocity Fokker-Planck operator with the mean-field
    force (a single Scharfetter-Gummel / Chang-Cooper flux, which keeps the
    discrete Maxwellian exactly stationary and preserves positivity), then
    another half transport step.

    ``mu_init(x, v)`` is evaluated at the cell centers and renormalized.
    """
    if kernel.domain != TORUS or kernel.d != 1:
        raise ValueError("solve_vfp supports the d=1 torus only")
    nx, nv = resolution
    v_max = max(5.0 / math.sqrt(beta), 6.0) if v_max is None else v_max
    if v_max < 5.0 / math.sqrt(beta):
        raise TruncationError("v_max must be at least 5/sqrt(beta)")
    grid = Grid.phase_space(nx, v_max, nv)
    xa, va = grid.axes
    X, V = np.meshgrid(xa.centers, va.centers, indexing="ij")
    f = np.asarray(mu_init(X, V), dtype=float)
    f = f / (f.sum() * grid.cell_volume)
    hv = va.width
    vfaces = va.edges[1:-1]
    kx = np.arange(nx // 2 + 1)
    Khat = force_hat_1d(kernel, kx)
    if nx % 2 == 0:
        Khat[-1] = 0.0
    sp = _Spectral(nx)
    ts = _output_times(t_end, times)

    def transport(g, tau):
        gh = np.fft.rfft(g, axis=0)
        gh *= np.exp(-2j * np.pi * np.outer(kx, va.centers) * tau)
        if nx % 2 == 0:
            gh[-1] = 0.0
        return np.fft.irfft(gh, nx, axis=0)

    snaps = [GridField(1, grid, f.copy())]
    max_edge = 0.0
    for span, nsub in _time_plan(ts[1:], dt):
        for _ in range(nsub):
            f = transport(f, 0.5 * span)
            rho = f.sum(axis=1) * hv
            force = kappa * sp.values(Khat * sp.coef(rho)) if kappa else np.zeros(nx)
            bf = force[:, None] - beta * vfaces[None, :]
            lo, di, up = _sg_system(bf, hv, span)
            f = _thomas_batched(lo, di, up, np.ascontiguousarray(f))
            f = transport(f, 0.5 * span)
            edge = float((f[:, 0].sum() + f[:, -1].sum()) * grid.cell_volume)
            max_edge = max(max_edge, edge)
            if edge > 1e-8:
                raise TruncationError(f"mass {edge:.2e} in the boundary velocity cells")
        snaps.append(GridField(1, grid, f.copy()))
    _check_snapshots(snaps)
    return MeanFieldSolution(ts, snaps, {"scheme": "strang-spectral-sg", "resolution": (nx, nv),
                                         "v_max": v_max, "dt": dt, "max_edge_mass": max_edge,
                                         "min_value": float(min(s.values.min() for s in snaps))})


def discrete_maxwellian(grid: Grid, beta: float) -> GridField:
    """Uniform-in-x Maxwellian on a phase-space grid, normalized on the grid."""
    xa, va = grid.axes
    m = np.exp(-0.5 * beta * va.centers ** 2)
    vals = np.broadcast_to(m, (xa.cells, va.cells)).copy()
    vals /= vals.sum() * grid.cell_volume
    return GridField(1, grid, vals)


# --- mean-field Gibbs fixed point ---------------------------------------------------------------

@dataclass
class GibbsFixedPoint:
    position: GridField
    beta: float
    residual: float
    iterations: int
    contraction: float
    converged: bool
    history: list[float] = field(default_factory=list)
    surrogate: bool = False     # True when found by time integration, not a fixed-point map

    @property
    def M(self) -> GridField:
        return self.position

    def phase_space(self, v_max: float = 6.0, v_cells: int = 128) -> GridField:
        """``M(x, v) = rho(x) * Gaussian(v; 1/beta)`` on a phase-space grid."""
        xa = self.position.grid.axes[0]
        va = Axis(-v_max, v_max, v_cells, False, "v")
        g = np.exp(-0.5 * self.beta * va.centers ** 2)
        g /= g.sum() * va.width
        return GridField(1, Grid((xa, va)), np.outer(self.position.values, g))


def _convolver(kernel: KernelSpec, grid: Grid):
    x = grid.axes[0].centers
    h = grid.axes[0].width
    if kernel.domain == TORUS:
        n = x.size
        sp = _Spectral(n)
        What = kernel.kernel_hat_1d(sp.k).astype(complex)
        if n % 2 == 0:
            What[-1] = 0.0
        return lambda rho: sp.values(What * sp.coef(rho))
    Wmat = kernel.potential((x[:, None] - x[None, :])[..., None]) * h
    return lambda rho: Wmat @ rho


def gibbs_fixed_point(kernel: KernelSpec, kappa: float, beta: float = 1.0,
                      resolution: int = 256, tol: float = 1e-13, max_iter: int = 5000,
                      init=None, L: float | None = None) -> GibbsFixedPoint:
    """Picard iteration ``rho <- Z^{-1} exp(-beta (A + kappa W * rho))``.

    The velocity factor of the mean-field Gibbs state is an exact Gaussian and
    is not iterated.  Iteration stops when the L1 change drops below ``tol``.
    """
    if not kernel.has_potential:
        raise ValueError("the fixed point needs a gradient kernel")
    if kernel.d != 1:
        raise ValueError("gibbs_fixed_point supports d=1")
    if kernel.domain == TORUS:
        grid = Grid.torus(resolution)
        A = np.zeros(resolution)
    else:
        lam = kernel.confinement.lam
        L = 7.0 / math.sqrt(lam) if L is None else L
        grid = Grid.interval(-L, L, resolution)
        A = kernel.confinement.potential(grid.axes[0].centers[:, None])
    h = grid.axes[0].width
    x = grid.axes[0].centers
    conv = _convolver(kernel, grid)
    contraction = kappa * beta * kernel.w_sup()

    def gibbs_map(rho):
        e = -beta * (A + kappa * conv(rho)) if kappa else -beta * A
        w = np.exp(e - e.max())
        return w / (w.sum() * h)

    if init is None:
        rho = np.full(resolution, 1.0) if kernel.domain == TORUS else gibbs_map(np.zeros(resolution))
    else:
        rho = _as_values(init, x)
    rho = rho / (rho.sum() * h)
    history, converged, it = [], False, 0
    for it in range(1, max_iter + 1):
        new = gibbs_map(rho)
        change = float(np.abs(new - rho).sum() * h)
        history.append(change)
        rho = new
        if change < tol:
            converged = True
            break
    residual = float(np.abs(rho - gibbs_map(rho)).sum() * h)
    if not converged and contraction >= 1:
        warnings.warn(f"no convergence with kappa beta |W|_inf = {contraction:.3g} >= 1",
                      NonContractionWarning)
    return GibbsFixedPoint(GridField(1, grid, rho), beta, residual, it, contraction,
                           converged, history)


def stationary_overdamped(kernel: KernelSpec, kappa: float, resolution: int = 256,
                          tol: float = 1e-13, max_iter: int = 5000, init=None,
                          L: float | None = None) -> GibbsFixedPoint:
    """Steady state ``M = Z^{-1} exp(-(A + kappa W * M))`` of the first-order equation."""
    return gibbs_fixed_point(kernel, kappa, 1.0, resolution, tol, max_iter, init, L)


def relax_to_stationary(mu_init, kernel: KernelSpec, kappa: float, resolution: int = 256,
                        t_chunk: float = 1.0, tol: float = 1e-12, max_time: float = 200.0,
                        dt: float | None = None, L: float | None = None) -> GibbsFixedPoint:
    """Steady state of the first-order mean-field equation by long-time integration.

    Works for any d=1 kernel, including ones without a potential, where no
    fixed-point formula exists.  The result is flagged ``surrogate``: it is
    the state after which one further ``t_chunk`` changes the density by less
    than ``tol`` in L1, not the solution of a self-consistency equation.
    """
    sol = solve_mkv(mu_init, kernel, kappa, t_chunk, resolution, dt, L=L)
    cur = sol.at(t_chunk)
    history, t = [], t_chunk
    while True:
        nxt = solve_mkv(cur.values, kernel, kappa, t_chunk, resolution, dt, L=L).at(t_chunk)
        change = float(np.sum(np.abs(nxt.values - cur.values)) * cur.cell_volume)
        history.append(change)
        cur, t = nxt, t + t_chunk
        if change < tol or t >= max_time:
            break
    converged = change < tol
    if not converged:
        warnings.warn(f"no stationary state within t={max_time:g}: last change {change:.2e}",
                      NonContractionWarning, stacklevel=2)
    return GibbsFixedPoint(cur, 1.0, change, len(history), float("nan"), converged, history,
                           surrogate=True)
