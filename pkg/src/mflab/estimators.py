"""Histogram marginals, norms, the one-particle hierarchy residual, and rate fits."""
from __future__ import annotations

import math
import string
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .cumulants import CorrelationSet, cumulants_from_marginals, enumerate_partitions
from .grid import Grid, GridField
from .kernels import KernelSpec

MAX_DENSE_CELLS = 2 * 10**7


class EstimationError(ValueError):
    pass


# --- distinct-tuple histograms ------------------------------------------------------------

def occupancy(points: np.ndarray, grid: Grid) -> np.ndarray:
    """Per-realization cell counts; ``points`` has shape ``(R, N, k)``."""
    flat = grid.flat_index(points)
    R = flat.shape[0]
    cells = int(np.prod(grid.shape))
    if np.any(flat < 0):
        raise EstimationError("particles fall outside the histogram grid")
    offs = (np.arange(R, dtype=np.int64) * cells)[:, None]
    return np.bincount((flat + offs).ravel(), minlength=R * cells).reshape(R, cells).astype(float)


def tuple_counts(occ: np.ndarray, m: int, weights: np.ndarray | None = None) -> np.ndarray:
    """Weighted sum over realizations of ordered distinct-index m-tuple histograms.

    Mobius inversion over set partitions: the distinct-tuple count equals
    ``sum_pi prod_B (-1)^{|B|-1} (|B|-1)! diag_B(n)`` with ``n`` the occupation
    vector of one realization.  Every tuple is counted, in O(R cells^m).
    """
    R, cells = occ.shape
    w = np.ones(R) if weights is None else np.asarray(weights, dtype=float)
    letters = string.ascii_lowercase
    total = np.zeros((cells,) * m)
    for p in enumerate_partitions(m):
        coef = 1
        for b in p.blocks:
            coef *= (-1) ** (len(b) - 1) * math.factorial(len(b) - 1)
        nb = len(p.blocks)
        compact = np.einsum("z," + ",".join("z" + letters[i] for i in range(nb))
                            + "->" + letters[:nb], w, *[occ] * nb)
        slot_block = {s: i for i, b in enumerate(p.blocks) for s in b}
        idx = np.indices(compact.shape)
        target = tuple(idx[slot_block[s]] for s in range(1, m + 1))
        total[target] += coef * compact
    return total


@dataclass
class MarginalEstimate:
    """Histogram estimate of an m-particle marginal with bootstrap errors."""

    order: int
    field: GridField
    stderr: np.ndarray
    n_tuples: float
    R: int
    boot: np.ndarray | None = None  # (n_boot, *shape) replicates when kept

    @property
    def values(self) -> np.ndarray:
        return self.field.values


def _bootstrap_weights(R: int, n_boot: int, seed: int, groups=None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if groups is None:
        return rng.multinomial(R, np.full(R, 1.0 / R), size=n_boot).astype(float)
    groups = np.asarray(groups)
    labels, inv = np.unique(groups, return_inverse=True)
    gw = rng.multinomial(labels.size, np.full(labels.size, 1.0 / labels.size), size=n_boot)
    return gw[:, inv].astype(float)


def estimate_marginal(points, m: int, grid: Grid, n_boot: int = 200, seed: int = 0,
                      groups=None, keep_boot: bool = False) -> MarginalEstimate:
    """Histogram of ordered m-tuples of distinct particles, averaged over realizations.

    Parameters
    ----------
    points
        ``EnsembleState`` or array ``(R, N, k)`` of one-particle coordinates in
        grid-axis order (positions, then velocities for phase-space grids).
    groups
        Optional realization labels; the bootstrap then resamples whole groups
        (for example Markov chains).
    """
    if hasattr(points, "positions"):
        pts = points.positions
        if len(grid.velocity_axes()):
            pts = np.concatenate([points.positions, points.velocities], axis=-1)
    else:
        pts = np.asarray(points, dtype=float)
    R, N, _ = pts.shape
    if R == 1 and m >= 2 and N < 64:
        warnings.warn("single realization with few particles: high variance", RuntimeWarning)
    return marginal_from_occupancy(occupancy(pts, grid), N, m, grid, n_boot, seed, groups,
                                   keep_boot)


def marginal_from_occupancy(occ: np.ndarray, N: int, m: int, grid: Grid, n_boot: int = 200,
                            seed: int = 0, groups=None, keep_boot: bool = False
                            ) -> MarginalEstimate:
    """:func:`estimate_marginal` from per-realization cell counts ``occ`` of shape ``(R, cells)``."""
    R = occ.shape[0]
    if m > N:
        raise EstimationError(f"cannot form {m}-tuples from {N} particles")
    cells = int(np.prod(grid.shape))
    if grid.k == 1 and m > 3 and cells ** m > 10**6:
        raise EstimationError("m > 3 needs a coarse grid")
    if cells ** m > MAX_DENSE_CELLS:
        raise EstimationError("histogram too large")
    per_real = math.perm(N, m)
    vol = grid.cell_volume ** m
    shape = grid.shape * m
    est = (tuple_counts(occ, m) / (R * per_real * vol)).reshape(shape)
    reps = None
    if n_boot > 0:
        W = _bootstrap_weights(R, n_boot, seed, groups)
        reps = np.empty((n_boot,) + shape)
        for b in range(n_boot):
            reps[b] = (tuple_counts(occ, m, W[b]) / (W[b].sum() * per_real * vol)).reshape(shape)
        se = reps.std(axis=0, ddof=1)
    else:
        se = np.full(shape, np.nan)
    return MarginalEstimate(m, GridField(m, grid, est), se, R * per_real, R,
                            reps if keep_boot else None)


@dataclass
class CorrelationEstimate:
    correlations: CorrelationSet
    stderr: dict[int, np.ndarray]
    boot: dict[int, np.ndarray] | None = None


def estimate_correlations(points, m_max: int, grid: Grid, n_boot: int = 200, seed: int = 0,
                          groups=None, keep_boot: bool = False) -> CorrelationEstimate:
    """Cumulants of the histogram marginals with bootstrap standard errors."""
    if hasattr(points, "positions"):
        points = points.positions
    pts = np.asarray(points, dtype=float)
    return correlations_from_occupancy(occupancy(pts, grid), pts.shape[1], m_max, grid,
                                       n_boot, seed, groups, keep_boot)


def correlations_from_occupancy(occ: np.ndarray, N: int, m_max: int, grid: Grid,
                                n_boot: int = 200, seed: int = 0, groups=None,
                                keep_boot: bool = False) -> CorrelationEstimate:
    R = occ.shape[0]
    if m_max > N:
        raise EstimationError(f"cannot form {m_max}-tuples from {N} particles")
    vol = grid.cell_volume
    shapes = {m: grid.shape * m for m in range(1, m_max + 1)}

    def marg(weights):
        tot = np.sum(weights)
        return [GridField(m, grid, (tuple_counts(occ, m, weights)
                                    / (tot * math.perm(N, m) * vol ** m)).reshape(shapes[m]))
                for m in range(1, m_max + 1)]

    base = cumulants_from_marginals(marg(np.ones(R)), check=False)
    W = _bootstrap_weights(R, n_boot, seed, groups)
    reps = {m: np.empty((n_boot,) + shapes[m]) for m in range(1, m_max + 1)}
    for b in range(n_boot):
        cs = cumulants_from_marginals(marg(W[b]), check=False)
        for m in reps:
            reps[m][b] = cs[m].values
    se = {m: reps[m].std(axis=0, ddof=1) for m in reps}
    return CorrelationEstimate(base, se, reps if keep_boot else None)


# --- norms --------------------------------------------------------------------------------

def _weight(field: GridField, beta: float, A: Callable | None) -> np.ndarray:
    grid = field.grid
    mesh = grid.mesh()
    w = np.ones(grid.shape)
    vax = grid.velocity_axes()
    xax = grid.position_axes()
    if grid.periodic and A is not None:
        raise EstimationError("torus fields carry no confinement weight")
    for a in vax:
        w = w * np.exp(0.5 * beta * mesh[a] ** 2)
    if A is not None:
        pos = np.stack([mesh[a] for a in xax], axis=-1)
        w = w * np.exp((beta if vax else 1.0) * A(pos))
    out = w
    for _ in range(field.order - 1):
        out = np.multiply.outer(out, w)
    return out


def weighted_l2_norm(field: GridField, beta: float = 1.0, A: Callable | None = None) -> float:
    """``(sum omega |h|^2 vol)^{1/2}``; ``omega = exp(beta (|v|^2/2 + A))`` per slot.

    Position-only torus fields use ``omega = 1``; position-only whole-space
    fields use ``omega = exp(A)``.
    """
    w = _weight(field, beta, A)
    return float(math.sqrt(np.sum(w * field.values ** 2) * field.cell_volume))


def sobolev_neg_norm(field: GridField, ell: float) -> float:
    """Fourier ``H^{-ell}`` norm ``(sum_k (1 + |2 pi k|^2)^{-ell} |h_hat(k)|^2)^{1/2}``."""
    return float(math.sqrt(np.sum(_sobolev_weights(field, ell) * np.abs(_torus_fft(field)) ** 2)))


def _torus_fft(field: GridField) -> np.ndarray:
    grid = field.grid
    if not all(a.periodic and a.kind == "x" for a in grid.axes):
        raise EstimationError("the negative Sobolev norm needs a position-only torus field")
    return np.fft.fftn(field.values) / field.values.size


def _sobolev_weights(field: GridField, ell: float) -> np.ndarray:
    freqs = [np.fft.fftfreq(n) * n for n in field.values.shape]
    K = np.meshgrid(*freqs, indexing="ij")
    k2 = sum(k * k for k in K)
    return (1.0 + 4 * np.pi ** 2 * k2) ** (-ell)


def debiased_norm(estimate: GridField, reference: GridField | None, boot: np.ndarray,
                  norm: Callable[[GridField], float]) -> tuple[float, float, float]:
    """Norm of ``estimate - reference`` with the Monte-Carlo floor removed.

    For a quadratic norm, ``E|est - ref|^2 = |E est - ref|^2 + E|est - E est|^2``;
    the second term (the floor) is estimated from bootstrap replicates.
    Returns ``(debiased, raw, floor)``.
    """
    diff = estimate if reference is None else estimate - reference
    raw = norm(diff)
    fl2 = float(np.mean([norm(estimate.like(b - estimate.values)) ** 2 for b in boot]))
    deb = math.sqrt(max(raw ** 2 - fl2, 0.0))
    return deb, raw, math.sqrt(fl2)


def translation_projection(field: GridField) -> GridField:
    """Average of an order-2 torus field along the diagonals ``x - y = const``."""
    if field.order != 2 or field.grid.k != 1 or not field.grid.periodic:
        raise EstimationError("projection needs an order-2 field on the 1-torus")
    n = field.grid.shape[0]
    v = field.values
    i = np.arange(n)
    prof = np.array([v[i, (i - s) % n].mean() for s in range(n)])
    out = prof[(i[:, None] - i[None, :]) % n]
    return field.like(out)


def anisotropy_statistic(field: GridField, stderr: np.ndarray) -> float:
    """Mean squared z-score of the departure from the translation-invariant projection."""
    proj = translation_projection(field)
    z = (field.values - proj.values) / np.where(stderr > 0, stderr, np.inf)
    return float(np.mean(z ** 2))


# --- one-dimensional Wasserstein-2 -------------------------------------------------------

_GL = (0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0))


class _Quantile:
    def __init__(self, dens, edges):
        p = np.maximum(dens, 0) * np.diff(edges)
        S = np.concatenate([[0.0], np.cumsum(p)])
        S /= S[-1]
        self.S, self.e = S, edges

    def __call__(self, s):
        i = np.clip(np.searchsorted(self.S, s, side="right") - 1, 0, self.S.size - 2)
        span = self.S[i + 1] - self.S[i]
        frac = np.where(span > 0, (s - self.S[i]) / np.where(span > 0, span, 1.0), 0.0)
        return self.e[i] + frac * (self.e[i + 1] - self.e[i])


def _quadratic_cost(qa, qb, breaks):
    b = np.unique(np.clip(breaks, 0.0, 1.0))
    lo, hi = b[:-1], b[1:]
    keep = hi > lo
    lo, hi = lo[keep], hi[keep]
    tot = 0.0
    for g in _GL:
        s = lo + g * (hi - lo)
        tot += np.sum(0.5 * (hi - lo) * (qa(s) - qb(s)) ** 2)
    return float(tot)


def wasserstein_1d(a: GridField, b: GridField) -> float:
    """Exact W2 between piecewise-constant densities on a common 1-D grid.

    On the torus the optimal coupling is a shifted quantile map; the shift is
    found by bounded minimization of the (convex) transport cost.  Inputs are
    first rolled to a canonical start so common whole-cell rotations give
    identical results.
    """
    if a.grid != b.grid or a.order != 1 or a.grid.k != 1:
        raise EstimationError("wasserstein_1d needs two order-1 fields on one 1-D grid")
    if abs(a.mass() - b.mass()) > 1e-8:
        raise EstimationError("mass mismatch")
    ax = a.grid.axes[0]
    edges = ax.edges
    va, vb = a.values, b.values
    if not ax.periodic:
        qa, qb = _Quantile(va, edges), _Quantile(vb, edges)
        return math.sqrt(_quadratic_cost(qa, qb, np.concatenate([qa.S, qb.S])))
    shift = int(np.argmax(va + vb))
    va, vb = np.roll(va, -shift), np.roll(vb, -shift)
    loc = edges - edges[0]
    L = ax.length
    qa, qb0 = _Quantile(va, loc), _Quantile(vb, loc)

    def cost(alpha):
        def qb(s):
            u = s + alpha
            f = np.floor(u)
            return qb0(u - f) + f * L
        br = np.concatenate([qa.S, qb0.S - alpha, qb0.S - alpha + 1, qb0.S - alpha - 1])
        return _quadratic_cost(qa, qb, np.concatenate([br, [0.0, 1.0]]))

    grid = np.linspace(-1.0, 1.0, 81)
    vals = [cost(t) for t in grid]
    j = int(np.argmin(vals))
    lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]
    res = minimize_scalar(cost, bounds=(lo, hi), method="bounded", options={"xatol": 1e-13})
    best = min(res.fun, vals[j])
    return math.sqrt(max(best, 0.0))


# --- rate fits -----------------------------------------------------------------------------

@dataclass
class RateFit:
    """Weighted least-squares fit on log values."""

    kind: str
    x: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    slope: float
    slope_se: float
    intercept: float
    r2: float
    floored: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    @property
    def exponent(self) -> float:
        return self.slope

    @property
    def rate(self) -> float:
        return -self.slope

    def summary(self) -> dict:
        return {"kind": self.kind, "slope": self.slope, "slope_se": self.slope_se,
                "intercept": self.intercept, "r2": self.r2,
                "n_floored": int(np.sum(self.floored))}


def _prepare(values, stderr):
    v = np.asarray(values, dtype=float)
    se = np.zeros_like(v) if stderr is None else np.asarray(stderr, dtype=float)
    floored = (se > 0) & (v < 2.0 * se)
    v = np.where(floored, se, v)
    if np.any(v <= 0):
        raise EstimationError("nonpositive values after flooring")
    return v, se, floored


def _wls(X, y, w):
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    res = y - X @ coef
    n, p = X.shape
    dof = max(n - p, 1)
    s2 = float(np.sum(w * res ** 2) / dof)
    cov = s2 * np.linalg.inv((X * w[:, None]).T @ X)
    ybar = np.sum(w * y) / np.sum(w)
    sst = float(np.sum(w * (y - ybar) ** 2))
    r2 = 1.0 - float(np.sum(w * res ** 2)) / sst if sst > 0 else 1.0
    return coef, np.sqrt(np.maximum(np.diag(cov), 0.0)), min(max(r2, 0.0), 1.0)


def _log_weights(v, se):
    rel = np.where(se > 0, se / v, 0.0)
    if np.all(rel > 0):
        return 1.0 / rel ** 2
    return np.ones_like(v)


def fit_power_law(x, values, stderr=None) -> RateFit:
    """Fit ``value = C x^slope`` by weighted least squares on log-log axes."""
    x = np.asarray(x, dtype=float)
    if x.size < 3:
        raise EstimationError("need at least 3 points")
    v, se, fl = _prepare(values, stderr)
    X = np.column_stack([np.ones_like(x), np.log(x)])
    coef, cse, r2 = _wls(X, np.log(v), _log_weights(v, se))
    return RateFit("power", x, v, se, float(coef[1]), float(cse[1]), float(coef[0]), r2, fl)


def fit_exp_decay(t, values, stderr=None) -> RateFit:
    """Fit ``value = C exp(slope t)``; ``rate = -slope``."""
    t = np.asarray(t, dtype=float)
    if t.size < 3:
        raise EstimationError("need at least 3 points")
    v, se, fl = _prepare(values, stderr)
    X = np.column_stack([np.ones_like(t), t])
    coef, cse, r2 = _wls(X, np.log(v), _log_weights(v, se))
    return RateFit("exp", t, v, se, float(coef[1]), float(cse[1]), float(coef[0]), r2, fl)


@dataclass
class JointFit:
    a: float
    a_se: float
    c: float
    c_se: float
    log_C: float
    r2: float
    n_points: int

    def summary(self) -> dict:
        return dict(a=self.a, a_se=self.a_se, c=self.c, c_se=self.c_se, log_C=self.log_C,
                    r2=self.r2, n_points=self.n_points)


def fit_joint(N, t, values, stderr=None) -> JointFit:
    """Fit ``log E = log C - a log N - c t``."""
    N = np.asarray(N, dtype=float)
    t = np.asarray(t, dtype=float)
    if N.size < 4:
        raise EstimationError("need at least 4 points for a joint fit")
    v, se, _ = _prepare(values, stderr)
    X = np.column_stack([np.ones_like(N), -np.log(N), -t])
    coef, cse, r2 = _wls(X, np.log(v), _log_weights(v, se))
    return JointFit(float(coef[1]), float(cse[1]), float(coef[2]), float(cse[2]),
                    float(coef[0]), r2, int(N.size))


def calibrate_power_law_fitter(trials: int = 1000, noise: float = 0.05, seed: int = 0,
                               band: tuple[float, float] = (-1.15, -0.85),
                               N: Sequence[int] = (32, 64, 128, 256, 512)) -> float:
    """Fraction of synthetic ``N^{-1}(1 + noise)`` trials whose fitted exponent is in ``band``."""
    rng = np.random.default_rng(seed)
    N = np.asarray(N, dtype=float)
    hits = 0
    for _ in range(trials):
        v = N ** -1.0 * (1 + noise * rng.standard_normal(N.size))
        f = fit_power_law(N, v, noise * N ** -1.0)
        hits += band[0] <= f.exponent <= band[1]
    return hits / trials


# --- hierarchy residual ------------------------------------------------------------------------

def bbgky_residual_m1(times: Sequence[float], F1: Sequence[GridField], F2: Sequence[GridField],
                      kernel: KernelSpec, kappa: float, N: int | None = None,
                      ell: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """H^{-ell} norm of the one-particle hierarchy defect at interior observation times.

    ``d_t F1 - d_xx F1 + kappa (N-1)/N d_x int K(x, y) F2(x, y) dy + kappa/N d_x (K(x, x) F1)``
    with centered time differences and spectral derivatives.  ``N=None``
    selects the mean-field limit.  Returns ``(interior_times, norms)``.
    """
    if len(times) < 3 or len(F1) != len(times) or len(F2) != len(times):
        raise EstimationError("need at least 3 matching observation times")
    if kernel.domain != "torus" or kernel.d != 1:
        raise EstimationError("the residual is implemented on the 1-torus")
    n = F1[0].values.shape[0]
    k = np.fft.fftfreq(n) * n
    ik = 2j * np.pi * k
    shift = np.exp(-1j * np.pi * k / n)      # cell centers sit at (j + 1/2)/n
    from .meanfield import force_hat_1d
    Khat = force_hat_1d(kernel, k.astype(int))
    if n % 2 == 0:
        Khat[n // 2] = 0.0
    a = 1.0 if N is None else (N - 1) / N
    b = 0.0 if N is None else 1.0 / N
    k0 = float(kernel.force0(np.zeros((1, 1)))[0, 0])
    x = (np.arange(n) + 0.5) / n

    def dx(u):
        return np.fft.ifft(ik * np.fft.fft(u)).real

    out_t, out = [], []
    for j in range(1, len(times) - 1):
        dt_f = (F1[j + 1].values - F1[j - 1].values) / (times[j + 1] - times[j - 1])
        f1 = F1[j].values
        lap = np.fft.ifft(ik ** 2 * np.fft.fft(f1)).real
        # int K_0(x - y) F2(x, y) dy = sum_l K_hat(l) e^{2 pi i l x} F2_hat_y(x, l)
        f2y = np.fft.fft(F2[j].values, axis=1) / n * shift[None, :]
        conv = (f2y * Khat[None, :] * np.exp(2j * np.pi * np.outer(x, k))).sum(axis=1).real
        res = dt_f - lap + kappa * a * dx(conv) + kappa * b * k0 * dx(f1)
        out_t.append(times[j])
        out.append(sobolev_neg_norm(GridField(1, F1[j].grid, res), ell))
    return np.asarray(out_t), np.asarray(out)
