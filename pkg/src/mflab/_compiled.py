"""Compiled inner loops: interaction sums, integrator blocks, Metropolis sweeps.

All loops release the GIL so realization blocks can run on Python threads.
Interaction sums visit partners in sorted-position order, which makes the
result independent of particle labels bit for bit.
"""
from __future__ import annotations

import math

import numba as nb
import numpy as np

METHOD_PAIRWISE = 0
METHOD_SORTED = 1
METHOD_FOURIER = 2

_TWO_PI = 2.0 * math.pi


@nb.njit(cache=True, nogil=True)
def wrap(y):
    y = y - math.floor(y)
    if y >= 1.0:
        y -= 1.0
    return y


@nb.njit(cache=True, nogil=True)
def minimal_image(d):
    return d - math.floor(d + 0.5)


@nb.njit(cache=True, nogil=True)
def pair_force(kind, prm, dx, out):
    """K_0(dx) into ``out`` for the closed-form kinds."""
    d = dx.shape[0]
    for a in range(d):
        out[a] = 0.0
    if kind == 1:
        rho2 = 0.0
        for a in range(d):
            rho2 += dx[a] * dx[a]
        rho = math.sqrt(rho2)
        ell = prm[0]
        r = prm[1]
        if rho > 0.0 and rho < r:
            mag = 2.0 * (ell - rho) / rho
            for a in range(d):
                out[a] = mag * dx[a]
    elif kind == 2:
        rho2 = 0.0
        for a in range(d):
            rho2 += dx[a] * dx[a]
        rho = math.sqrt(rho2)
        den = rho ** d + prm[0]
        for a in range(d):
            out[a] = dx[a] / den
    elif kind == 3:
        s1 = _TWO_PI * dx[0]
        s2 = _TWO_PI * dx[1]
        out[0] = -_TWO_PI * math.sin(s1) * math.cos(s2)
        out[1] = _TWO_PI * math.cos(s1) * math.sin(s2)


@nb.njit(cache=True, nogil=True)
def pair_potential(kind, prm, dx):
    d = dx.shape[0]
    rho2 = 0.0
    for a in range(d):
        rho2 += dx[a] * dx[a]
    rho = math.sqrt(rho2)
    if kind == 1:
        ell = prm[0]
        r = prm[1]
        if rho <= r:
            return (rho - ell) ** 2 - (r - ell) ** 2
        return 0.0
    if kind == 2:
        s = prm[0]
        if d == 1:
            return -rho + s * math.log1p(rho / s)
        return -0.5 * math.log1p(rho2 / s)
    return 0.0


@nb.njit(cache=True, nogil=True)
def drift_pairwise(x, kind, prm, torus, out):
    n, d = x.shape
    order = np.argsort(x[:, 0])
    dx = np.empty(d)
    f = np.empty(d)
    for i in range(n):
        for a in range(d):
            out[i, a] = 0.0
        for jj in range(n):
            j = order[jj]
            for a in range(d):
                v = x[i, a] - x[j, a]
                if torus:
                    v = minimal_image(v)
                dx[a] = v
            pair_force(kind, prm, dx, f)
            for a in range(d):
                out[i, a] += f[a]


@nb.njit(cache=True, nogil=True)
def drift_sorted_pl(x, ell, r, torus, out):
    """Exact interaction sum for the piecewise-linear radial force in d=1.

    For 0 < |x_i - x_j| < r the force is 2 ell - 2 (x_i - x_j) on the left
    and -2 ell + 2 (x_j - x_i) on the right, so windowed counts and prefix
    sums of sorted positions give the sum in O(N log N).
    """
    n = x.shape[0]
    order = np.argsort(x[:, 0])
    xs = x[order, 0]
    if torus:
        ext = np.empty(3 * n)
        ext[:n] = xs - 1.0
        ext[n:2 * n] = xs
        ext[2 * n:] = xs + 1.0
        w = min(r, 0.5)
    else:
        ext = xs.copy()
        w = r
    cs = np.zeros(ext.shape[0] + 1)
    for i in range(ext.shape[0]):
        cs[i + 1] = cs[i] + ext[i]
    a = 2.0 * ell
    for ii in range(n):
        xi = xs[ii]
        lo = np.searchsorted(ext, xi - w, side="right")
        l1 = np.searchsorted(ext, xi, side="left")
        r0 = np.searchsorted(ext, xi, side="right")
        hi = np.searchsorted(ext, xi + w, side="left")
        nl = l1 - lo
        sl = cs[l1] - cs[lo]
        nr = hi - r0
        sr = cs[hi] - cs[r0]
        out[order[ii], 0] = nl * (a - 2.0 * xi) + 2.0 * sl + nr * (-a - 2.0 * xi) + 2.0 * sr


@nb.njit(cache=True, nogil=True)
def drift_fourier(x, modes, coefs, out):
    """Interaction sum for ``W = sum_k c_k cos(2 pi k.x)`` over half-space modes."""
    n, d = x.shape
    m = modes.shape[0]
    order = np.argsort(x[:, 0])
    for i in range(n):
        for a in range(d):
            out[i, a] = 0.0
    sn = np.empty(n)
    cn = np.empty(n)
    for q in range(m):
        for i in range(n):
            ph = 0.0
            for a in range(d):
                ph += modes[q, a] * x[i, a]
            ph *= _TWO_PI
            sn[i] = math.sin(ph)
            cn[i] = math.cos(ph)
        C = 0.0
        S = 0.0
        for jj in range(n):
            j = order[jj]
            C += cn[j]
            S += sn[j]
        for i in range(n):
            g = coefs[q] * (sn[i] * C - cn[i] * S) * _TWO_PI
            for a in range(d):
                out[i, a] += g * modes[q, a]


@nb.njit(cache=True, nogil=True)
def interaction_sum(x, method, kind, prm, modes, coefs, torus, out):
    if kind == 0:
        out[:, :] = 0.0
    elif method == 1:
        drift_sorted_pl(x, prm[0], prm[1], torus, out)
    elif method == 2:
        drift_fourier(x, modes, coefs, out)
    else:
        drift_pairwise(x, kind, prm, torus, out)


@nb.njit(cache=True, nogil=True)
def overdamped_block(x, noise, dt, kappa, lam, torus, method, kind, prm, modes, coefs):
    """Euler-Maruyama steps for a block of realizations, in place.

    x: (R, N, d); noise: (R, S, N, d) standard normals.
    """
    R, n, d = x.shape
    S = noise.shape[1]
    f = np.empty((n, d))
    c = kappa / n
    sq = math.sqrt(2.0 * dt)
    for q in range(R):
        xq = x[q]
        for s in range(S):
            interaction_sum(xq, method, kind, prm, modes, coefs, torus, f)
            for i in range(n):
                for a in range(d):
                    y = xq[i, a] + dt * (c * f[i, a] - lam * xq[i, a]) + sq * noise[q, s, i, a]
                    if torus:
                        y = wrap(y)
                    xq[i, a] = y


@nb.njit(cache=True, nogil=True)
def underdamped_block(x, v, noise, dt, kappa, lam, beta, torus, method, kind, prm, modes, coefs):
    """Kick / exact OU / drift / kick splitting, in place.

    The OU substep is ``v <- e^{-beta dt} v + sqrt((1 - e^{-2 beta dt}) / beta) xi``.
    """
    R, n, d = x.shape
    S = noise.shape[1]
    f = np.empty((n, d))
    c = kappa / n
    c1 = math.exp(-beta * dt)
    c2 = math.sqrt((1.0 - c1 * c1) / beta)
    h = 0.5 * dt
    for q in range(R):
        xq = x[q]
        vq = v[q]
        interaction_sum(xq, method, kind, prm, modes, coefs, torus, f)
        for s in range(S):
            for i in range(n):
                for a in range(d):
                    vq[i, a] += h * (c * f[i, a] - lam * xq[i, a])
                    vq[i, a] = c1 * vq[i, a] + c2 * noise[q, s, i, a]
                    y = xq[i, a] + dt * vq[i, a]
                    if torus:
                        y = wrap(y)
                    xq[i, a] = y
            interaction_sum(xq, method, kind, prm, modes, coefs, torus, f)
            for i in range(n):
                for a in range(d):
                    vq[i, a] += h * (c * f[i, a] - lam * xq[i, a])


# --- Metropolis ------------------------------------------------------------------

@nb.njit(cache=True, nogil=True)
def one_body_energy(x, i, y, kind, prm, torus, lam):
    """sum_{j != i} W(y - x_j) + A(y) / (coupling scale handled by caller)."""
    n, d = x.shape
    dx = np.empty(d)
    acc = 0.0
    for j in range(n):
        if j == i:
            continue
        for a in range(d):
            v = y[a] - x[j, a]
            if torus:
                v = minimal_image(v)
            dx[a] = v
        acc += pair_potential(kind, prm, dx)
    return acc


@nb.njit(cache=True, nogil=True)
def metropolis_block(x, steps, n_sweeps, pick, prop, unif, kappa, beta, lam, torus,
                     kind, prm, modes, coefs, accepted):
    """Random-scan single-site Metropolis sweeps, in place.

    x: (R, N, d); steps: (R,) proposal half-widths; pick: (R, n_sweeps, N) ints;
    prop: (R, n_sweeps, N, d) uniforms on [-1, 1); unif: (R, n_sweeps, N).
    Target density is exp(-beta [sum_i A(x_i) + kappa/(2N) sum_{i,j} W(x_i - x_j)]).
    accepted: (R,) counts incremented in place.
    """
    R, n, d = x.shape
    coup = beta * kappa / n   # the pair (i, j) and (j, i) both contain x_i
    m = modes.shape[0]
    y = np.empty(d)
    for q in range(R):
        xq = x[q]
        use_fourier = kind == 4
        Cs = np.zeros(m)
        Ss = np.zeros(m)
        for s in range(n_sweeps):
            if use_fourier:
                for k in range(m):
                    C = 0.0
                    S = 0.0
                    for j in range(n):
                        ph = 0.0
                        for a in range(d):
                            ph += modes[k, a] * xq[j, a]
                        ph *= _TWO_PI
                        C += math.cos(ph)
                        S += math.sin(ph)
                    Cs[k] = C
                    Ss[k] = S
            for t in range(n):
                i = pick[q, s, t]
                for a in range(d):
                    val = xq[i, a] + steps[q] * prop[q, s, t, a]
                    if torus:
                        val = wrap(val)
                    y[a] = val
                if use_fourier:
                    dE = 0.0
                    for k in range(m):
                        p0 = 0.0
                        p1 = 0.0
                        for a in range(d):
                            p0 += modes[k, a] * xq[i, a]
                            p1 += modes[k, a] * y[a]
                        p0 *= _TWO_PI
                        p1 *= _TWO_PI
                        c0 = math.cos(p0)
                        s0 = math.sin(p0)
                        Co = Cs[k] - c0
                        So = Ss[k] - s0
                        dE += coefs[k] * ((math.cos(p1) - c0) * Co + (math.sin(p1) - s0) * So)
                else:
                    dE = (one_body_energy(xq, i, y, kind, prm, torus, lam)
                          - one_body_energy(xq, i, xq[i], kind, prm, torus, lam))
                dE *= coup
                if lam > 0.0:
                    a2 = 0.0
                    b2 = 0.0
                    for a in range(d):
                        a2 += y[a] * y[a]
                        b2 += xq[i, a] * xq[i, a]
                    dE += beta * 0.5 * lam * (a2 - b2)
                if dE <= 0.0 or unif[q, s, t] < math.exp(-dE):
                    if use_fourier:
                        for k in range(m):
                            p0 = 0.0
                            p1 = 0.0
                            for a in range(d):
                                p0 += modes[k, a] * xq[i, a]
                                p1 += modes[k, a] * y[a]
                            Cs[k] += math.cos(_TWO_PI * p1) - math.cos(_TWO_PI * p0)
                            Ss[k] += math.sin(_TWO_PI * p1) - math.sin(_TWO_PI * p0)
                    for a in range(d):
                        xq[i, a] = y[a]
                    accepted[q] += 1
