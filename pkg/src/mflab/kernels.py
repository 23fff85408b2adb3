"""Interaction kernels, potentials, and confinement.

Forces are written as functions of the displacement ``dx = x - y``: every
kernel here is translation invariant except for the confinement, which is a
separate one-body potential ``A(x) = lam |x|^2 / 2``.  On the torus the
displacement is reduced to its minimal image before evaluation.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

TORUS = "torus"
WHOLE = "whole"
ALL_TAGS = ("bounded", "gradient", "translation-invariant", "divergence-free-odd", "h-stable")

# integer kinds understood by the compiled force loops
KIND_ZERO = 0
KIND_RADIAL_PL = 1   # piecewise-linear radial force: HK / Barre family
KIND_COULOMB_WS = 2  # whole-space mollified Coulomb
KIND_CURL = 3        # d=2 torus curl of sin(2 pi x1) sin(2 pi x2)
KIND_FOURIER = 4     # truncated Fourier series of W


class KernelError(ValueError):
    """Invalid kernel parameters or domain mismatch."""


@dataclass(frozen=True)
class Confinement:
    """Quadratic confinement ``A(x) = lam |x|^2 / 2`` with convexity constant ``lam``."""

    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise KernelError("confinement needs lam > 0")

    def potential(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return 0.5 * self.lam * np.sum(x * x, axis=-1)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.lam * np.asarray(x, dtype=float)


@dataclass(frozen=True)
class PotentialFourier:
    """Real, even Fourier coefficients ``W_hat(k)`` for ``k`` in ``[-k_max, k_max]^d``."""

    d: int
    k_max: int
    modes: np.ndarray   # (M, d) integer frequencies
    coeffs: np.ndarray  # (M,)

    def __post_init__(self):
        if np.any(np.abs(self.coeffs.imag if np.iscomplexobj(self.coeffs) else 0) > 0):
            raise KernelError("coefficients must be real for an even potential")

    def as_dict(self) -> dict[tuple[int, ...], float]:
        return {tuple(int(v) for v in k): float(c) for k, c in zip(self.modes, self.coeffs)}

    def min_coefficient(self) -> float:
        return float(np.min(self.coeffs))

    def half_space(self) -> tuple[np.ndarray, np.ndarray]:
        """Nonzero modes with first nonzero component positive, coefficients doubled."""
        keep = []
        for i, k in enumerate(self.modes):
            nz = np.nonzero(k)[0]
            if nz.size and k[nz[0]] > 0:
                keep.append(i)
        keep = np.array(keep, dtype=np.int64)
        return self.modes[keep].astype(np.float64), 2.0 * self.coeffs[keep]

    def evaluate(self, dx: np.ndarray) -> np.ndarray:
        dx = np.asarray(dx, dtype=float)
        modes, c = self.half_space()
        zero = self.coeffs[np.all(self.modes == 0, axis=1)]
        phase = 2 * np.pi * dx @ modes.T
        return np.cos(phase) @ c + (zero[0] if zero.size else 0.0)

    def force(self, dx: np.ndarray) -> np.ndarray:
        dx = np.asarray(dx, dtype=float)
        modes, c = self.half_space()
        phase = 2 * np.pi * dx @ modes.T
        return (np.sin(phase) * c) @ (2 * np.pi * modes)

    def decay(self) -> float:
        """Ratio of the largest coefficient at |k| = k_max to the largest overall."""
        edge = np.max(np.abs(self.modes), axis=1) == self.k_max
        top = np.max(np.abs(self.coeffs))
        return float(np.max(np.abs(self.coeffs[edge])) / top) if top > 0 else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# mflab-fourier-v1\n")
            w = csv.writer(fh)
            w.writerow([f"k{i}" for i in range(self.d)] + ["W_hat"])
            for k, c in zip(self.modes, self.coeffs):
                w.writerow([int(v) for v in k] + [repr(float(c))])


@dataclass(frozen=True)
class KernelSpec:
    """Declarative kernel description; immutable after construction."""

    name: str
    params: Mapping[str, float]
    domain: str
    d: int
    tags: frozenset
    fourier: PotentialFourier | None = None
    confinement: Confinement | None = None

    def __post_init__(self):
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))
        object.__setattr__(self, "tags", frozenset(self.tags))
        if self.domain not in (TORUS, WHOLE):
            raise KernelError(f"unknown domain {self.domain!r}")
        if self.domain == TORUS and self.confinement is not None:
            raise KernelError("torus kernels carry no confinement")

    # -- evaluation ----------------------------------------------------------
    def reduce(self, dx: np.ndarray) -> np.ndarray:
        """Minimal-image displacement on the torus, identity in whole space."""
        dx = np.asarray(dx, dtype=float)
        if self.domain == TORUS:
            return dx - np.round(dx)
        return dx

    def force0(self, dx: np.ndarray) -> np.ndarray:
        """Two-body force ``K_0(dx)`` for displacements ``dx[..., d]``."""
        dx = self.reduce(dx)
        return _FORCES[self.name](self, dx)

    def potential(self, dx: np.ndarray) -> np.ndarray:
        """Interaction potential ``W(dx)``; only for gradient kernels."""
        if "gradient" not in self.tags:
            raise KernelError(f"kernel {self.name!r} has no potential")
        dx = self.reduce(dx)
        return _POTENTIALS[self.name](self, dx)

    @property
    def has_potential(self) -> bool:
        return "gradient" in self.tags

    def sup_bound(self, n: int = 10_000, seed: int = 0) -> float:
        """Sup-norm estimate of ``|K_0|`` over ``n`` sample displacements."""
        rng = np.random.default_rng(seed)
        if self.domain == TORUS:
            pts = rng.uniform(-0.5, 0.5, (n, self.d))
        else:
            pts = rng.uniform(-5.0, 5.0, (n, self.d))
        pts[0] = 0.0
        vals = np.linalg.norm(self.force0(pts), axis=-1)
        return float(np.max(vals))

    def w_sup(self, n: int = 10_000) -> float:
        """Sup norm of ``W`` on a regular sample (torus) or on ``[-5, 5]``."""
        if self.d == 1:
            lo = -0.5 if self.domain == TORUS else -5.0
            x = np.linspace(lo, -lo, n + 1)[:, None]
        else:
            g = np.linspace(-0.5, 0.5, int(np.sqrt(n)) + 1)
            x = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
        return float(np.max(np.abs(self.potential(x))))

    def fourier_coefficients(self, k_max: int) -> PotentialFourier:
        """Fourier coefficients of ``W`` on the torus up to ``k_max``."""
        if self.domain != TORUS or not self.has_potential:
            raise KernelError("Fourier coefficients need a gradient torus kernel")
        modes = _mode_grid(self.d, k_max)
        if self.name in _CLOSED_FOURIER:
            c = _CLOSED_FOURIER[self.name](self, modes)
        else:
            c = _fft_coefficients(self, modes, k_max)
        return PotentialFourier(self.d, k_max, modes, c)

    def kernel_hat_1d(self, k: np.ndarray) -> np.ndarray:
        """``W_hat(k)`` for integer ``k`` in d=1 (closed form when available)."""
        k = np.asarray(k)
        modes = k.reshape(-1, 1)
        if self.name in _CLOSED_FOURIER:
            return _CLOSED_FOURIER[self.name](self, modes).reshape(k.shape)
        return _fft_coefficients(self, modes, int(np.max(np.abs(k)))).reshape(k.shape)

    # -- compiled-loop handles -------------------------------------------------
    def numba_kind(self) -> tuple[int, np.ndarray]:
        p = self.params
        if self.name == "zero":
            return KIND_ZERO, np.zeros(2)
        if self.name in ("hegselmann_krause", "barre"):
            ell = p["r"] if self.name == "hegselmann_krause" else p["ell"]
            return KIND_RADIAL_PL, np.array([ell, p["r"]])
        if self.name == "mollified_coulomb":
            return KIND_COULOMB_WS, np.array([p["sigma"], 0.0])
        if self.name == "curl":
            return KIND_CURL, np.zeros(2)
        if self.fourier is not None:
            return KIND_FOURIER, np.zeros(2)
        raise KernelError(f"no compiled force for kernel {self.name!r}")

    def to_config(self) -> dict:
        cfg = {"name": self.name, **{k: v for k, v in self.params.items()}}
        if self.name not in ("mollified_coulomb_torus",):
            cfg["domain"] = self.domain
        cfg["d"] = self.d
        return cfg


def _mode_grid(d: int, k_max: int) -> np.ndarray:
    r = range(-k_max, k_max + 1)
    return np.array(list(itertools.product(r, repeat=d)), dtype=np.int64)


# --- closed forms -------------------------------------------------------------

def _radial(dx):
    return np.sqrt(np.sum(dx * dx, axis=-1))


def _pl_params(spec):
    r = spec.params["r"]
    ell = r if spec.name == "hegselmann_krause" else spec.params["ell"]
    return ell, r


def _pl_potential(spec, dx):
    ell, r = _pl_params(spec)
    rho = _radial(dx)
    return np.where(rho <= r, (rho - ell) ** 2 - (r - ell) ** 2, 0.0)


def _pl_force(spec, dx):
    # K_0 = -W'(rho) dx/rho = 2 (ell - rho) dx / rho on 0 < rho < r, else 0
    ell, r = _pl_params(spec)
    rho = _radial(dx)
    inside = (rho > 0) & (rho < r)
    safe = np.where(inside, rho, 1.0)
    mag = np.where(inside, 2.0 * (ell - rho) / safe, 0.0)
    return mag[..., None] * dx


def _pl_fourier(spec, modes):
    ell, r = _pl_params(spec)
    if spec.d != 1:
        return _fft_coefficients(spec, modes, int(np.max(np.abs(modes))))
    w = 2 * np.pi * np.abs(modes[:, 0]).astype(float)
    out = np.empty(w.shape)
    z = w == 0
    out[z] = 2.0 * (((r - ell) ** 3 + ell ** 3) / 3.0 - r * (r - ell) ** 2)
    wn = w[~z]
    out[~z] = (4.0 * ((r - ell) * np.cos(wn * r) + ell) / wn ** 2
               - 4.0 * np.sin(wn * r) / wn ** 3)
    return out


def _coulomb_ws_force(spec, dx):
    rho = _radial(dx)
    return dx / (rho ** spec.d + spec.params["sigma"])[..., None]


def _coulomb_ws_potential(spec, dx):
    s = spec.params["sigma"]
    rho = _radial(dx)
    if spec.d == 1:
        return -rho + s * np.log1p(rho / s)
    return -0.5 * np.log1p(rho ** 2 / s)


def _fourier_force(spec, dx):
    return spec.fourier.force(dx)


def _fourier_potential(spec, dx):
    return spec.fourier.evaluate(dx)


def _mollified_coulomb_fourier(spec, modes):
    s = spec.params["sigma"]
    k2 = np.sum(modes.astype(float) ** 2, axis=1)
    out = np.zeros(k2.shape)
    nz = k2 > 0
    out[nz] = np.exp(-2 * np.pi ** 2 * s ** 2 * k2[nz]) / (4 * np.pi ** 2 * k2[nz])
    return out


def _curl_force(spec, dx):
    # psi = sin(2 pi x1) sin(2 pi x2); K_0 = (-d2 psi, d1 psi)
    a, b = 2 * np.pi * dx[..., 0], 2 * np.pi * dx[..., 1]
    f1 = -2 * np.pi * np.sin(a) * np.cos(b)
    f2 = 2 * np.pi * np.cos(a) * np.sin(b)
    return np.stack([f1, f2], axis=-1)


def _zero_force(spec, dx):
    return np.zeros_like(dx)


def _zero_potential(spec, dx):
    return np.zeros(dx.shape[:-1])


_FORCES = {
    "hegselmann_krause": _pl_force,
    "barre": _pl_force,
    "mollified_coulomb": _coulomb_ws_force,
    "mollified_coulomb_torus": _fourier_force,
    "curl": _curl_force,
    "zero": _zero_force,
}
_POTENTIALS = {
    "hegselmann_krause": _pl_potential,
    "barre": _pl_potential,
    "mollified_coulomb": _coulomb_ws_potential,
    "mollified_coulomb_torus": _fourier_potential,
    "zero": _zero_potential,
}
_CLOSED_FOURIER = {
    "hegselmann_krause": _pl_fourier,
    "barre": _pl_fourier,
    "mollified_coulomb_torus": _mollified_coulomb_fourier,
    "zero": lambda spec, modes: np.zeros(len(modes)),
}


def _fft_coefficients(spec, modes, k_max, n: int = 4096):
    """Coefficients from an FFT of ``W`` sampled on a regular torus grid."""
    if spec.d == 1:
        x = np.arange(n) / n
        w = spec.potential(x[:, None])
        c = np.fft.fft(w).real / n
        return c[np.mod(modes[:, 0], n)]
    n2 = max(128, 4 * k_max)
    g = np.arange(n2) / n2
    X = np.stack(np.meshgrid(g, g, indexing="ij"), -1)
    c = np.fft.fft2(spec.potential(X)).real / n2 ** 2
    return c[np.mod(modes[:, 0], n2), np.mod(modes[:, 1], n2)]


# --- builders -----------------------------------------------------------------

def build_hegselmann_krause(r: float, d: int = 1, domain: str = TORUS,
                            confinement: Confinement | None = None) -> KernelSpec:
    """Bounded-confidence potential ``W = (|x| - r)^2`` on ``|x| <= r``."""
    if not r > 0:
        raise KernelError("hegselmann_krause needs r > 0")
    if domain == TORUS and r > 0.5:
        raise KernelError("torus kernels need r <= 1/2 so the support fits the cell")
    return KernelSpec("hegselmann_krause", {"r": float(r)}, domain, d,
                      {"bounded", "gradient", "translation-invariant"},
                      confinement=confinement)


def build_barre(r: float, ell: float, d: int = 1, domain: str = TORUS,
                confinement: Confinement | None = None) -> KernelSpec:
    """Network potential ``W = (|x| - ell)^2 - (r - ell)^2`` on ``|x| <= r``."""
    if not (r >= ell > 0):
        raise KernelError("barre needs r >= ell > 0")
    if domain == TORUS and r > 0.5:
        raise KernelError("torus kernels need r <= 1/2 so the support fits the cell")
    return KernelSpec("barre", {"r": float(r), "ell": float(ell)}, domain, d,
                      {"bounded", "gradient", "translation-invariant"},
                      confinement=confinement)


def build_mollified_coulomb_torus(sigma: float, k_max: int | None = None,
                                  d: int = 1) -> KernelSpec:
    """Coulomb potential smoothed by a periodized Gaussian of width ``sigma``.

    ``W_hat(k) = exp(-2 pi^2 sigma^2 |k|^2) / (4 pi^2 |k|^2)`` with ``W_hat(0) = 0``.
    """
    if not sigma > 0:
        raise KernelError("mollified Coulomb needs sigma > 0")
    if d not in (1, 2):
        raise KernelError("mollified Coulomb torus kernel supports d in {1, 2}")
    if k_max is None:
        k_max = 64 if d == 1 else 32
    spec = KernelSpec("mollified_coulomb_torus", {"sigma": float(sigma), "k_max": int(k_max)},
                      TORUS, d, {"bounded", "gradient", "translation-invariant", "h-stable"})
    modes = _mode_grid(d, k_max)
    four = PotentialFourier(d, k_max, modes, _mollified_coulomb_fourier(spec, modes))
    object.__setattr__(spec, "fourier", four)
    return spec


def build_mollified_coulomb(sigma: float, d: int = 1, lam: float = 1.0) -> KernelSpec:
    """Whole-space ``K(x, y) = (x - y) / (|x - y|^d + sigma)`` with quadratic confinement."""
    if not sigma > 0:
        raise KernelError("mollified Coulomb needs sigma > 0")
    return KernelSpec("mollified_coulomb", {"sigma": float(sigma)}, WHOLE, d,
                      {"bounded", "gradient", "translation-invariant"},
                      confinement=Confinement(lam))


def build_curl_torus() -> KernelSpec:
    """Divergence-free odd kernel on the 2-torus from ``psi = sin sin``."""
    return KernelSpec("curl", {}, TORUS, 2,
                      {"bounded", "translation-invariant", "divergence-free-odd"})


def build_zero(d: int = 1, domain: str = TORUS, confinement: Confinement | None = None
               ) -> KernelSpec:
    """No interaction; useful for the factorization and calibration arms."""
    return KernelSpec("zero", {}, domain, d,
                      {"bounded", "gradient", "translation-invariant", "h-stable"},
                      confinement=confinement)


_BUILDERS = {
    "hegselmann_krause": (build_hegselmann_krause, ("r",)),
    "barre": (build_barre, ("r", "ell")),
    "mollified_coulomb_torus": (build_mollified_coulomb_torus, ("sigma",)),
    "mollified_coulomb": (build_mollified_coulomb, ("sigma",)),
    "curl": (build_curl_torus, ()),
    "zero": (build_zero, ()),
}
_OPTIONAL = {
    "hegselmann_krause": ("d", "domain", "lam"),
    "barre": ("d", "domain", "lam"),
    "mollified_coulomb_torus": ("k_max", "d"),
    "mollified_coulomb": ("d", "lam"),
    "curl": ("d", "domain"),
    "zero": ("d", "domain", "lam"),
}


def kernel_from_config(cfg: Mapping) -> KernelSpec:
    """Build a kernel from ``{name: ..., <params>}``; missing keys name themselves."""
    cfg = dict(cfg)
    if "name" not in cfg:
        raise KernelError("kernel.name: missing required parameter")
    name = cfg.pop("name")
    if name not in _BUILDERS:
        raise KernelError(f"kernel.name: unknown kernel {name!r}")
    fn, required = _BUILDERS[name]
    for key in required:
        if key not in cfg:
            raise KernelError(f"kernel.{key}: missing required parameter")
    allowed = set(required) | set(_OPTIONAL[name])
    extra = set(cfg) - allowed
    if extra:
        raise KernelError(f"kernel.{sorted(extra)[0]}: unknown parameter")
    lam = cfg.pop("lam", None)
    if name == "curl":
        return fn()
    if name in ("hegselmann_krause", "barre", "zero"):
        conf = Confinement(lam) if lam is not None else None
        return fn(**cfg, confinement=conf)
    if name == "mollified_coulomb":
        return fn(**cfg, **({"lam": lam} if lam is not None else {}))
    return fn(**cfg)


def eval_force(spec: KernelSpec, x, y) -> np.ndarray:
    """``K(x, y)`` with minimal-image reduction on the torus."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape[-1] != spec.d or y.shape[-1] != spec.d:
        raise KernelError(f"points must have {spec.d} components")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise KernelError("points must be finite")
    if spec.domain == TORUS:
        x = np.mod(x, 1.0)
        y = np.mod(y, 1.0)
    return spec.force0(x - y)


# --- class predicates -------------------------------------------------------------

@dataclass
class TagCheck:
    declared: bool
    passed: bool
    value: float
    detail: str = ""


@dataclass
class CaseReport:
    kernel: str
    checks: dict[str, TagCheck] = field(default_factory=dict)
    sup_bound: float = float("nan")
    min_fourier: float | None = None
    relaxed_h_stability: float | None = None

    def declared_ok(self) -> bool:
        return all(c.passed for c in self.checks.values() if c.declared)

    def summary(self) -> str:
        lines = [f"kernel {self.kernel}"]
        for tag, c in self.checks.items():
            mark = "holds" if c.passed else "absent"
            if c.declared and not c.passed:
                mark += " MISMATCH"
            lines.append(f"  {tag:22s} declared={c.declared!s:5s} {mark} ({c.value:.3e}) {c.detail}")
        if self.relaxed_h_stability is not None:
            lines.append(f"  1 + 2 kappa inf W_hat = {self.relaxed_h_stability:.6g}")
        return "\n".join(lines)


def _sample_points(spec, n, rng):
    if spec.domain == TORUS:
        return rng.uniform(-0.5, 0.5, (n, spec.d))
    return rng.uniform(-3.0, 3.0, (n, spec.d))


def _avoid_kinks(spec, pts, margin=1e-3):
    if spec.name not in ("hegselmann_krause", "barre"):
        return pts
    _, r = _pl_params(spec)
    rho = _radial(pts)
    keep = (np.abs(rho - r) > margin) & (rho > margin)
    return pts[keep]


def check_case_tags(spec: KernelSpec, kappa: float | None = None, seed: int = 0,
                    n_points: int = 100) -> CaseReport:
    """Numerically verify the class predicates of a kernel."""
    rng = np.random.default_rng(seed)
    rep = CaseReport(spec.name)
    rep.sup_bound = spec.sup_bound()
    rep.checks["bounded"] = TagCheck("bounded" in spec.tags, bool(np.isfinite(rep.sup_bound)),
                                     rep.sup_bound, "sup over 1e4 samples")
    # gradient: central differences of W reproduce -K
    pts = _avoid_kinks(spec, _sample_points(spec, 4 * n_points, rng))[:n_points]
    if spec.has_potential:
        h = 1e-6
        worst = 0.0
        K = spec.force0(pts)
        for a in range(spec.d):
            e = np.zeros(spec.d)
            e[a] = h
            dW = (spec.potential(pts + e) - spec.potential(pts - e)) / (2 * h)
            scale = np.maximum(np.abs(K[:, a]), 1.0)
            worst = max(worst, float(np.max(np.abs(-dW - K[:, a]) / scale)))
        rep.checks["gradient"] = TagCheck("gradient" in spec.tags, worst <= 1e-6, worst,
                                          "max relative FD defect")
    else:
        rep.checks["gradient"] = TagCheck("gradient" in spec.tags, False, float("nan"),
                                          "no potential")
    # translation invariance of K(x, y)
    x = _sample_points(spec, n_points, rng)
    y = _sample_points(spec, n_points, rng)
    c = _sample_points(spec, n_points, rng)
    ti = float(np.max(np.abs(eval_force(spec, x + c, y + c) - eval_force(spec, x, y))))
    rep.checks["translation-invariant"] = TagCheck("translation-invariant" in spec.tags,
                                                   ti <= 1e-9, ti, "max |K(x+c,y+c)-K(x,y)|")
    # odd + divergence-free
    odd = float(np.max(np.abs(spec.force0(-pts) + spec.force0(pts))))
    h = 1e-5
    div = np.zeros(len(pts))
    for a in range(spec.d):
        e = np.zeros(spec.d)
        e[a] = h
        div += (spec.force0(pts + e)[:, a] - spec.force0(pts - e)[:, a]) / (2 * h)
    scale = max(1.0, rep.sup_bound)
    dv = float(np.max(np.abs(div))) / scale
    rep.checks["divergence-free-odd"] = TagCheck("divergence-free-odd" in spec.tags,
                                                 odd <= 1e-12 and dv <= 1e-6, max(odd, dv),
                                                 "oddness and scaled divergence")
    # h-stability
    if spec.domain == TORUS and spec.has_potential:
        if spec.d == 1:
            x = np.arange(4096) / 4096
            coeffs = np.fft.fft(spec.potential(x[:, None])).real / 4096
            coeffs = coeffs[:2049]
        else:
            coeffs = spec.fourier_coefficients(16).coeffs
        mn = float(np.min(coeffs))
        rep.min_fourier = mn
        rep.checks["h-stable"] = TagCheck("h-stable" in spec.tags, mn >= -1e-12, mn,
                                          "min Fourier coefficient")
        if kappa is not None:
            rep.relaxed_h_stability = 1.0 + 2.0 * kappa * mn
    else:
        rep.checks["h-stable"] = TagCheck("h-stable" in spec.tags, False, float("nan"),
                                          "not a torus potential")
    return rep
