"""Uniform tensor grids and signed fields over m particle slots.

A :class:`Grid` describes the per-particle axes (positions, optionally
velocities).  A :class:`GridField` of order ``m`` stores values on the
``m``-fold tensor product of that grid, slot after slot, in row-major order.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_TAG = "mflab-gridfield-v1"
_MAGIC = b"MFGF"
_VERSION = 1


class GridError(ValueError):
    """Raised for shape or domain mismatches between grids and fields."""


@dataclass(frozen=True)
class Axis:
    """One uniform axis with ``cells`` cells on ``[lower, upper)``."""

    lower: float
    upper: float
    cells: int
    periodic: bool = False
    kind: str = "x"

    def __post_init__(self):
        if self.cells < 1:
            raise GridError("axis needs at least one cell")
        if not self.upper > self.lower:
            raise GridError("axis upper bound must exceed lower bound")
        if self.kind not in ("x", "v"):
            raise GridError(f"unknown axis kind {self.kind!r}")

    @property
    def width(self) -> float:
        return (self.upper - self.lower) / self.cells

    @property
    def length(self) -> float:
        return self.upper - self.lower

    @property
    def edges(self) -> np.ndarray:
        return self.lower + self.width * np.arange(self.cells + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.lower + self.width * (np.arange(self.cells) + 0.5)

    def cell_index(self, x: np.ndarray) -> np.ndarray:
        """Cell index of each coordinate; values outside a bounded axis get -1."""
        x = np.asarray(x, dtype=float)
        if self.periodic:
            u = np.mod((x - self.lower) / self.length, 1.0)
            idx = np.floor(u * self.cells).astype(np.int64)
            return np.minimum(idx, self.cells - 1)
        # rounding in (x - lower) / width can push x just below upper onto index cells
        inside = (x >= self.lower) & (x < self.upper)
        pos = np.floor((np.where(inside, x, self.lower) - self.lower) / self.width)
        idx = np.minimum(pos, self.cells - 1).astype(np.int64)
        idx[~inside] = -1
        return idx


@dataclass(frozen=True)
class Grid:
    """Tensor grid for a single particle: a tuple of axes."""

    axes: tuple[Axis, ...]

    def __post_init__(self):
        if len(self.axes) == 0:
            raise GridError("grid needs at least one axis")
        object.__setattr__(self, "axes", tuple(self.axes))

    @classmethod
    def torus(cls, cells: int, d: int = 1) -> "Grid":
        return cls(tuple(Axis(0.0, 1.0, cells, True, "x") for _ in range(d)))

    @classmethod
    def interval(cls, lower: float, upper: float, cells: int) -> "Grid":
        return cls((Axis(lower, upper, cells, False, "x"),))

    @classmethod
    def phase_space(cls, x_cells: int, v_max: float, v_cells: int) -> "Grid":
        return cls((Axis(0.0, 1.0, x_cells, True, "x"),
                    Axis(-v_max, v_max, v_cells, False, "v")))

    @property
    def k(self) -> int:
        """Axes per particle."""
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.cells for a in self.axes)

    @property
    def cell_volume(self) -> float:
        return float(np.prod([a.width for a in self.axes]))

    @property
    def periodic(self) -> bool:
        return all(a.periodic for a in self.axes if a.kind == "x")

    def position_axes(self) -> list[int]:
        return [i for i, a in enumerate(self.axes) if a.kind == "x"]

    def velocity_axes(self) -> list[int]:
        return [i for i, a in enumerate(self.axes) if a.kind == "v"]

    def mesh(self) -> list[np.ndarray]:
        """Cell-center coordinate arrays broadcast to :attr:`shape`."""
        return list(np.meshgrid(*[a.centers for a in self.axes], indexing="ij"))

    def flat_index(self, coords: np.ndarray) -> np.ndarray:
        """Flat cell index for points ``coords[..., k]``; -1 when outside."""
        coords = np.asarray(coords, dtype=float)
        if coords.shape[-1] != self.k:
            raise GridError(f"points have {coords.shape[-1]} axes, grid has {self.k}")
        flat = np.zeros(coords.shape[:-1], dtype=np.int64)
        bad = np.zeros(coords.shape[:-1], dtype=bool)
        for j, ax in enumerate(self.axes):
            idx = ax.cell_index(coords[..., j])
            bad |= idx < 0
            flat = flat * ax.cells + np.maximum(idx, 0)
        flat[bad] = -1
        return flat


@dataclass
class GridField:
    """Real values on the ``order``-fold tensor product of ``grid``.

    Axes are laid out slot by slot: the axes of slot ``s`` occupy positions
    ``s*k .. (s+1)*k - 1`` where ``k = grid.k``.
    """

    order: int
    grid: Grid
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.order < 1:
            raise GridError("order must be >= 1")
        self.values = np.asarray(self.values, dtype=float)
        expected = self.grid.shape * self.order
        if self.values.shape != expected:
            raise GridError(f"values shape {self.values.shape} != expected {expected}")

    # -- basic algebra -----------------------------------------------------
    @property
    def cell_volume(self) -> float:
        return self.grid.cell_volume ** self.order

    def copy(self) -> "GridField":
        return GridField(self.order, self.grid, self.values.copy(), dict(self.meta))

    def like(self, values: np.ndarray) -> "GridField":
        return GridField(self.order, self.grid, values)

    def __add__(self, other: "GridField") -> "GridField":
        self._check_compatible(other)
        return self.like(self.values + other.values)

    def __sub__(self, other: "GridField") -> "GridField":
        self._check_compatible(other)
        return self.like(self.values - other.values)

    def __mul__(self, c: float) -> "GridField":
        return self.like(self.values * c)

    __rmul__ = __mul__

    def _check_compatible(self, other: "GridField"):
        if other.order != self.order or other.grid != self.grid:
            raise GridError("fields live on different grids or orders")

    def mass(self) -> float:
        return float(self.values.sum() * self.cell_volume)

    def slot_axes(self, slot: int) -> tuple[int, ...]:
        k = self.grid.k
        return tuple(range(slot * k, (slot + 1) * k))

    def integrate_slot(self, slot: int) -> "GridField":
        """Midpoint quadrature over one particle slot."""
        if self.order < 2:
            raise GridError("cannot integrate out the only slot")
        v = self.values.sum(axis=self.slot_axes(slot)) * self.grid.cell_volume
        return GridField(self.order - 1, self.grid, v)

    def permute_slots(self, perm) -> "GridField":
        k = self.grid.k
        axes = [a for s in perm for a in range(s * k, (s + 1) * k)]
        return self.like(np.transpose(self.values, axes))

    def symmetrize(self) -> "GridField":
        """Average over all slot permutations."""
        perms = list(itertools.permutations(range(self.order)))
        acc = np.zeros_like(self.values)
        for p in perms:
            acc += self.permute_slots(p).values
        return self.like(acc / len(perms))

    def symmetry_defect(self) -> float:
        worst = 0.0
        for p in itertools.permutations(range(self.order)):
            worst = max(worst, float(np.max(np.abs(self.permute_slots(p).values - self.values))))
        return worst

    def outer(self, other: "GridField") -> "GridField":
        if other.grid != self.grid:
            raise GridError("outer product of fields on different grids")
        v = np.multiply.outer(self.values, other.values)
        return GridField(self.order + other.order, self.grid, v)

    # -- serialization -----------------------------------------------------
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<HII", _VERSION, self.order, self.grid.k))
        for ax in self.grid.axes:
            buf.write(struct.pack("<ddI?c", ax.lower, ax.upper, ax.cells, ax.periodic,
                                  ax.kind.encode()))
        buf.write(struct.pack("<d", self.grid.cell_volume))
        buf.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "GridField":
        if data[:4] != _MAGIC:
            raise GridError("not a grid field file")
        off = 4
        version, order, k = struct.unpack_from("<HII", data, off)
        if version != _VERSION:
            raise GridError(f"unsupported grid field version {version}")
        off += struct.calcsize("<HII")
        axes = []
        asz = struct.calcsize("<ddI?c")
        for _ in range(k):
            lo, hi, cells, per, kind = struct.unpack_from("<ddI?c", data, off)
            off += asz
            axes.append(Axis(lo, hi, cells, per, kind.decode()))
        off += 8  # cell volume, recomputed from axes
        grid = Grid(tuple(axes))
        vals = np.frombuffer(data, dtype="<f8", offset=off).reshape(grid.shape * order)
        return cls(order, grid, vals.astype(float))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "GridField":
        return cls.from_bytes(Path(path).read_bytes())

    def to_csv(self, path, max_cells: int = 10**6) -> None:
        if self.values.size > max_cells:
            raise GridError("grid too large for CSV export")
        centers = [ax.centers for ax in self.grid.axes] * self.order
        with open(path, "w", newline="") as fh:
            fh.write(f"# {FORMAT_TAG} order={self.order}\n")
            w = csv.writer(fh)
            w.writerow([f"z{i}" for i in range(len(centers))] + ["value"])
            for idx in np.ndindex(self.values.shape):
                w.writerow([repr(float(centers[a][i])) for a, i in enumerate(idx)]
                           + [repr(float(self.values[idx]))])


def cell_average_periodic(values: np.ndarray, cells: int) -> np.ndarray:
    """Exact cell averages of the trigonometric interpolant of periodic samples.

    ``values`` are samples at ``(j + 1/2)/n`` on the unit torus (last axis);
    the result holds averages over the ``cells`` equal cells of ``[0, 1)``.
    The Nyquist mode of an even ``n`` is split evenly between ``+-n/2``.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[-1]
    fh = np.fft.fft(values, axis=-1) / n
    k = np.rint(np.fft.fftfreq(n) * n)
    ks = [k]
    coefs = [fh * np.exp(-1j * np.pi * k / n)]
    if n % 2 == 0:
        nyq = n // 2
        w = np.ones(n)
        w[nyq] = 0.5
        coefs[0] = coefs[0] * w
        kp = np.array([float(nyq)])
        ks.append(kp)
        coefs.append(0.5 * fh[..., nyq:nyq + 1] * np.exp(-1j * np.pi * kp / n))
    h = 1.0 / cells
    left = np.arange(cells) * h
    out = np.zeros(values.shape[:-1] + (cells,))
    for kk, cc in zip(ks, coefs):
        factor = np.ones(kk.shape, dtype=complex)
        nz = kk != 0
        factor[nz] = (np.exp(2j * np.pi * kk[nz] * h) - 1.0) / (2j * np.pi * kk[nz] * h)
        phase = np.exp(2j * np.pi * np.multiply.outer(left, kk))
        out += np.einsum("...k,ck->...c", cc * factor, phase).real
    return out


def periodic_density_samples(fn, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample a callable on the spectral nodes ``(j+1/2)/n``."""
    x = (np.arange(n) + 0.5) / n
    return x, np.asarray(fn(x), dtype=float)


def bell_number(m: int) -> int:
    """Bell numbers by the triangle recursion (independent of enumeration)."""
    row = [1]
    for _ in range(m - 1):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[-1] if m >= 1 else 1


def falling_factorial(n: int, m: int) -> int:
    return math.perm(n, m)
