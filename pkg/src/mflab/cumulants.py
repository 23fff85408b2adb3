"""Set partitions and the marginal <-> correlation-function conversion.

Correlation functions are the Mobius-weighted partition sums

    G^m = sum_pi (#pi - 1)! (-1)^(#pi - 1) prod_{A in pi} F^{|A|}(z_A)

and the marginals are recovered by the cluster expansion
``F^m = sum_pi prod_{A in pi} G^{|A|}(z_A)``.
"""
from __future__ import annotations

import math
import string
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .grid import GridField

MAX_PARTITION_ORDER = 12
MAX_CUMULANT_ORDER = 6


class SizeLimitError(ValueError):
    """Partition order outside the combinatorial guard."""


class ConsistencyError(ValueError):
    """Marginals fail symmetry, normalization, or partial-integration checks."""

    def __init__(self, msg: str, pair: tuple[int, int] | None = None):
        super().__init__(msg)
        self.pair = pair


class ArityError(ValueError):
    """A correlation set is missing an order."""


@dataclass(frozen=True)
class Partition:
    """A set partition of ``{1..m}``; blocks sorted by their smallest element."""

    blocks: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen = [i for b in self.blocks for i in b]
        if any(len(b) == 0 for b in self.blocks):
            raise ValueError("empty block")
        if len(set(seen)) != len(seen):
            raise ValueError("blocks overlap")
        if sorted(seen) != list(range(1, len(seen) + 1)):
            raise ValueError("blocks must cover 1..m")
        canon = tuple(sorted((tuple(sorted(b)) for b in self.blocks), key=lambda b: b[0]))
        object.__setattr__(self, "blocks", canon)

    @property
    def m(self) -> int:
        return sum(len(b) for b in self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def mobius_weight(self) -> int:
        """(#pi - 1)! (-1)^(#pi - 1)."""
        n = len(self.blocks)
        return math.factorial(n - 1) * (-1) ** (n - 1)


def _restricted_growth_strings(m: int):
    a = [0] * m
    while True:
        yield tuple(a)
        # increment: rightmost position that can grow
        i = m - 1
        while i > 0:
            if a[i] <= max(a[:i]):
                a[i] += 1
                for j in range(i + 1, m):
                    a[j] = 0
                break
            i -= 1
        else:
            return


@lru_cache(maxsize=None)
def _partitions(m: int) -> tuple[Partition, ...]:
    out = []
    for rgs in _restricted_growth_strings(m):
        nb = max(rgs) + 1
        blocks = tuple(tuple(i + 1 for i in range(m) if rgs[i] == b) for b in range(nb))
        out.append(Partition(blocks))
    return tuple(out)


def enumerate_partitions(m: int) -> list[Partition]:
    """All partitions of ``{1..m}``, each once, in restricted-growth order."""
    if not isinstance(m, (int, np.integer)) or m < 1 or m > MAX_PARTITION_ORDER:
        raise SizeLimitError(f"partition order must lie in 1..{MAX_PARTITION_ORDER}, got {m}")
    return list(_partitions(int(m)))


@dataclass
class CorrelationSet:
    """Correlation functions indexed by order ``1..m_max``."""

    fields: dict[int, GridField]
    kind: str = "G"
    meta: dict = field(default_factory=dict)

    def __getitem__(self, m: int) -> GridField:
        return self.fields[m]

    @property
    def m_max(self) -> int:
        return max(self.fields)

    def orders(self) -> list[int]:
        return sorted(self.fields)


def _partition_product(parts: dict[int, np.ndarray], partition: Partition, k: int) -> np.ndarray:
    """Tensor product of per-block factors, with block slots placed in order."""
    m = partition.m
    letters = string.ascii_letters
    if m * k > len(letters):
        raise SizeLimitError("too many axes for einsum")
    slot_letters = [letters[s * k:(s + 1) * k] for s in range(m)]
    operands, subs = [], []
    for block in partition.blocks:
        operands.append(parts[len(block)])
        subs.append("".join(slot_letters[s - 1] for s in block))
    out = "".join(slot_letters)
    return np.einsum(",".join(subs) + "->" + out, *operands)


def _validate_marginals(marginals: Sequence[GridField], tol: float) -> None:
    grid = marginals[0].grid
    for i, f in enumerate(marginals, start=1):
        if f.order != i:
            raise ArityError(f"marginal list position {i} holds order {f.order}")
        if f.grid != grid:
            raise ConsistencyError(f"marginal of order {i} is on a different grid")
        if abs(f.mass() - 1.0) > tol:
            raise ConsistencyError(f"marginal of order {i} has mass {f.mass()!r}")
        if np.min(f.values) < -tol:
            raise ConsistencyError(f"marginal of order {i} is negative")
        if i >= 2:
            scale = max(1.0, float(np.max(np.abs(f.values))))
            if f.symmetry_defect() > tol * scale:
                raise ConsistencyError(f"marginal of order {i} is not symmetric")
            for slot in range(i):
                red = f.integrate_slot(slot)
                if np.max(np.abs(red.values - marginals[i - 2].values)) > tol * scale:
                    raise ConsistencyError(
                        f"marginals of orders ({i}, {i - 1}) are inconsistent "
                        f"(slot {slot + 1})", pair=(i, i - 1))


def cumulants_from_marginals(marginals: Sequence[GridField], check: bool = True,
                             tol: float = 1e-10) -> CorrelationSet:
    """Correlation functions ``G^1..G^m_max`` from marginals ``F^1..F^m_max``.

    Parameters
    ----------
    marginals
        ``marginals[i]`` is the order ``i + 1`` marginal.
    check
        Validate symmetry, normalization, and partial-integration consistency.
    tol
        Tolerance for the checks.
    """
    marginals = list(marginals)
    if not marginals:
        raise ArityError("no marginals supplied")
    if len(marginals) > MAX_CUMULANT_ORDER:
        raise SizeLimitError(f"cumulants above order {MAX_CUMULANT_ORDER} are not supported")
    if check:
        _validate_marginals(marginals, tol)
    grid = marginals[0].grid
    parts = {f.order: f.values for f in marginals}
    out = {}
    for m in range(1, len(marginals) + 1):
        acc = np.zeros(grid.shape * m)
        for p in enumerate_partitions(m):
            acc += p.mobius_weight() * _partition_product(parts, p, grid.k)
        out[m] = GridField(m, grid, acc)
    return CorrelationSet(out, kind="G")


def marginals_from_cumulants(correlations: CorrelationSet) -> list[GridField]:
    """Cluster expansion ``F^m = sum_pi prod_A G^{|A|}``."""
    orders = correlations.orders()
    if not orders or orders != list(range(1, len(orders) + 1)):
        raise ArityError(f"correlations must cover orders 1..m_max, got {orders}")
    grid = correlations[1].grid
    parts = {m: correlations[m].values for m in orders}
    out = []
    for m in orders:
        acc = np.zeros(grid.shape * m)
        for p in enumerate_partitions(m):
            acc += _partition_product(parts, p, grid.k)
        out.append(GridField(m, grid, acc))
    return out


def check_maximality(correlations: CorrelationSet) -> dict[int, float]:
    """Worst absolute partial integral of ``G^m`` over any single slot, per order."""
    report = {}
    for m in correlations.orders():
        if m < 2:
            continue
        g = correlations[m]
        report[m] = max(float(np.max(np.abs(g.integrate_slot(s).values))) for s in range(m))
    return report
