"""Named experiment pipelines and tools, with their parameter dataclasses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from . import case2, chaos, cross, factorization, hierarchy, relaxation, tools
from .common import Context, InconclusiveError, Outcome, ResourceError


@dataclass(frozen=True)
class Entry:
    name: str
    params: type
    run: Callable[[object, Context], Outcome]
    summary: str
    tool: bool = False


REGISTRY: dict[str, Entry] = {e.name: e for e in [
    Entry("exp_factorization", factorization.FactorizationParams, factorization.run,
          "non-interacting ensemble: pair correlation vanishes cell by cell"),
    Entry("exp_chaos_scaling", chaos.ChaosParams, chaos.run,
          "one-particle distance to the mean-field law and pair correlation versus N"),
    Entry("exp_gibbs_relaxation", relaxation.RelaxationParams, relaxation.run,
          "decay towards the N-particle equilibrium marginal, rate per N"),
    Entry("exp_cross_error", cross.CrossParams, cross.run,
          "joint fit of the mean-field error over an (N, t) grid"),
    Entry("exp_case2_large_kappa", case2.Case2Params, case2.run,
          "h-stable kernel at large coupling: relaxation in negative Sobolev norms"),
    Entry("exp_bbgky_residual", hierarchy.HierarchyParams, hierarchy.run,
          "one-particle hierarchy residual for PDE and Monte-Carlo inputs"),
    Entry("simulate", tools.SimulateParams, tools.run_simulate,
          "run one ensemble and write one-particle histograms", tool=True),
    Entry("fixed_point", tools.FixedPointParams, tools.run_fixed_point,
          "mean-field Gibbs fixed point from several starts", tool=True),
]}


def params_for(name: str) -> type:
    return REGISTRY[name].params


__all__ = ["REGISTRY", "Entry", "Context", "Outcome", "ResourceError", "InconclusiveError",
           "params_for"]
