"""Optimal PMU placement by exact maximization of the Gramian trace.

The trace objective is modular: every bus contributes an independent
nonnegative amount, so the cardinality-constrained maximum is exactly the top-p
buses by per-bus trace.  ``solve_apriori`` sorts on the exact rational traces
(ties broken by lowest bus index, which also yields nested selections across
p); ``solve_bruteforce`` enumerates all p-subsets as an independent check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations

import numpy as np

from .errors import CaseValidationError, ConfigurationError, NonObservableError
from .mhe import gauss_newton_estimate, synthesize_measurements
from .observability import gramian_from_contributions, report_from_gramian

ILL_CONDITIONED_RATIO = 1e-8  # flag when min_eig < ratio * max_eig
BRUTE_FORCE_CAP = 10**6


def _provenance(contributions):
    return hash(tuple((c.bus, c.trace_exact) for c in contributions))


@dataclass(frozen=True)
class PlacementProblem:
    """Per-bus Gramian contributions plus the required sensor count."""

    contributions: tuple
    p: int
    tie_break: str = "lowest-bus"

    def __post_init__(self):
        buses = [c.bus for c in self.contributions]
        if sorted(set(buses)) != sorted(buses):
            raise CaseValidationError("contributions must cover each candidate exactly once")
        if not 0 <= self.p <= len(buses):
            raise ConfigurationError(
                f"sensor count p={self.p} outside 0..{len(buses)}"
            )
        if self.tie_break != "lowest-bus":
            raise ConfigurationError(f"unknown tie break {self.tie_break!r}")


@dataclass(frozen=True)
class PlacementResult:
    buses: tuple
    objective: float
    objective_exact: Fraction
    conditioning: object  # ObservabilityReport of the selected Gramian
    method: str
    ill_conditioned: bool
    provenance: int

    def to_dict(self):
        return {
            "p": len(self.buses),
            "Z_star": list(self.buses),
            "objective": self.objective,
            "condition_flag": self.ill_conditioned,
            "method": self.method,
        }


def _finalize(contributions, chosen, method):
    chosen = tuple(sorted(chosen))
    obj = sum((c.trace_exact for c in contributions if c.bus in set(chosen)), Fraction(0))
    if chosen:
        W = gramian_from_contributions(contributions, chosen)
    else:
        n = contributions[0].W.shape[0]
        W = np.zeros((n, n))
    rep = report_from_gramian(W)
    flag = rep.min_eig < ILL_CONDITIONED_RATIO * rep.max_eig
    return PlacementResult(
        buses=chosen,
        objective=float(obj),
        objective_exact=obj,
        conditioning=rep,
        method=method,
        ill_conditioned=bool(flag),
        provenance=_provenance(contributions),
    )


def solve_apriori(problem):
    """Exact optimum of the trace-maximal p-subset: top-p per-bus traces."""
    order = sorted(problem.contributions, key=lambda c: (-c.trace_exact, c.bus))
    chosen = [c.bus for c in order[: problem.p]]
    return _finalize(problem.contributions, chosen, "apriori")


def solve_bruteforce(contributions, p, cap=BRUTE_FORCE_CAP):
    """Exhaustive maximization over all p-subsets (verification oracle)."""
    buses = sorted(c.bus for c in contributions)
    if not 0 <= p <= len(buses):
        raise ConfigurationError(f"sensor count p={p} outside 0..{len(buses)}")
    count = math.comb(len(buses), p)
    if count > cap:
        raise ConfigurationError(
            f"enumeration of C({len(buses)}, {p}) = {count} subsets exceeds cap {cap}"
        )
    tr = {c.bus: c.trace_exact for c in contributions}
    best_obj = None
    best = None
    for subset in combinations(buses, p):
        obj = sum((tr[b] for b in subset), Fraction(0))
        if best_obj is None or obj > best_obj or (obj == best_obj and subset < best):
            best_obj, best = obj, subset
    return _finalize(contributions, best, "bruteforce")


def nesting_check(results):
    """True iff the selections are nested along increasing p.

    All results must stem from the same contribution set and tie break.
    """
    if not results:
        return True
    prov = {r.provenance for r in results}
    if len(prov) != 1:
        raise CaseValidationError("placement results come from different contribution sets")
    ordered = sorted(results, key=lambda r: len(r.buses))
    for a, b in zip(ordered, ordered[1:]):
        if not set(a.buses) <= set(b.buses):
            return False
    return True


def evaluate_placement(selection, truth, scheme, cfg, mhe_cfg, layout):
    """Downstream estimation error of one selection on the truth experiment.

    Synthesizes measurements for the selection (noise shared channel-by-channel
    with every other selection through the common seed), runs the Gauss-Newton
    estimator, and returns the relative error vs the true initial state.
    Estimator failure maps to an infinite error, not an exception.
    """
    meas = synthesize_measurements(
        truth.traj, selection, truth.noise_pct, truth.seed, layout
    )
    try:
        rep = gauss_newton_estimate(
            meas, truth.u0, truth.case, scheme, cfg, mhe_cfg, x0_true=truth.x0
        )
    except NonObservableError:
        return float("inf")
    return rep.epsilon if rep.epsilon is not None else float("inf")
