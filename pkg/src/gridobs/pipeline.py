"""Experiment protocol wiring: ingestion -> simulation -> estimation -> placement.

This module encodes the end-to-end study the command line exposes: prepare a
case with renewables and a solved power flow, disturb it, synthesize PMU
measurements over the observation window, reconstruct the initial state with
the Gauss-Newton estimator under full sensing, build the observability
contributions along the estimate's trajectory, and solve the placement problem
for the requested sensor counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import mhe, netmodel, observability, placement
from .integrator import Scheme, SimConfig, rmse, simulate, stacked_error_norm
from .netmodel import Disturbance


@dataclass(frozen=True)
class PreparedCase:
    """Solved base case with its equilibrium state and inputs."""

    case: object
    x0: np.ndarray
    u0: np.ndarray


@dataclass(frozen=True)
class TruthData:
    """Disturbed-system trajectory the estimator observes."""

    case: object  # post-disturbance case the window was simulated with
    x0: np.ndarray
    u0: np.ndarray
    traj: object
    noise_pct: float
    seed: int


def prepare_case(path, dyn_path=None, renewable_fraction=0.2, governor_sign="stable"):
    case = netmodel.parse_matpower_case(path, dyn_path)
    if renewable_fraction > 0.0:
        case = netmodel.with_renewables(case, renewable_fraction)
    case = netmodel.solve_power_flow(case)
    x0, u0 = netmodel.init_steady_state(case, governor_sign=governor_sign)
    return PreparedCase(case=case, x0=x0, u0=u0)


def window_cfg(cfg, scheme, n_obs):
    """Simulation config covering exactly the n_obs-step observation window."""
    return replace(cfg, t_end=(n_obs - 1) * scheme.h)


def build_truth(prep, disturbance, scheme, cfg, n_obs, noise_pct, seed):
    """Simulate the disturbed window the estimator will see."""
    dcase = netmodel.apply_disturbance(prep.case, disturbance)
    traj = simulate(prep.x0, prep.u0, dcase, scheme, window_cfg(cfg, scheme, n_obs))
    return TruthData(
        case=dcase, x0=prep.x0, u0=prep.u0, traj=traj, noise_pct=noise_pct, seed=seed
    )


def assumed_initial_state(prep, disturbance, governor_sign="stable"):
    """Estimator's starting point: the equilibrium of the disturbed system."""
    dcase = netmodel.apply_disturbance(prep.case, disturbance)
    dsolved = netmodel.solve_power_flow(dcase)
    xg, _ = netmodel.init_steady_state(dsolved, governor_sign=governor_sign)
    return xg


def make_mhe_config(prep, disturbance, n_obs=10, gn_tol=1e-4, gn_max_iter=200,
                    h_g=0.1, jacobian="exact", governor_sign="stable"):
    guess = assumed_initial_state(prep, disturbance, governor_sign=governor_sign)
    lo, hi = mhe.default_bounds(guess, prep.case.layout, prep.case.omega0)
    return mhe.MheConfig(
        n_obs=n_obs,
        h_g=h_g,
        gn_tol=gn_tol,
        gn_max_iter=gn_max_iter,
        lower=lo,
        upper=hi,
        initial_guess=guess,
        jacobian=jacobian,
    )


def estimate_initial_state(truth, selection, scheme, cfg, mhe_cfg):
    meas = mhe.synthesize_measurements(
        truth.traj, selection, truth.noise_pct, truth.seed, truth.case.layout
    )
    return mhe.gauss_newton_estimate(
        meas, truth.u0, truth.case, scheme, cfg, mhe_cfg, x0_true=truth.x0
    )


def contributions_from_estimate(truth, x0_hat, scheme, cfg, n_obs, chain_mode="exact"):
    """Per-bus Gramian contributions along the trajectory restarted at x0_hat."""
    traj = simulate(x0_hat, truth.u0, truth.case, scheme, window_cfg(cfg, scheme, n_obs))
    chain = observability.propagate_chain(
        traj, truth.u0, truth.case, scheme, cfg, n_obs, mode=chain_mode
    )
    return observability.per_sensor_contributions(chain, truth.case.layout), chain


def fraction_counts(fractions, n_candidates):
    """Sensor counts for the swept fractions (round half up, clip to 1..N)."""
    counts = []
    for f in fractions:
        p = int(math.floor(f * n_candidates + 0.5))
        counts.append(min(max(p, 0), n_candidates))
    return counts


@dataclass(frozen=True)
class OppStudy:
    """Results of one placement study: shared contributions, per-p outcomes."""

    contributions: tuple
    estimate: object  # GnReport of the full-sensing reconstruction
    results: tuple  # PlacementResult per requested p
    epsilons: tuple  # downstream estimation error per requested p (or None)
    nested: bool


def run_opp_study(prep, scheme, cfg, disturbance, p_values, noise_pct=2.0, seed=0,
                  n_obs=10, evaluate=False, mhe_overrides=None, brute_force=False,
                  brute_force_cap=placement.BRUTE_FORCE_CAP):
    """The full §-style placement experiment for a list of sensor counts."""
    overrides = dict(mhe_overrides or {})
    mhe_cfg = make_mhe_config(prep, disturbance, n_obs=n_obs, **overrides)
    truth = build_truth(prep, disturbance, scheme, cfg, n_obs, noise_pct, seed)
    full = observability.SensorSelection.all_buses(prep.case.n_bus)
    report = estimate_initial_state(truth, full, scheme, cfg, mhe_cfg)
    contribs, _ = contributions_from_estimate(
        truth, report.x0_hat, scheme, cfg, n_obs
    )
    results = []
    epsilons = []
    for p in p_values:
        res = placement.solve_apriori(placement.PlacementProblem(contribs, p))
        if brute_force:
            bf = placement.solve_bruteforce(contribs, p, cap=brute_force_cap)
            if bf.buses != res.buses:
                raise AssertionError(
                    f"brute force disagrees with the a-priori solver for p={p}: "
                    f"{bf.buses} vs {res.buses}"
                )
        results.append(res)
        if evaluate:
            sel = observability.SensorSelection.of(res.buses)
            eps = placement.evaluate_placement(sel, truth, scheme, cfg, mhe_cfg,
                                               prep.case.layout)
            epsilons.append(eps)
        else:
            epsilons.append(None)
    nested = placement.nesting_check(results)
    return OppStudy(
        contributions=contribs,
        estimate=report,
        results=tuple(results),
        epsilons=tuple(epsilons),
        nested=nested,
    )


def run_mu_sweep(prep, scheme, cfg, disturbance, mus):
    """RMSE between the relaxed and unrelaxed runs for each mu.

    Returns rows (mu, rmse, stacked_error, converged).  A run that fails to
    converge reports NaN errors and converged=False instead of raising.
    """
    ndae_cfg = replace(cfg, mode="ndae")
    ref = simulate(prep.x0, prep.u0, prep.case, scheme, ndae_cfg, disturbance)
    rows = []
    for mu in mus:
        mu_cfg = replace(cfg, mode="mu", mu=mu)
        try:
            traj = simulate(prep.x0, prep.u0, prep.case, scheme, mu_cfg, disturbance)
        except Exception:
            rows.append((mu, float("nan"), float("nan"), False))
            continue
        rows.append((mu, rmse(traj, ref), stacked_error_norm(traj, ref), True))
    return rows
