"""Initial-state reconstruction from a window of PMU measurements.

The estimator minimizes ``||r(q)||_2^2`` over the stacked window states
``q = [x_0; x_1; ...; x_{N_o-1}]`` with damped Gauss-Newton iterations

    q <- q - h_g (J^T J)^{-1} J^T r(q)

where ``r = [r_y; r_x]`` concatenates the measurement residuals
``r_{y,k} = y_k - C x_k`` and the implicit model residuals ``r_{x,k}``
of the chosen discretization at every window step (the step-0 model block is
identically zero: there is no prior state to tie x_0 to).  The normal
equations are solved by Cholesky factorization, never by forming an inverse;
a rank-deficient window falls back to a ridge-regularized solve and flags the
report.  After each update the x_0 block is projected onto its box bounds.

The model residual must be built against the same case (post-disturbance
loads) that generated the measured trajectory; the window is assumed to start
at the trajectory's first sample, so multistep blocks ramp their order
exactly like the simulator does.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dynamics import eval_jacobian_blocks
from .errors import ConfigurationError, DimensionError, NonObservableError
from .integrator import implicit_residual_phi, assemble_step_jacobian, ramped_scheme, simulate
from .observability import SensorSelection

RIDGE = 1e-10


@dataclass(frozen=True)
class MheConfig:
    """Observation horizon, Gauss-Newton controls, and x_0 box bounds."""

    n_obs: int = 10
    h_g: float = 0.1
    gn_tol: float = 1e-4
    gn_max_iter: int = 200
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    initial_guess: np.ndarray | None = None
    jacobian: str = "exact"  # 'exact' (banded couplings) | 'paper' (blkdiag only)

    def __post_init__(self):
        if self.n_obs < 2:
            raise ConfigurationError("observation horizon must be at least 2 steps")
        if not 0.0 < self.h_g <= 1.0:
            raise ConfigurationError("Gauss-Newton step size must lie in (0, 1]")
        if self.gn_max_iter < 1:
            raise ConfigurationError("gn_max_iter must be >= 1")
        if self.jacobian not in ("exact", "paper"):
            raise ConfigurationError("jacobian must be 'exact' or 'paper'")
        if (self.lower is None) != (self.upper is None):
            raise ConfigurationError("bounds must be given as a (lower, upper) pair")
        if self.lower is not None and np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise ConfigurationError("lower bound exceeds upper bound")


@dataclass(frozen=True)
class MeasurementSeries:
    """Per-step PMU samples ``y[k] = C x_k + noise`` for one sensor selection."""

    y: np.ndarray  # (T, 2p)
    noise_pct: float
    seed: int
    selection: SensorSelection

    @property
    def n_channels(self):
        return self.y.shape[1]


@dataclass
class GnReport:
    """Estimate, iteration trace, and quality flags of one Gauss-Newton solve."""

    x0_hat: np.ndarray
    iterations: int
    residual_norms: list
    converged: bool
    regularized: bool = False
    epsilon: float | None = None

    def to_dict(self):
        d = {
            "x0_hat": [float(v) for v in self.x0_hat],
            "iterations": self.iterations,
            "residual_norms": [float(r) for r in self.residual_norms],
            "converged": self.converged,
            "regularized": self.regularized,
            "epsilon": None if self.epsilon is None else float(self.epsilon),
        }
        return d


def synthesize_measurements(traj, selection, noise_pct, seed, layout):
    """Sample noisy (v, theta) channels of the selected buses along a trajectory.

    Noise is zero-mean Gaussian with per-sample standard deviation
    ``(noise_pct/100) |channel value|``.  The generator draws one noise value
    for every candidate channel (all buses), then keeps the selected rows, so
    two selections observe identical noise on their shared channels and the
    series is reproducible from the seed alone.
    """
    full = SensorSelection.all_buses(layout.n_bus)
    all_idx = full.channel_indices(layout)
    clean_all = traj.states[:, all_idx]
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(clean_all.shape) * (noise_pct / 100.0) * np.abs(clean_all)
    noisy_all = clean_all + noise
    pos = full.channel_positions(selection)
    return MeasurementSeries(
        y=noisy_all[:, pos], noise_pct=noise_pct, seed=seed, selection=selection
    )


def _window_schemes(scheme, n_obs):
    """Per-step scheme inside the window (order ramp for multistep methods)."""
    return [None] + [ramped_scheme(scheme, k) for k in range(1, n_obs)]


def build_residual(q, meas, u, case, scheme, cfg, mhe_cfg):
    """Stacked residual [r_y; r_x] of length N_o (n_p + n)."""
    L = case.layout
    n_obs = mhe_cfg.n_obs
    if q.shape != (n_obs * L.n,):
        raise DimensionError(f"stacked state length {q.shape} != ({n_obs * L.n},)")
    if meas.y.shape[0] < n_obs:
        raise DimensionError("measurement window shorter than the horizon")
    X = q.reshape(n_obs, L.n)
    ch = meas.selection.channel_indices(L)
    r_y = (meas.y[:n_obs] - X[:, ch]).ravel()
    schemes = _window_schemes(scheme, n_obs)
    r_x = np.zeros((n_obs, L.n))
    for k in range(1, n_obs):
        sch = schemes[k]
        history = [X[k - s] for s in range(1, sch.order + 1)]
        r_x[k] = implicit_residual_phi(X[k], history, u, sch, cfg, case)
    return np.concatenate([r_y, r_x.ravel()])


def build_gn_jacobian(q, meas, u, case, scheme, cfg, mhe_cfg):
    """Jacobian of :func:`build_residual` w.r.t. the stacked window states.

    The measurement block is block-diagonal ``-C``.  In 'exact' mode the model
    block carries the per-step Newton matrices A_g on the diagonal plus the
    cross-step couplings: ``-alpha_s E_mu`` for the multistep methods and
    ``-E_mu - h_tilde [F; G](x_{k-1})`` for TI.  'paper' mode keeps only the
    diagonal A_g blocks.
    """
    L = case.layout
    n_obs = mhe_cfg.n_obs
    n = L.n
    X = q.reshape(n_obs, n)
    ch = meas.selection.channel_indices(L)
    n_p = len(ch)
    J = np.zeros((n_obs * n_p + n_obs * n, n_obs * n))
    # measurement rows: -1 at each selected channel
    for k in range(n_obs):
        rows = np.arange(k * n_p, (k + 1) * n_p)
        J[rows, k * n + ch] = -1.0
    off = n_obs * n_p
    schemes = _window_schemes(scheme, n_obs)
    e_diag = np.ones(n)
    e_diag[L.n_d :] = cfg.mu if cfg.mode == "mu" else 0.0
    for k in range(1, n_obs):
        sch = schemes[k]
        history = [X[k - s] for s in range(1, sch.order + 1)]
        rows = slice(off + k * n, off + (k + 1) * n)
        J[rows, k * n : (k + 1) * n] = assemble_step_jacobian(
            X[k], history, u, sch, cfg, case
        )
        if mhe_cfg.jacobian == "paper":
            continue
        if sch.method in ("be", "bdf"):
            for s, a in enumerate(sch.alpha, start=1):
                cols = slice((k - s) * n, (k - s + 1) * n)
                idx = np.arange(n)
                J[off + k * n + idx, (k - s) * n + idx] += -a * e_diag
        else:  # TI couples to k-1 through the averaged right-hand side
            Jb = eval_jacobian_blocks(X[k - 1], u, case, governor_sign=cfg.governor_sign)
            blk = np.zeros((n, n))
            blk[: L.n_d, : L.n_d] = -sch.h_tilde * Jb.f_xd
            blk[: L.n_d, L.n_d :] = -sch.h_tilde * Jb.f_xa
            if cfg.mode == "mu":
                blk[L.n_d :, : L.n_d] = -sch.h_tilde * Jb.g_xd
                blk[L.n_d :, L.n_d :] = -sch.h_tilde * Jb.g_xa
            np.fill_diagonal(blk, blk.diagonal() - e_diag)
            J[rows, (k - 1) * n : k * n] += blk
    return J


def default_bounds(x_center, layout, omega0):
    """Box bounds: wide physical ranges for x_d; for x_a, +-20% around the
    power-flow values plus an absolute pad (slack pickup can dwarf a small
    scheduled output, so a pure relative band may exclude the truth)."""
    lo = np.empty(layout.n)
    hi = np.empty(layout.n)
    lo[layout.delta], hi[layout.delta] = -2.0 * np.pi, 2.0 * np.pi
    lo[layout.omega], hi[layout.omega] = 0.9 * omega0, 1.1 * omega0
    lo[layout.e_p], hi[layout.e_p] = 0.05, 3.0
    lo[layout.t_m], hi[layout.t_m] = -12.0, 12.0
    xa = x_center[layout.n_d :]
    pad = 0.2 * np.abs(xa) + 0.15
    lo[layout.n_d :] = xa - pad
    hi[layout.n_d :] = xa + pad
    return lo, hi


def gauss_newton_estimate(meas, u, case, scheme, cfg, mhe_cfg, x0_true=None):
    """Run the damped Gauss-Newton iteration of the windowed least squares.

    The window states are seeded by simulating from ``mhe_cfg.initial_guess``.
    Returns a GnReport; hitting the iteration cap yields ``converged=False``
    rather than an exception.  An empty sensor selection is a
    NonObservableError: nothing ties the residual to the measurements.
    """
    if meas.selection.p == 0:
        raise NonObservableError("empty sensor selection: estimation is unobservable")
    if mhe_cfg.initial_guess is None:
        raise ConfigurationError("mhe config needs an initial_guess state")
    L = case.layout
    n = L.n
    n_obs = mhe_cfg.n_obs

    guess_traj = simulate(
        mhe_cfg.initial_guess, u, case, scheme, _window_cfg(cfg, scheme, n_obs)
    )
    q = guess_traj.states[:n_obs].ravel().copy()
    lo, hi = mhe_cfg.lower, mhe_cfg.upper
    if lo is not None:
        q[:n] = np.clip(q[:n], lo, hi)

    residual_norms = []
    regularized = False
    converged = False
    iterations = 0
    for it in range(mhe_cfg.gn_max_iter + 1):
        r = build_residual(q, meas, u, case, scheme, cfg, mhe_cfg)
        rnorm = float(np.linalg.norm(r))
        residual_norms.append(rnorm)
        if rnorm < mhe_cfg.gn_tol:
            converged = True
            break
        if it == mhe_cfg.gn_max_iter:
            break
        J = build_gn_jacobian(q, meas, u, case, scheme, cfg, mhe_cfg)
        JtJ = J.T @ J
        Jtr = J.T @ r
        try:
            c, low = scipy.linalg.cho_factor(JtJ, check_finite=False)
            step = scipy.linalg.cho_solve((c, low), Jtr, check_finite=False)
        except scipy.linalg.LinAlgError:
            # rank-deficient window: ridge makes the PSD normal matrix PD
            regularized = True
            JtJ[np.diag_indices_from(JtJ)] += RIDGE
            c, low = scipy.linalg.cho_factor(JtJ, check_finite=False)
            step = scipy.linalg.cho_solve((c, low), Jtr, check_finite=False)
        q = q - mhe_cfg.h_g * step
        if lo is not None:
            q[:n] = np.clip(q[:n], lo, hi)
        iterations = it + 1

    x0_hat = q[:n].copy()
    eps = None if x0_true is None else estimation_error(x0_hat, x0_true)
    return GnReport(
        x0_hat=x0_hat,
        iterations=iterations,
        residual_norms=residual_norms,
        converged=converged,
        regularized=regularized,
        epsilon=eps,
    )


def _window_cfg(cfg, scheme, n_obs):
    from dataclasses import replace as dc_replace

    return dc_replace(cfg, t_end=(n_obs - 1) * scheme.h)


def estimation_error(x0_hat, x0_true):
    """Relative L2 error ||x0_hat - x0_true|| / ||x0_true||."""
    x0_hat = np.asarray(x0_hat, dtype=float)
    x0_true = np.asarray(x0_true, dtype=float)
    if x0_hat.shape != x0_true.shape:
        raise DimensionError("estimate and truth have different lengths")
    denom = np.linalg.norm(x0_true)
    if denom == 0.0:
        raise ZeroDivisionError("reference state has zero norm")
    return float(np.linalg.norm(x0_hat - x0_true) / denom)
