"""Implicit time stepping for the grid DAE and its relaxed ODE form.

Two model modes are supported:

* ``mu``   -- the relaxed system ``E_mu x_k = E_mu sum_s alpha_s x_{k-s}
  + h_tilde [f; g]`` where ``E_mu`` is diagonal with ones on the differential
  rows and ``mu`` on the algebraic rows.  The relaxation keeps an ODE
  structure while holding the constraints to O(mu).
* ``ndae`` -- the differential rows are discretized as above and the algebraic
  constraints ``g(x_k) = 0`` are enforced exactly at every step.

Schemes: backward Euler (BE), backward differentiation formulas BDF(k) for
k in 1..5 (BDF(1) is BE), and trapezoidal implicit (TI).  Each step solves the
implicit residual ``phi(x_k) = 0`` with Newton-Raphson, warm-started from the
previous state.

Multistep startup: BDF(k>1) needs k history states.  By default the first
k-1 grid steps run a plain order ramp (BDF(1), BDF(2), ...).  The ramp commits
an O(h^2) error on the first step, which dominates BDF(3) accuracy at coarse
steps; for accuracy studies set ``startup_substeps > 1`` to integrate the
startup intervals with that many trapezoidal substeps instead (the substates
are recorded on the trajectory so sensitivity chains can follow the same map).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
import scipy.linalg

from .dynamics import eval_f, eval_fg, eval_g, eval_jacobian_blocks
from .errors import (
    ConfigurationError,
    ConvergenceError,
    DimensionError,
    GridObsError,
    LinearSolveError,
    SimulationError,
)
from .netmodel import apply_disturbance

BDF_MAX_ORDER = 5


def bdf_coefficients(k):
    """Gear coefficients (beta, alpha_1..alpha_k) as exact rationals in float.

    beta = (sum_{s=1..k} 1/s)^{-1} and
    alpha_s = (-1)^(s-1) beta sum_{j=s..k} (1/j) C(j, s).
    """
    if not isinstance(k, int) or not 1 <= k <= BDF_MAX_ORDER:
        raise ConfigurationError(f"BDF order must be an integer in 1..{BDF_MAX_ORDER}, got {k}")
    beta = 1 / sum(Fraction(1, s) for s in range(1, k + 1))
    alphas = []
    for s in range(1, k + 1):
        acc = sum(Fraction(math.comb(j, s), j) for j in range(s, k + 1))
        alphas.append((-1) ** (s - 1) * beta * acc)
    assert sum(alphas) == 1  # multistep consistency, exact in rationals
    return float(beta), tuple(float(a) for a in alphas)


@dataclass(frozen=True)
class Scheme:
    """Discretization method with its coefficients and effective step h_tilde."""

    method: str  # 'be' | 'bdf' | 'ti'
    h: float
    k: int = 1
    beta: float = field(init=False, default=1.0)
    alpha: tuple = field(init=False, default=(1.0,))

    def __post_init__(self):
        if self.method not in ("be", "bdf", "ti"):
            raise ConfigurationError(f"unknown scheme {self.method!r}")
        if self.h < 0:
            raise ConfigurationError("step size must be nonnegative")
        if self.method == "bdf":
            beta, alpha = bdf_coefficients(self.k)
        else:
            if self.k != 1:
                raise ConfigurationError(f"{self.method} has no order parameter")
            beta, alpha = 1.0, (1.0,)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def be(cls, h):
        return cls("be", h)

    @classmethod
    def bdf(cls, k, h):
        return cls("bdf", h, k)

    @classmethod
    def ti(cls, h):
        return cls("ti", h)

    @classmethod
    def from_name(cls, name, h):
        name = name.lower()
        if name == "be":
            return cls.be(h)
        if name == "ti":
            return cls.ti(h)
        if name.startswith("bdf"):
            return cls.bdf(int(name[3:]), h)
        raise ConfigurationError(f"unknown scheme name {name!r}")

    @property
    def label(self):
        return self.method if self.method != "bdf" else f"bdf{self.k}"

    @property
    def order(self):
        """Number of history states consumed per step."""
        return self.k if self.method == "bdf" else 1

    @property
    def h_tilde(self):
        if self.method == "ti":
            return 0.5 * self.h
        return self.beta * self.h  # beta = 1 for BE


@dataclass(frozen=True)
class SimConfig:
    """Model mode and Newton settings for a simulation run."""

    mode: str = "mu"  # 'mu' | 'ndae'
    mu: float = 1e-6
    t_end: float = 30.0
    nr_tol: float = 1e-2
    nr_max_iter: int = 10
    governor_sign: str = "stable"
    ti_jacobian: str = "exact"  # 'exact' | 'paper' (summed-step TI blocks)
    startup_substeps: int = 1

    def __post_init__(self):
        if self.mode not in ("mu", "ndae"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.mode == "mu" and self.mu <= 0:
            raise ConfigurationError("mu must be positive in mu mode")
        if self.nr_max_iter < 1:
            raise ConfigurationError("nr_max_iter must be >= 1")
        if self.ti_jacobian not in ("exact", "paper"):
            raise ConfigurationError("ti_jacobian must be 'exact' or 'paper'")
        if self.startup_substeps < 1:
            raise ConfigurationError("startup_substeps must be >= 1")


def relaxation_weights(layout, cfg):
    """Diagonal of E_mu (mu mode) or of the singular E (ndae mode)."""
    w = np.ones(layout.n)
    w[layout.n_d :] = cfg.mu if cfg.mode == "mu" else 0.0
    return w


def _history_matrix(history, order, n):
    if len(history) < order:
        raise GridObsError(
            f"scheme needs {order} history state(s), got {len(history)}"
        )
    H = np.empty((order, n))
    for s in range(order):
        H[s] = history[s]
    return H


def implicit_residual_phi(x_k, history, u, scheme, cfg, case):
    """Residual phi(x_k) of the implicit step given the recent history.

    ``history[s-1]`` must hold ``x_{k-s}``, most recent first.
    """
    L = case.layout
    x_k = np.asarray(x_k, dtype=float)
    H = _history_matrix(history, scheme.order, L.n)
    ht = scheme.h_tilde
    phi = np.empty(L.n)
    if scheme.method in ("be", "bdf"):
        acc = np.zeros(L.n)
        for s, a in enumerate(scheme.alpha):
            acc += a * H[s]
        fk = eval_f(x_k, u, case, governor_sign=cfg.governor_sign)
        gk = eval_g(x_k, case)
        phi[: L.n_d] = x_k[: L.n_d] - acc[: L.n_d] - ht * fk
        if cfg.mode == "mu":
            phi[L.n_d :] = cfg.mu * (x_k[L.n_d :] - acc[L.n_d :]) - ht * gk
        else:
            phi[L.n_d :] = gk
    else:  # TI
        fk = eval_f(x_k, u, case, governor_sign=cfg.governor_sign)
        gk = eval_g(x_k, case)
        fm = eval_f(H[0], u, case, governor_sign=cfg.governor_sign)
        gm = eval_g(H[0], case)
        phi[: L.n_d] = x_k[: L.n_d] - H[0, : L.n_d] - ht * (fk + fm)
        if cfg.mode == "mu":
            phi[L.n_d :] = cfg.mu * (x_k[L.n_d :] - H[0, L.n_d :]) - ht * (gk + gm)
        else:
            phi[L.n_d :] = gk
    return phi


def assemble_step_jacobian(x_k, history, u, scheme, cfg, case):
    """Newton matrix A_g = d(phi)/d(x_k) for the implicit step.

    For BE/BDF in mu mode this is
    ``[[I - ht F_xd, -ht F_xa], [-ht G_xd, mu I - ht G_xa]]``; in ndae mode the
    algebraic rows are ``[G_xd, G_xa]``.  For TI the residual's previous-step
    terms are constants, so the exact Jacobian uses current-step blocks only.
    ``cfg.ti_jacobian='paper'`` instead sums current and previous blocks
    (F~ = F_k + F_{k-1}, ...), an approximation kept for comparison: Newton
    still converges to the same root, just not quadratically.
    """
    L = case.layout
    x_k = np.asarray(x_k, dtype=float)
    ht = scheme.h_tilde
    J = eval_jacobian_blocks(x_k, u, case, governor_sign=cfg.governor_sign)
    f_xd, f_xa, g_xd, g_xa = J.f_xd, J.f_xa, J.g_xd, J.g_xa
    if scheme.method == "ti" and cfg.ti_jacobian == "paper":
        H = _history_matrix(history, 1, L.n)
        Jm = eval_jacobian_blocks(H[0], u, case, governor_sign=cfg.governor_sign)
        f_xd = f_xd + Jm.f_xd
        f_xa = f_xa + Jm.f_xa
        g_xd = g_xd + Jm.g_xd
        g_xa = g_xa + Jm.g_xa
    A = np.empty((L.n, L.n))
    A[: L.n_d, : L.n_d] = -ht * f_xd
    A[: L.n_d, : L.n_d] += np.eye(L.n_d)
    A[: L.n_d, L.n_d :] = -ht * f_xa
    if cfg.mode == "mu":
        A[L.n_d :, : L.n_d] = -ht * g_xd
        A[L.n_d :, L.n_d :] = -ht * g_xa
        A[L.n_d :, L.n_d :] += cfg.mu * np.eye(L.n_a)
    else:
        A[L.n_d :, : L.n_d] = g_xd
        A[L.n_d :, L.n_d :] = g_xa
    return A


def newton_step(x_guess, history, u, scheme, cfg, case):
    """Solve phi(x_k) = 0 from ``x_guess``; returns (x_k, iterations).

    Iterates ``x += dx`` with ``A_g dx = -phi`` until ||dx||_2 < nr_tol.
    """
    x = np.asarray(x_guess, dtype=float).copy()
    phi = None
    for it in range(1, cfg.nr_max_iter + 1):
        phi = implicit_residual_phi(x, history, u, scheme, cfg, case)
        A = assemble_step_jacobian(x, history, u, scheme, cfg, case)
        try:
            dx = scipy.linalg.solve(A, -phi)
        except (scipy.linalg.LinAlgError, ValueError) as exc:
            raise LinearSolveError(f"singular step Jacobian: {exc}") from None
        x += dx
        if np.linalg.norm(dx) < cfg.nr_tol:
            return x, it
    res = float(np.linalg.norm(implicit_residual_phi(x, history, u, scheme, cfg, case)))
    raise ConvergenceError(
        f"Newton did not converge in {cfg.nr_max_iter} iterations (|phi| = {res:.3e})",
        residual_norm=res,
        iterations=cfg.nr_max_iter,
    )


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled solution: times, states (rows), Newton iteration counts.

    ``startup_substates[j]`` holds the intermediate trapezoidal substates of
    grid step j+1 when the run used ``startup_substeps > 1`` (used by the
    sensitivity chain to follow the exact discrete map).
    """

    times: np.ndarray
    states: np.ndarray
    newton_iters: np.ndarray
    startup_substates: tuple = ()

    def __post_init__(self):
        if self.states.shape[0] != self.times.shape[0]:
            raise DimensionError("times and states length mismatch")

    @property
    def n_steps(self):
        return len(self.times) - 1

    def window(self, n_obs):
        if n_obs > len(self.times):
            raise DimensionError(f"trajectory shorter than window ({n_obs})")
        return Trajectory(
            times=self.times[:n_obs],
            states=self.states[:n_obs],
            newton_iters=self.newton_iters[:n_obs],
            startup_substates=self.startup_substates,
        )

    def at_times(self, times, tol=1e-9):
        """Subsample at the given times (each must match a grid point)."""
        idx = []
        for t in times:
            j = int(round((t - self.times[0]) / (self.times[1] - self.times[0])))
            if j < 0 or j >= len(self.times) or abs(self.times[j] - t) > tol:
                raise DimensionError(f"time {t} not on the trajectory grid")
            idx.append(j)
        idx = np.array(idx, dtype=int)
        return Trajectory(
            times=self.times[idx],
            states=self.states[idx],
            newton_iters=self.newton_iters[idx],
        )


def ramped_scheme(scheme, step):
    """Scheme effectively applied at grid step ``step`` (1-based) under the ramp."""
    if scheme.method == "bdf" and step < scheme.k:
        return Scheme.bdf(step, scheme.h)
    return scheme


def _ti_substep_run(x_start, u, case, scheme, cfg, n_sub):
    """Integrate one grid interval with n_sub trapezoidal substeps."""
    sub_scheme = Scheme.ti(scheme.h / n_sub)
    states = np.empty((n_sub + 1, x_start.shape[0]))
    states[0] = x_start
    iters = 0
    for m in range(1, n_sub + 1):
        states[m], it = newton_step(states[m - 1], [states[m - 1]], u, sub_scheme, cfg, case)
        iters += it
    return states, iters


def simulate(x0, u, case, scheme, cfg, disturbance=None):
    """March the system from x0 to cfg.t_end; disturbance applies from t = h on.

    The initial state stays attached to the pre-disturbance case (it is simply
    recorded), every implicit step is solved against the disturbed case.
    Newton failures are re-raised as SimulationError with the step index.
    """
    x0 = np.asarray(x0, dtype=float)
    dcase = apply_disturbance(case, disturbance) if disturbance is not None else case
    h = scheme.h
    if h <= 0:
        raise ConfigurationError("simulation requires h > 0")
    n_steps = int(round(cfg.t_end / h))
    if abs(n_steps * h - cfg.t_end) > 1e-9:
        raise ConfigurationError("t_end must be an integer multiple of h")
    L = case.layout
    states = np.empty((n_steps + 1, L.n))
    states[0] = x0
    iters = np.zeros(n_steps + 1, dtype=int)
    substates = []
    for k in range(1, n_steps + 1):
        try:
            if scheme.method == "bdf" and scheme.k > 1 and k < scheme.k:
                if cfg.startup_substeps > 1:
                    sub, it = _ti_substep_run(
                        states[k - 1], u, dcase, scheme, cfg, cfg.startup_substeps
                    )
                    states[k] = sub[-1]
                    iters[k] = it
                    substates.append(sub)
                    continue
                sch = ramped_scheme(scheme, k)
            else:
                sch = scheme
            history = [states[k - s] for s in range(1, sch.order + 1)]
            states[k], iters[k] = newton_step(states[k - 1], history, u, sch, cfg, dcase)
        except (ConvergenceError, LinearSolveError) as exc:
            raise SimulationError(
                f"step {k} (t = {k * h:.6g} s): {exc}", step=k, cause=exc
            ) from exc
    return Trajectory(
        times=np.arange(n_steps + 1) * h,
        states=states,
        newton_iters=iters,
        startup_substates=tuple(substates),
    )


def rmse(a, b):
    """Root mean square error sqrt(sum_k ||a_k - b_k||^2 / T) over T aligned steps."""
    if len(a.times) != len(b.times) or not np.allclose(a.times, b.times, atol=1e-9):
        raise DimensionError("trajectories are not on the same time grid")
    diff = a.states - b.states
    return float(np.sqrt(np.sum(diff * diff) / len(a.times)))


def stacked_error_norm(a, b):
    """sqrt(sum_k ||a_k - b_k||^2), the un-normalized error used in the mu bound."""
    if len(a.times) != len(b.times) or not np.allclose(a.times, b.times, atol=1e-9):
        raise DimensionError("trajectories are not on the same time grid")
    diff = a.states - b.states
    return float(np.sqrt(np.sum(diff * diff)))


def write_trajectory_csv(traj, layout, path):
    """CSV with header ``t,<state columns>`` at full double precision."""
    cols = layout.column_names()
    with open(path, "w") as fh:
        fh.write("t," + ",".join(cols) + "\n")
        for t, row in zip(traj.times, traj.states):
            fh.write(format(t, ".17g") + "," + ",".join(format(v, ".17g") for v in row) + "\n")


def read_trajectory_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    data = np.atleast_2d(data)
    return Trajectory(
        times=data[:, 0],
        states=data[:, 1:],
        newton_iters=np.zeros(data.shape[0], dtype=int),
    )
