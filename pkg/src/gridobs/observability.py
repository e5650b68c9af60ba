"""Observability of the windowed estimator: sensitivity chains and Gramians.

The observation Jacobian stacks ``C dx_j/dx_0`` over the horizon; the Gramian
is ``W_o = J^T J``.  Because every PMU contributes an independent pair of
rows per step, ``W_o`` decomposes exactly into per-bus contributions
``W_o = sum_i W_{o,i}``; the decomposition is the basis of the a-priori
placement solver.  Per-bus traces are also accumulated as exact rationals
(floats are dyadic, so sums and comparisons of the squared entries are exact),
which makes trace additivity and the sort-based placement optimum exact
set-function statements rather than floating-point approximations.

State-transition sensitivities come from implicit differentiation of the step
residual: ``A_g S_s = R_s`` with the scheme-dependent right-hand side (the
relaxed mode only; the unrelaxed DAE has no explicit algebraic sensitivity).
``propagate_chain`` composes them along a trajectory; the default ``exact``
recursion keeps every multistep coupling, while ``paper`` mode reproduces the
k-stride composition that treats each k-step block as self-contained.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.linalg

from .dynamics import eval_jacobian_blocks
from .errors import ConfigurationError, DimensionError, GridObsError, LinearSolveError
from .integrator import Scheme, assemble_step_jacobian, ramped_scheme

RANK_TOL_FACTOR = 1e3  # numerical rank threshold: sigma_max * n * eps * 1e3
COND_FLOOR = 1e-300


@dataclass(frozen=True)
class SensorSelection:
    """Ordered set of PMU buses; each measures its (v, theta) pair."""

    buses: tuple

    def __post_init__(self):
        b = tuple(int(x) for x in self.buses)
        if sorted(set(b)) != list(b):
            raise ConfigurationError("selection buses must be unique and ascending")
        object.__setattr__(self, "buses", b)

    @classmethod
    def of(cls, buses):
        return cls(tuple(sorted(set(int(b) for b in buses))))

    @classmethod
    def all_buses(cls, n_bus):
        return cls(tuple(range(1, n_bus + 1)))

    @property
    def p(self):
        return len(self.buses)

    def channel_indices(self, layout):
        """Flat state indices measured by this selection: (v_i, theta_i) per bus."""
        idx = []
        for b in self.buses:
            if not 1 <= b <= layout.n_bus:
                raise ConfigurationError(f"selection bus {b} outside 1..{layout.n_bus}")
            idx.append(layout.v_index(b))
            idx.append(layout.theta_index(b))
        return np.array(idx, dtype=int)

    def channel_positions(self, sub):
        """Row positions of ``sub``'s channels inside this selection's channels."""
        pos = {b: i for i, b in enumerate(self.buses)}
        out = []
        for b in sub.buses:
            if b not in pos:
                raise ConfigurationError(f"bus {b} is not part of the parent selection")
            out.extend((2 * pos[b], 2 * pos[b] + 1))
        return np.array(out, dtype=int)

    def c_matrix(self, layout):
        ch = self.channel_indices(layout)
        C = np.zeros((len(ch), layout.n))
        C[np.arange(len(ch)), ch] = 1.0
        return C


@dataclass(frozen=True)
class SensitivityChain:
    """State-transition sensitivities dx_j/dx_0 for j = 0..N_o-1 (first = I)."""

    steps: tuple

    def __post_init__(self):
        if len(self.steps) == 0:
            raise DimensionError("chain must contain at least the identity block")

    @property
    def n_obs(self):
        return len(self.steps)


@dataclass(frozen=True)
class GramianContribution:
    """One bus's additive share of the observability Gramian."""

    bus: int
    W: np.ndarray
    trace: float
    trace_exact: Fraction


@dataclass(frozen=True)
class ObservabilityReport:
    W_o: np.ndarray
    trace: float
    min_eig: float
    max_eig: float
    condition_number: float
    numerical_rank: int

    def to_dict(self, selection=None, per_bus_trace=None):
        d = {
            "trace": self.trace,
            "min_eig": self.min_eig,
            "max_eig": self.max_eig,
            "condition_number": self.condition_number,
            "numerical_rank": self.numerical_rank,
        }
        if selection is not None:
            d["selection"] = list(selection.buses)
        if per_bus_trace is not None:
            d["per_bus_trace"] = per_bus_trace
        return d


def _require_mu_mode(cfg):
    if cfg.mode != "mu":
        raise ConfigurationError(
            "sensitivities need the relaxed (mu) mode: the unrelaxed DAE has no "
            "explicit algebraic state-transition derivative"
        )


def _e_mu_diag(layout, cfg):
    w = np.ones(layout.n)
    w[layout.n_d :] = cfg.mu
    return w


def step_sensitivity(x_j, history, u, case, scheme, cfg):
    """Solve A_g S_s = R_s for the per-step sensitivities dx_j/dx_{j-s}.

    R_s = alpha_s E_mu for BE/BDF; for TI the single right-hand side is
    E_mu + h_tilde [F; G] evaluated at the previous state.
    """
    _require_mu_mode(cfg)
    L = case.layout
    A = assemble_step_jacobian(x_j, history, u, scheme, cfg, case)
    e_mu = _e_mu_diag(L, cfg)
    if scheme.method in ("be", "bdf"):
        rhs = np.empty((L.n, L.n * scheme.order))
        for s, a in enumerate(scheme.alpha):
            blk = np.zeros((L.n, L.n))
            np.fill_diagonal(blk, a * e_mu)
            rhs[:, s * L.n : (s + 1) * L.n] = blk
    else:
        Jb = eval_jacobian_blocks(history[0], u, case, governor_sign=cfg.governor_sign)
        rhs = np.zeros((L.n, L.n))
        rhs[: L.n_d, : L.n_d] = scheme.h_tilde * Jb.f_xd
        rhs[: L.n_d, L.n_d :] = scheme.h_tilde * Jb.f_xa
        rhs[L.n_d :, : L.n_d] = scheme.h_tilde * Jb.g_xd
        rhs[L.n_d :, L.n_d :] = scheme.h_tilde * Jb.g_xa
        np.fill_diagonal(rhs, rhs.diagonal() + e_mu)
    try:
        sol = scipy.linalg.solve(A, rhs)
    except scipy.linalg.LinAlgError as exc:
        raise LinearSolveError(f"singular step Jacobian in sensitivity solve: {exc}") from None
    return [sol[:, s * L.n : (s + 1) * L.n] for s in range(scheme.order)]


def step_sensitivity_blockwise(x_j, history, u, case, scheme, cfg):
    """Closed-form 2x2 block sensitivity for BE and TI (cross-check mode).

    Built from the decoupled block inverses A_nd = I - ht F_xd and
    A_na = mu I - ht G_xa; kept for comparison with :func:`step_sensitivity`,
    whose implicit solve is the default everywhere else.  The off-diagonal
    blocks of this form are known to deviate from the exact derivative; the
    tests quantify the gap instead of asserting it away.
    """
    _require_mu_mode(cfg)
    if scheme.method == "bdf" and scheme.k > 1:
        raise ConfigurationError("blockwise sensitivities are defined for BE and TI only")
    L = case.layout
    nd, na = L.n_d, L.n_a
    mu = cfg.mu
    ht = scheme.h_tilde
    Jk = eval_jacobian_blocks(x_j, u, case, governor_sign=cfg.governor_sign)
    S = np.zeros((L.n, L.n))
    if scheme.method in ("be", "bdf"):
        A_nd = np.eye(nd) - ht * Jk.f_xd
        A_na = mu * np.eye(na) - ht * Jk.g_xa
        try:
            A_nd_inv = np.linalg.inv(A_nd)
            A_na_inv = np.linalg.inv(A_na)
        except np.linalg.LinAlgError as exc:
            raise LinearSolveError(f"singular diagonal block: {exc}") from None
        S[:nd, :nd] = A_nd_inv
        S[:nd, nd:] = ht * Jk.f_xa @ (A_na_inv * mu)
        S[nd:, :nd] = ht * Jk.g_xd @ (A_nd_inv / mu)
        S[nd:, nd:] = A_na_inv * mu
    else:
        Jm = eval_jacobian_blocks(history[0], u, case, governor_sign=cfg.governor_sign)
        A_nd_m = np.eye(nd) - ht * Jk.f_xd
        A_nd_p = np.eye(nd) + ht * Jm.f_xd
        A_na_m = mu * np.eye(na) - ht * Jk.g_xa
        A_na_p = mu * np.eye(na) + ht * Jm.g_xa
        try:
            D_d = np.linalg.solve(A_nd_m, A_nd_p)
            D_a = np.linalg.solve(A_na_m, A_na_p)
        except np.linalg.LinAlgError as exc:
            raise LinearSolveError(f"singular diagonal block: {exc}") from None
        S[:nd, :nd] = D_d
        S[:nd, nd:] = ht * (Jk.f_xa @ D_a + Jm.f_xa)
        S[nd:, :nd] = ht * (Jk.g_xd @ D_d + Jm.g_xd) / mu
        S[nd:, nd:] = D_a
    return S


def _startup_chain_blocks(traj, u, case, scheme, cfg):
    """One-step sensitivities of the trapezoidal-substepped startup intervals."""
    blocks = []
    n_sub = cfg.startup_substeps
    sub_scheme = Scheme.ti(scheme.h / n_sub)
    for sub in traj.startup_substates:
        S = np.eye(case.layout.n)
        for m in range(1, n_sub + 1):
            S_m = step_sensitivity(sub[m], [sub[m - 1]], u, case, sub_scheme, cfg)[0]
            S = S_m @ S
        blocks.append(S)
    return blocks


def propagate_chain(traj, u, case, scheme, cfg, n_obs, mode="exact"):
    """Chain dx_j/dx_0 for j = 0..n_obs-1 along a simulated trajectory.

    ``exact``: full variational recursion dx_j/dx_0 = sum_s S_s(j) dx_{j-s}/dx_0
    mirroring the simulator's startup exactly (order ramp, or recorded
    trapezoidal substeps).  ``paper``: the k-stride composition
    dx_j/dx_0 = (dx_j/dx_{j-k}) dx_{j-k}/dx_0 where each k-step block drops the
    couplings reaching behind its base state; identical to ``exact`` for
    single-step schemes.
    """
    _require_mu_mode(cfg)
    if mode not in ("exact", "paper"):
        raise ConfigurationError("chain mode must be 'exact' or 'paper'")
    if len(traj.times) < n_obs:
        raise DimensionError("trajectory shorter than the requested horizon")
    L = case.layout
    X = traj.states

    startup = {}
    uses_substeps = (
        scheme.method == "bdf" and scheme.k > 1 and cfg.startup_substeps > 1
    )
    if uses_substeps:
        if len(traj.startup_substates) != scheme.k - 1:
            raise GridObsError(
                "trajectory lacks the startup substates needed for the chain"
            )
        for j, blk in enumerate(_startup_chain_blocks(traj, u, case, scheme, cfg), 1):
            startup[j] = blk

    if mode == "exact":
        chain = [np.eye(L.n)]
        for j in range(1, n_obs):
            if j in startup:
                chain.append(startup[j] @ chain[j - 1])
                continue
            sch = ramped_scheme(scheme, j)
            history = [X[j - s] for s in range(1, sch.order + 1)]
            S = step_sensitivity(X[j], history, u, case, sch, cfg)
            acc = np.zeros((L.n, L.n))
            for s in range(1, sch.order + 1):
                acc += S[s - 1] @ chain[j - s]
            chain.append(acc)
        return SensitivityChain(steps=tuple(chain))

    # 'paper' mode: compose k-strides; blocks ignore dependencies behind their base
    k_g = scheme.order
    chain = [np.eye(L.n)]

    def block(j, base):
        """dx_j/dx_base under the self-contained block assumption."""
        local = {base: np.eye(L.n)}
        for m in range(base + 1, j + 1):
            if m in startup:
                local[m] = startup[m] @ local[m - 1]
                continue
            sch = ramped_scheme(scheme, m)
            S = step_sensitivity(X[m], [X[m - s] for s in range(1, sch.order + 1)], u, case, sch, cfg)
            acc = np.zeros((L.n, L.n))
            for s in range(1, sch.order + 1):
                prev = local.get(m - s)
                if prev is not None:
                    acc += S[s - 1] @ prev
            local[m] = acc
        return local[j]

    for j in range(1, n_obs):
        if j <= k_g:
            chain.append(block(j, 0))
        else:
            chain.append(block(j, j - k_g) @ chain[j - k_g])
    return SensitivityChain(steps=tuple(chain))


def build_observation_jacobian(chain, selection, layout):
    """Stack C dx_j/dx_0 over the horizon (row slices of the chain blocks)."""
    ch = selection.channel_indices(layout)
    if len(ch) == 0:
        return np.zeros((0, layout.n))
    return np.vstack([blk[ch, :] for blk in chain.steps])


def report_from_gramian(W):
    """Spectral summary of a Gramian; rank counts sqrt-eigenvalues of W (i.e.
    singular values of the stacked Jacobian) above sigma_max * n * eps * 1e3."""
    W = np.asarray(W, dtype=float)
    n = W.shape[0]
    eigs = scipy.linalg.eigvalsh(0.5 * (W + W.T)) if n else np.array([])
    sig = np.sqrt(np.clip(eigs, 0.0, None))
    smax = float(sig[-1]) if n else 0.0
    thresh = smax * n * np.finfo(float).eps * RANK_TOL_FACTOR
    rank = int(np.sum(sig > thresh)) if smax > 0 else 0
    min_eig = float(eigs[0]) if n else 0.0
    max_eig = float(eigs[-1]) if n else 0.0
    cond = max_eig / max(min_eig, COND_FLOOR)
    return ObservabilityReport(
        W_o=W,
        trace=float(np.trace(W)),
        min_eig=min_eig,
        max_eig=max_eig,
        condition_number=cond,
        numerical_rank=rank,
    )


def gramian(J):
    """Observability Gramian W_o = J^T J with spectrum diagnostics."""
    J = np.asarray(J, dtype=float)
    W = J.T @ J
    W = 0.5 * (W + W.T)
    return report_from_gramian(W)


def _exact_frobenius_sq(M):
    """Sum of squared entries as an exact rational (floats are dyadic)."""
    return sum(Fraction(v) * Fraction(v) for v in M.ravel().tolist())


def per_sensor_contributions(chain, layout):
    """Additive Gramian share W_{o,i} of every candidate bus, ascending order."""
    out = []
    for bus in range(1, layout.n_bus + 1):
        J_i = build_observation_jacobian(chain, SensorSelection.of([bus]), layout)
        W_i = J_i.T @ J_i
        W_i = 0.5 * (W_i + W_i.T)
        W_i.setflags(write=False)
        tr = _exact_frobenius_sq(J_i)
        out.append(
            GramianContribution(bus=bus, W=W_i, trace=float(tr), trace_exact=tr)
        )
    return tuple(out)


def gramian_from_contributions(contribs, buses):
    """Sum of the selected per-bus Gramians in ascending-bus order."""
    by_bus = {c.bus: c for c in contribs}
    missing = [b for b in buses if b not in by_bus]
    if missing:
        raise ConfigurationError(f"no contribution for bus(es) {missing}")
    n = contribs[0].W.shape[0]
    W = np.zeros((n, n))
    for b in sorted(buses):
        W = W + by_bus[b].W
    return W
