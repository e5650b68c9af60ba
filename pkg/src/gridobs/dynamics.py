"""Right-hand sides of the grid DAE and their analytic Jacobian blocks.

Differential equations, per machine i (all angles in rad, powers in pu):

    d(delta_i)/dt = omega_i - omega0
    M_i d(omega_i)/dt = T_Mi - P_Gi - D_i (omega_i - omega0)
    T'_d0i d(E'_i)/dt = -(x_di/x'_di) E'_i
                        + ((x_di - x'_di)/x'_di) v_i cos(delta_i - theta_i) + E_fdi
    T_CHi d(T_Mi)/dt = s T_Mi - (1/R_Di)(omega_i - omega0) + T_ri

where the governor self-term sign ``s`` is -1 by default (``stable``) and +1
under ``governor_sign="printed"``; the positive sign makes the torque loop
divergent and is kept only as a reproduction switch.

Algebraic constraints: 2G stator rows followed by 2N bus balance rows.
Stator rows (written so the P_G/Q_G columns are -I):

    0 = E' v sin(D)/x'_d - c2 v^2 sin(2D) - P_G        with D = delta - theta
    0 = E' v cos(D)/x'_d - v^2 (cos^2(D)/x'_d + sin^2(D)/x_q) - Q_G

with c2 = (x_q - x'_d)/(2 x'_d x_q).  Balance rows use the withdrawal/injection
convention documented in :mod:`gridobs.netmodel`.

All functions are pure in (x, u, case) and safe for concurrent evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .netmodel import injection_jacobian, power_injections

GOVERNOR_SIGNS = ("stable", "printed")


def _governor_sign(governor_sign):
    if governor_sign not in GOVERNOR_SIGNS:
        raise ValueError(f"governor_sign must be one of {GOVERNOR_SIGNS}")
    return -1.0 if governor_sign == "stable" else 1.0


@dataclass(frozen=True)
class JacobianBlocks:
    """Partial derivatives of (f, g) w.r.t. the differential/algebraic blocks."""

    f_xd: np.ndarray  # n_d x n_d
    f_xa: np.ndarray  # n_d x n_a
    g_xd: np.ndarray  # n_a x n_d
    g_xa: np.ndarray  # n_a x n_a

    def stacked(self):
        """Full (n x n) Jacobian of [f; g] w.r.t. [x_d; x_a]."""
        return np.block([[self.f_xd, self.f_xa], [self.g_xd, self.g_xa]])


def _check_dims(x, case, u=None):
    L = case.layout
    if x.shape != (L.n,):
        raise DimensionError(f"state length {x.shape} != ({L.n},)")
    if u is not None and u.shape != (2 * case.n_gen,):
        raise DimensionError(f"input length {u.shape} != ({2 * case.n_gen},)")


def eval_f(x, u, case, governor_sign="stable"):
    """Differential right-hand side, length ``n_d = 4G``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_dims(x, case, u)
    L = case.layout
    ga = case.gen_arrays
    gb = ga.bus_idx
    sgn = _governor_sign(governor_sign)

    delta = x[L.delta]
    omega = x[L.omega]
    e_p = x[L.e_p]
    t_m = x[L.t_m]
    pg = x[L.p_g]
    v = x[L.v][gb]
    th = x[L.theta][gb]
    e_fd = u[: case.n_gen]
    t_r = u[case.n_gen :]

    dw = omega - case.omega0
    d = delta - th
    f = np.empty(L.n_d)
    f[L.delta] = dw
    f[L.omega] = (t_m - pg - ga.D * dw) / ga.M
    f[L.e_p] = (
        -(ga.x_d / ga.x_d_p) * e_p
        + ((ga.x_d - ga.x_d_p) / ga.x_d_p) * v * np.cos(d)
        + e_fd
    ) / ga.T_d0_p
    f[L.t_m] = (sgn * t_m - dw / ga.R_D + t_r) / ga.T_CH
    return f


def eval_g(x, case):
    """Algebraic residual: [stator P rows; stator Q rows; balance P; balance Q]."""
    x = np.asarray(x, dtype=float)
    _check_dims(x, case)
    L = case.layout
    ga = case.gen_arrays
    gb = ga.bus_idx
    G = case.n_gen
    N = case.n_bus

    delta = x[L.delta]
    e_p = x[L.e_p]
    pg = x[L.p_g]
    qg = x[L.q_g]
    v = x[L.v]
    theta = x[L.theta]
    vg = v[gb]
    d = delta - theta[gb]
    sd, cd = np.sin(d), np.cos(d)
    c2 = (ga.x_q - ga.x_d_p) / (2.0 * ga.x_d_p * ga.x_q)

    g_stator_p = e_p * vg * sd / ga.x_d_p - c2 * vg**2 * np.sin(2.0 * d) - pg
    g_stator_q = (
        e_p * vg * cd / ga.x_d_p - vg**2 * (cd**2 / ga.x_d_p + sd**2 / ga.x_q) - qg
    )

    adm = case.Y
    p_load, q_load, p_ren, q_ren = case.load_arrays
    p_inj, q_inj = power_injections(adm.G, adm.B, v, theta)
    pg_full = np.zeros(N)
    qg_full = np.zeros(N)
    pg_full[gb] = pg
    qg_full[gb] = qg
    bal_p = pg_full - p_load + p_ren - p_inj
    bal_q = qg_full - q_load + q_ren - q_inj

    out = np.empty(L.n_a)
    out[:G] = g_stator_p
    out[G : 2 * G] = g_stator_q
    out[2 * G : 2 * G + N] = bal_p
    out[2 * G + N :] = bal_q
    return out


def eval_jacobian_blocks(x, u, case, governor_sign="stable"):
    """Analytic Jacobian blocks of (eval_f, eval_g) at (x, u)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_dims(x, case, u)
    L = case.layout
    ga = case.gen_arrays
    gb = ga.bus_idx
    G = case.n_gen
    N = case.n_bus
    sgn = _governor_sign(governor_sign)
    rg = np.arange(G)

    delta = x[L.delta]
    e_p = x[L.e_p]
    v = x[L.v]
    theta = x[L.theta]
    vg = v[gb]
    d = delta - theta[gb]
    sd, cd = np.sin(d), np.cos(d)
    s2d, c2d = np.sin(2.0 * d), np.cos(2.0 * d)
    c2 = (ga.x_q - ga.x_d_p) / (2.0 * ga.x_d_p * ga.x_q)
    ke = (ga.x_d - ga.x_d_p) / ga.x_d_p  # saliency gain in the E' equation

    # offsets of the algebraic sub-blocks
    o_pg, o_qg, o_v, o_th = 0, G, 2 * G, 2 * G + N

    f_xd = np.zeros((L.n_d, L.n_d))
    f_xa = np.zeros((L.n_d, L.n_a))

    f_xd[L.delta, L.omega] = np.eye(G)
    f_xd[G + rg, G + rg] = -ga.D / ga.M
    f_xd[G + rg, 3 * G + rg] = 1.0 / ga.M
    f_xa[G + rg, o_pg + rg] = -1.0 / ga.M
    f_xd[2 * G + rg, rg] = -ke * vg * sd / ga.T_d0_p
    f_xd[2 * G + rg, 2 * G + rg] = -(ga.x_d / ga.x_d_p) / ga.T_d0_p
    f_xa[2 * G + rg, o_v + gb] = ke * cd / ga.T_d0_p
    f_xa[2 * G + rg, o_th + gb] = ke * vg * sd / ga.T_d0_p
    f_xd[3 * G + rg, G + rg] = -1.0 / (ga.R_D * ga.T_CH)
    f_xd[3 * G + rg, 3 * G + rg] = sgn / ga.T_CH

    g_xd = np.zeros((L.n_a, L.n_d))
    g_xa = np.zeros((L.n_a, L.n_a))

    # stator rows
    dP_dd = e_p * vg * cd / ga.x_d_p - 2.0 * c2 * vg**2 * c2d
    dP_dep = vg * sd / ga.x_d_p
    dP_dvg = e_p * sd / ga.x_d_p - 2.0 * c2 * vg * s2d
    dQ_dd = -e_p * vg * sd / ga.x_d_p + vg**2 * s2d * (1.0 / ga.x_d_p - 1.0 / ga.x_q)
    dQ_dep = vg * cd / ga.x_d_p
    dQ_dvg = e_p * cd / ga.x_d_p - 2.0 * vg * (cd**2 / ga.x_d_p + sd**2 / ga.x_q)

    g_xd[rg, rg] = dP_dd
    g_xd[rg, 2 * G + rg] = dP_dep
    g_xa[rg, o_pg + rg] = -1.0
    g_xa[rg, o_v + gb] = dP_dvg
    g_xa[rg, o_th + gb] = -dP_dd
    g_xd[G + rg, rg] = dQ_dd
    g_xd[G + rg, 2 * G + rg] = dQ_dep
    g_xa[G + rg, o_qg + rg] = -1.0
    g_xa[G + rg, o_v + gb] = dQ_dvg
    g_xa[G + rg, o_th + gb] = -dQ_dd

    # balance rows
    adm = case.Y
    dPdth, dPdv, dQdth, dQdv = injection_jacobian(adm.G, adm.B, v, theta)
    g_xa[2 * G : 2 * G + N, o_v : o_v + N] = -dPdv
    g_xa[2 * G : 2 * G + N, o_th : o_th + N] = -dPdth
    g_xa[2 * G + N :, o_v : o_v + N] = -dQdv
    g_xa[2 * G + N :, o_th : o_th + N] = -dQdth
    g_xa[2 * G + gb, o_pg + rg] = 1.0
    g_xa[2 * G + N + gb, o_qg + rg] = 1.0

    return JacobianBlocks(f_xd=f_xd, f_xa=f_xa, g_xd=g_xd, g_xa=g_xa)


def eval_fg(x, u, case, governor_sign="stable"):
    """Stacked [f; g] evaluation, length n."""
    return np.concatenate(
        [eval_f(x, u, case, governor_sign=governor_sign), eval_g(x, case)]
    )


def algebraic_sparsity_pattern(case):
    """Structural nonzero mask of g_xa implied by the admittance graph."""
    L = case.layout
    G = case.n_gen
    N = case.n_bus
    gb = case.gen_arrays.bus_idx
    adm = case.Y
    ynz = (adm.G != 0.0) | (adm.B != 0.0)
    np.fill_diagonal(ynz, True)  # diagonal terms always present
    mask = np.zeros((L.n_a, L.n_a), dtype=bool)
    rg = np.arange(G)
    o_pg, o_qg, o_v, o_th = 0, G, 2 * G, 2 * G + N
    # stator rows touch own (P_G|Q_G), own-bus v and theta
    mask[rg, o_pg + rg] = True
    mask[rg, o_v + gb] = True
    mask[rg, o_th + gb] = True
    mask[G + rg, o_qg + rg] = True
    mask[G + rg, o_v + gb] = True
    mask[G + rg, o_th + gb] = True
    # balance rows couple along Y sparsity and to the local generator
    mask[2 * G : 2 * G + N, o_v : o_v + N] = ynz
    mask[2 * G : 2 * G + N, o_th : o_th + N] = ynz
    mask[2 * G + N :, o_v : o_v + N] = ynz
    mask[2 * G + N :, o_th : o_th + N] = ynz
    mask[2 * G + gb, o_pg + rg] = True
    mask[2 * G + N + gb, o_qg + rg] = True
    return mask
