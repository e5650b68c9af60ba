"""Network cases: parsing, admittance assembly, power flow, and steady state.

A :class:`NetworkCase` is an immutable per-unit snapshot of the static grid:
buses (with loads and renewable injections), branches, and the synchronous
generator parameters needed by the dynamic model.  Cases are read either from
the MATPOWER ``.m`` table subset (``baseMVA``, ``bus``, ``gen``, ``branch``)
plus a generator-dynamics JSON sidecar, or from the self-contained canonical
JSON format written by :func:`case_to_json`.

Sign conventions.  Loads are withdrawals and renewables are injections, so the
bus balance reads ``P_G - P_L + P_R = sum_j v_i v_j (G_ij cos(th_ij) +
B_ij sin(th_ij))`` and ``Q_G - Q_L + Q_R = sum_j v_i v_j (G_ij sin(th_ij) -
B_ij cos(th_ij))``.  A solved case has these residuals below 1e-6 pu per bus.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    CaseParseError,
    CaseValidationError,
    ConfigurationError,
    ConvergenceError,
    InitializationError,
    SingularNetworkError,
)

OMEGA_SYNC = 120.0 * math.pi  # default synchronous speed, rad/s

SLACK, PV, PQ = "slack", "PV", "PQ"
_MATPOWER_BUS_TYPES = {1: PQ, 2: PV, 3: SLACK}


@dataclass(frozen=True)
class BusRecord:
    """One bus: kind, load, renewable injection, and voltage (magnitude, angle)."""

    id: int
    kind: str
    p_load: float = 0.0
    q_load: float = 0.0
    v: float = 1.0
    theta: float = 0.0
    p_ren: float = 0.0
    q_ren: float = 0.0
    gs: float = 0.0
    bs: float = 0.0
    ext_id: int | None = None

    def __post_init__(self):
        if self.kind not in (SLACK, PV, PQ):
            raise CaseValidationError(f"bus {self.id}: unknown kind {self.kind!r}")
        if self.v <= 0.0:
            raise CaseValidationError(f"bus {self.id}: voltage magnitude must be positive")
        if self.p_ren < 0.0 or self.q_ren < 0.0:
            raise CaseValidationError(f"bus {self.id}: renewable injection must be nonnegative")
        if self.ext_id is None:
            object.__setattr__(self, "ext_id", self.id)


@dataclass(frozen=True)
class Branch:
    """Series element between two buses with total line charging and off-nominal tap."""

    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0
    shift: float = 0.0  # phase shift, rad

    def __post_init__(self):
        if self.r == 0.0 and self.x == 0.0:
            raise SingularNetworkError(
                f"branch {self.from_bus}-{self.to_bus}: zero series impedance"
            )
        if self.tap == 0.0:
            object.__setattr__(self, "tap", 1.0)


@dataclass(frozen=True)
class GeneratorParams:
    """Two-axis machine constants plus the scheduled dispatch (pg_set, vg)."""

    bus: int
    M: float
    D: float
    x_d: float
    x_q: float
    x_d_p: float
    T_d0_p: float
    T_CH: float
    R_D: float
    pg_set: float = 0.0
    vg: float = 1.0

    def __post_init__(self):
        for name in ("M", "D", "x_d", "x_q", "x_d_p", "T_d0_p", "T_CH", "R_D"):
            if getattr(self, name) <= 0.0:
                raise CaseValidationError(f"generator at bus {self.bus}: {name} must be > 0")
        if self.x_d < self.x_d_p or self.x_q < self.x_d_p:
            raise CaseValidationError(
                f"generator at bus {self.bus}: require x_d >= x_d_p and x_q >= x_d_p"
            )


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Real and imaginary parts of the bus admittance matrix (pu)."""

    G: np.ndarray
    B: np.ndarray

    @property
    def n(self):
        return self.G.shape[0]


@dataclass(frozen=True)
class Disturbance:
    """Multiplicative load/renewable perturbation in percent of the base values."""

    alpha_l: float = 0.0
    alpha_r: float = 0.0
    renewable_fraction: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.renewable_fraction <= 1.0:
            raise CaseValidationError("renewable_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class StateLayout:
    """Index map for the flat state vector.

    Differential block ``x_d = [delta; omega; E'; T_M]`` (length ``4G``)
    followed by the algebraic block ``x_a = [P_G; Q_G; v; theta]`` (length
    ``2G + 2N``).  All indexing in the toolkit derives from this layout.
    """

    n_gen: int
    n_bus: int

    @property
    def n_d(self):
        return 4 * self.n_gen

    @property
    def n_a(self):
        return 2 * self.n_gen + 2 * self.n_bus

    @property
    def n(self):
        return self.n_d + self.n_a

    @property
    def delta(self):
        return slice(0, self.n_gen)

    @property
    def omega(self):
        return slice(self.n_gen, 2 * self.n_gen)

    @property
    def e_p(self):
        return slice(2 * self.n_gen, 3 * self.n_gen)

    @property
    def t_m(self):
        return slice(3 * self.n_gen, 4 * self.n_gen)

    @property
    def p_g(self):
        return slice(4 * self.n_gen, 5 * self.n_gen)

    @property
    def q_g(self):
        return slice(5 * self.n_gen, 6 * self.n_gen)

    @property
    def v(self):
        return slice(6 * self.n_gen, 6 * self.n_gen + self.n_bus)

    @property
    def theta(self):
        return slice(6 * self.n_gen + self.n_bus, 6 * self.n_gen + 2 * self.n_bus)

    def v_index(self, bus):
        """Flat index of the voltage magnitude of 1-based ``bus``."""
        return self.v.start + bus - 1

    def theta_index(self, bus):
        return self.theta.start + bus - 1

    def column_names(self):
        # delta..qg carry generator indices; v/theta carry bus indices
        names = []
        for prefix in ("delta", "omega", "ep", "tm", "pg", "qg"):
            names += [f"{prefix}_{i + 1}" for i in range(self.n_gen)]
        for prefix in ("v", "theta"):
            names += [f"{prefix}_{i + 1}" for i in range(self.n_bus)]
        return names


class StateVector:
    """Named read/write view over a flat state array (see :class:`StateLayout`)."""

    __slots__ = ("vec", "layout")

    def __init__(self, vec, layout):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (layout.n,):
            raise CaseValidationError(f"state vector must have length {layout.n}, got {vec.shape}")
        self.vec = vec
        self.layout = layout

    def _part(self, sl):
        return self.vec[sl]

    @property
    def delta(self):
        return self._part(self.layout.delta)

    @property
    def omega(self):
        return self._part(self.layout.omega)

    @property
    def e_p(self):
        return self._part(self.layout.e_p)

    @property
    def t_m(self):
        return self._part(self.layout.t_m)

    @property
    def p_g(self):
        return self._part(self.layout.p_g)

    @property
    def q_g(self):
        return self._part(self.layout.q_g)

    @property
    def v(self):
        return self._part(self.layout.v)

    @property
    def theta(self):
        return self._part(self.layout.theta)


@dataclass(frozen=True)
class _GenArrays:
    bus_idx: np.ndarray  # 0-based bus positions
    M: np.ndarray
    D: np.ndarray
    x_d: np.ndarray
    x_q: np.ndarray
    x_d_p: np.ndarray
    T_d0_p: np.ndarray
    T_CH: np.ndarray
    R_D: np.ndarray
    pg_set: np.ndarray
    vg: np.ndarray


@dataclass(frozen=True)
class NetworkCase:
    """Immutable per-unit grid snapshot; safe to share read-only across threads."""

    base_mva: float
    buses: tuple
    branches: tuple
    gens: tuple
    omega0: float = OMEGA_SYNC
    name: str = "case"

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise CaseValidationError(f"duplicate bus id(s): {dupes}")
        if ids != list(range(1, len(ids) + 1)):
            raise CaseValidationError("bus ids must be contiguous 1..N after remapping")
        slacks = [b.id for b in self.buses if b.kind == SLACK]
        if len(slacks) != 1:
            raise CaseValidationError(f"expected exactly one slack bus, found {slacks}")
        bus_set = set(ids)
        gen_buses = [g.bus for g in self.gens]
        if len(set(gen_buses)) != len(gen_buses):
            raise CaseValidationError("at most one generator per bus is supported")
        for g in self.gens:
            if g.bus not in bus_set:
                raise CaseValidationError(f"generator references unknown bus {g.bus}")
        for br in self.branches:
            if br.from_bus not in bus_set or br.to_bus not in bus_set:
                raise CaseValidationError(
                    f"branch {br.from_bus}-{br.to_bus} references unknown bus"
                )

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def n_gen(self):
        return len(self.gens)

    @property
    def slack_index(self):
        return next(i for i, b in enumerate(self.buses) if b.kind == SLACK)

    @cached_property
    def layout(self):
        return StateLayout(self.n_gen, self.n_bus)

    @cached_property
    def Y(self):
        return build_admittance(self)

    @cached_property
    def gen_arrays(self):
        gens = sorted(self.gens, key=lambda g: g.bus)
        arr = lambda name: np.array([getattr(g, name) for g in gens], dtype=float)
        return _GenArrays(
            bus_idx=np.array([g.bus - 1 for g in gens], dtype=int),
            M=arr("M"),
            D=arr("D"),
            x_d=arr("x_d"),
            x_q=arr("x_q"),
            x_d_p=arr("x_d_p"),
            T_d0_p=arr("T_d0_p"),
            T_CH=arr("T_CH"),
            R_D=arr("R_D"),
            pg_set=arr("pg_set"),
            vg=arr("vg"),
        )

    @cached_property
    def load_arrays(self):
        p = np.array([b.p_load for b in self.buses])
        q = np.array([b.q_load for b in self.buses])
        pr = np.array([b.p_ren for b in self.buses])
        qr = np.array([b.q_ren for b in self.buses])
        return p, q, pr, qr

    @property
    def bus_v(self):
        return np.array([b.v for b in self.buses])

    @property
    def bus_theta(self):
        return np.array([b.theta for b in self.buses])


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.DOTALL)
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([0-9eE+\-.]+)\s*;")

_SUPPORTED_TABLES = {"bus", "gen", "branch"}


def _strip_comments(text):
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_matrix(name, body):
    rows = []
    raw_rows = [r for r in re.split(r"[;\n]", body) if r.strip()]
    for ri, raw in enumerate(raw_rows, start=1):
        vals = []
        for ci, tok in enumerate(raw.split(), start=1):
            try:
                vals.append(float(tok))
            except ValueError:
                raise CaseParseError(
                    f"mpc.{name} row {ri}, column {ci}: could not parse {tok!r}"
                ) from None
        rows.append(vals)
    width = len(rows[0]) if rows else 0
    for ri, row in enumerate(rows, start=1):
        if len(row) != width:
            raise CaseParseError(
                f"mpc.{name} row {ri}: expected {width} columns, found {len(row)}"
            )
    return np.array(rows, dtype=float)


def read_matpower_tables(path):
    """Parse the supported MATPOWER table subset from a ``.m`` file.

    Returns (base_mva, tables, dropped) where ``dropped`` lists matrix names
    present in the file but outside the supported subset.
    """
    text = _strip_comments(Path(path).read_text())
    tables, dropped = {}, []
    for m in _MATRIX_RE.finditer(text):
        name, body = m.group(1), m.group(2)
        if name in _SUPPORTED_TABLES:
            tables[name] = _parse_matrix(name, body)
        else:
            dropped.append(name)
    base = None
    for m in _SCALAR_RE.finditer(text):
        if m.group(1) == "baseMVA":
            base = float(m.group(2))
    if base is None:
        raise CaseParseError(f"{path}: missing mpc.baseMVA")
    for required in ("bus", "gen", "branch"):
        if required not in tables:
            raise CaseParseError(f"{path}: missing mpc.{required} table")
    return base, tables, dropped


def _load_dyn_sidecar(dyn_path, gen_buses):
    try:
        raw = json.loads(Path(dyn_path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(
            f"generator dynamics sidecar not found: {dyn_path}"
        ) from None
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"{dyn_path}: invalid JSON ({exc})") from None
    by_bus = {int(g["bus"]): g for g in raw.get("generators", [])}
    missing = [b for b in gen_buses if b not in by_bus]
    if missing:
        raise ConfigurationError(
            f"{dyn_path}: missing dynamic parameters for generator bus(es) {missing}"
        )
    return float(raw.get("omega0", OMEGA_SYNC)), by_bus


def parse_matpower_case(path, dyn_path=None):
    """Read a MATPOWER ``.m`` subset (or canonical JSON) into a NetworkCase.

    For ``.m`` input the generator dynamic parameters come from a JSON sidecar,
    by default ``<stem>_dyn.json`` next to the case file.  Values are converted
    to per-unit on the case MVA base; bus ids are remapped to contiguous 1..N
    with the original ids retained as ``ext_id``.
    """
    path = Path(path)
    if path.suffix.lower() == ".json":
        return parse_case_json(path)
    base, tables, _ = read_matpower_tables(path)
    bus_t, gen_t, branch_t = tables["bus"], tables["gen"], tables["branch"]

    ext_ids = [int(r[0]) for r in bus_t]
    if len(set(ext_ids)) != len(ext_ids):
        raise CaseValidationError(f"{path}: duplicate bus id in mpc.bus")
    remap = {ext: i + 1 for i, ext in enumerate(ext_ids)}

    buses = []
    for r in bus_t:
        ext = int(r[0])
        btype = int(r[1])
        if btype not in _MATPOWER_BUS_TYPES:
            raise CaseParseError(f"{path}: bus {ext}: unsupported bus type {btype}")
        buses.append(
            BusRecord(
                id=remap[ext],
                kind=_MATPOWER_BUS_TYPES[btype],
                p_load=r[2] / base,
                q_load=r[3] / base,
                gs=r[4] / base,
                bs=r[5] / base,
                v=r[7],
                theta=math.radians(r[8]),
                ext_id=ext,
            )
        )

    branches = []
    for r in branch_t:
        if len(r) >= 11 and r[10] == 0.0:
            continue  # out-of-service branch
        branches.append(
            Branch(
                from_bus=remap[int(r[0])],
                to_bus=remap[int(r[1])],
                r=r[2],
                x=r[3],
                b=r[4],
                tap=(r[8] if len(r) > 8 else 1.0),
                shift=math.radians(r[9]) if len(r) > 9 else 0.0,
            )
        )

    gen_rows = [r for r in gen_t if len(r) < 8 or r[7] > 0.0]
    gen_buses = [remap[int(r[0])] for r in gen_rows]
    if dyn_path is None:
        dyn_path = path.with_name(path.stem + "_dyn.json")
    omega0, dyn = _load_dyn_sidecar(dyn_path, [int(r[0]) for r in gen_rows])

    gens = []
    for r in gen_rows:
        ext = int(r[0])
        d = dyn[ext]
        gens.append(
            GeneratorParams(
                bus=remap[ext],
                M=float(d["M"]),
                D=float(d["D"]),
                x_d=float(d["x_d"]),
                x_q=float(d["x_q"]),
                x_d_p=float(d["x_d_p"]),
                T_d0_p=float(d["T_d0_p"]),
                T_CH=float(d["T_CH"]),
                R_D=float(d["R_D"]),
                pg_set=r[1] / base,
                vg=r[5],
            )
        )

    # PV/slack bus voltage setpoints come from the gen table
    gen_vg = {g.bus: g.vg for g in gens}
    buses = [
        replace(b, v=gen_vg[b.id]) if (b.id in gen_vg and b.kind in (PV, SLACK)) else b
        for b in buses
    ]
    return NetworkCase(
        base_mva=base,
        buses=tuple(buses),
        branches=tuple(branches),
        gens=tuple(gens),
        omega0=omega0,
        name=path.stem,
    )


def case_to_json(case):
    """Canonical self-contained JSON form of a case (all quantities per-unit)."""
    return {
        "base_mva": case.base_mva,
        "omega0": case.omega0,
        "name": case.name,
        "buses": [
            {
                "id": b.id,
                "ext_id": b.ext_id,
                "kind": b.kind,
                "p_load": b.p_load,
                "q_load": b.q_load,
                "v": b.v,
                "theta": b.theta,
                "p_ren": b.p_ren,
                "q_ren": b.q_ren,
                "gs": b.gs,
                "bs": b.bs,
            }
            for b in case.buses
        ],
        "branches": [
            {
                "from": br.from_bus,
                "to": br.to_bus,
                "r": br.r,
                "x": br.x,
                "b": br.b,
                "tap": br.tap,
                "shift": br.shift,
            }
            for br in case.branches
        ],
        "generators": [
            {
                "bus": g.bus,
                "M": g.M,
                "D": g.D,
                "x_d": g.x_d,
                "x_q": g.x_q,
                "x_d_p": g.x_d_p,
                "T_d0_p": g.T_d0_p,
                "T_CH": g.T_CH,
                "R_D": g.R_D,
                "pg_set": g.pg_set,
                "vg": g.vg,
            }
            for g in case.gens
        ],
    }


def parse_case_json(path_or_dict):
    if isinstance(path_or_dict, (str, Path)):
        try:
            raw = json.loads(Path(path_or_dict).read_text())
        except json.JSONDecodeError as exc:
            raise CaseParseError(f"{path_or_dict}: invalid JSON ({exc})") from None
    else:
        raw = path_or_dict
    try:
        buses = tuple(
            BusRecord(
                id=int(b["id"]),
                kind=b["kind"],
                p_load=b["p_load"],
                q_load=b["q_load"],
                v=b["v"],
                theta=b["theta"],
                p_ren=b.get("p_ren", 0.0),
                q_ren=b.get("q_ren", 0.0),
                gs=b.get("gs", 0.0),
                bs=b.get("bs", 0.0),
                ext_id=int(b.get("ext_id", b["id"])),
            )
            for b in raw["buses"]
        )
        branches = tuple(
            Branch(
                from_bus=int(br["from"]),
                to_bus=int(br["to"]),
                r=br["r"],
                x=br["x"],
                b=br.get("b", 0.0),
                tap=br.get("tap", 1.0),
                shift=br.get("shift", 0.0),
            )
            for br in raw["branches"]
        )
        gens = tuple(
            GeneratorParams(
                bus=int(g["bus"]),
                M=g["M"],
                D=g["D"],
                x_d=g["x_d"],
                x_q=g["x_q"],
                x_d_p=g["x_d_p"],
                T_d0_p=g["T_d0_p"],
                T_CH=g["T_CH"],
                R_D=g["R_D"],
                pg_set=g.get("pg_set", 0.0),
                vg=g.get("vg", 1.0),
            )
            for g in raw["generators"]
        )
    except KeyError as exc:
        raise CaseParseError(f"canonical case JSON missing key {exc}") from None
    return NetworkCase(
        base_mva=float(raw["base_mva"]),
        buses=buses,
        branches=branches,
        gens=gens,
        omega0=float(raw.get("omega0", OMEGA_SYNC)),
        name=raw.get("name", "case"),
    )


# ---------------------------------------------------------------------------
# Admittance matrix
# ---------------------------------------------------------------------------


def build_admittance(case):
    """Assemble the bus admittance matrix from series/shunt elements."""
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        f, t = br.from_bus - 1, br.to_bus - 1
        ys = 1.0 / complex(br.r, br.x)
        ysh = 1j * br.b / 2.0
        a = br.tap * np.exp(1j * br.shift)
        Y[f, f] += (ys + ysh) / (br.tap**2)
        Y[t, t] += ys + ysh
        Y[f, t] += -ys / np.conj(a)
        Y[t, f] += -ys / a
    for b in case.buses:
        i = b.id - 1
        Y[i, i] += complex(b.gs, b.bs)
    G = Y.real.copy()
    B = Y.imag.copy()
    G.setflags(write=False)
    B.setflags(write=False)
    return AdmittanceMatrix(G=G, B=B)


def power_injections(G, B, v, theta):
    """Network injections ``P_i, Q_i`` at every bus for voltages (v, theta)."""
    dth = theta[:, None] - theta[None, :]
    ct, st = np.cos(dth), np.sin(dth)
    A = G * ct + B * st
    Bt = G * st - B * ct
    return v * (A @ v), v * (Bt @ v)


def injection_jacobian(G, B, v, theta):
    """Partials of the injections w.r.t. (theta, v): (dP_dth, dP_dv, dQ_dth, dQ_dv)."""
    dth = theta[:, None] - theta[None, :]
    ct, st = np.cos(dth), np.sin(dth)
    A = G * ct + B * st
    Bt = G * st - B * ct
    p = v * (A @ v)
    q = v * (Bt @ v)
    vv = v[:, None] * v[None, :]

    dP_dth = vv * Bt
    np.fill_diagonal(dP_dth, -q - v**2 * np.diag(B))
    dP_dv = v[:, None] * A
    np.fill_diagonal(dP_dv, p / v + v * np.diag(G))
    dQ_dth = -vv * A
    np.fill_diagonal(dQ_dth, p - v**2 * np.diag(G))
    dQ_dv = v[:, None] * Bt
    np.fill_diagonal(dQ_dv, q / v - v * np.diag(B))
    return dP_dth, dP_dv, dQ_dth, dQ_dv


def power_balance_residual(case, v=None, theta=None, pg=None, qg=None):
    """Per-bus residual of the balance equations at (v, theta).

    Generator terms default to zero at non-generator buses; at generator buses
    the scheduled active power is used (the slack row is excluded from the
    reported maximum, since its injection is free).
    Returns (rP, rQ, max_abs) where max_abs skips slack P and PV/slack Q rows.
    """
    adm = case.Y
    v = case.bus_v if v is None else v
    theta = case.bus_theta if theta is None else theta
    p_load, q_load, p_ren, q_ren = case.load_arrays
    p_inj, q_inj = power_injections(adm.G, adm.B, v, theta)
    pg_full = np.zeros(case.n_bus)
    qg_full = np.zeros(case.n_bus)
    ga = case.gen_arrays
    if pg is None:
        pg_full[ga.bus_idx] = ga.pg_set
    else:
        pg_full[ga.bus_idx] = pg
    if qg is not None:
        qg_full[ga.bus_idx] = qg
    rP = pg_full - p_load + p_ren - p_inj
    rQ = qg_full - q_load + q_ren - q_inj
    gen_buses = set(int(i) for i in ga.bus_idx)
    mask_p = np.ones(case.n_bus, dtype=bool)
    mask_q = np.ones(case.n_bus, dtype=bool)
    if pg is None:
        mask_p[case.slack_index] = False
    if qg is None:
        mask_q[list(gen_buses)] = False
    max_abs = max(
        float(np.max(np.abs(rP[mask_p]))) if mask_p.any() else 0.0,
        float(np.max(np.abs(rQ[mask_q]))) if mask_q.any() else 0.0,
    )
    return rP, rQ, max_abs


# ---------------------------------------------------------------------------
# AC power flow (Newton-Raphson, polar form)
# ---------------------------------------------------------------------------


def solve_power_flow(case, tol=1e-10, max_iter=30):
    """Newton AC power flow; returns a new case with solved bus voltages.

    PV and slack magnitudes are held at the generator setpoints; net injections
    include renewables as negative load.  Raises ConvergenceError on failure.
    """
    n = case.n_bus
    adm = case.Y
    p_load, q_load, p_ren, q_ren = case.load_arrays
    ga = case.gen_arrays

    kinds = [b.kind for b in case.buses]
    slack = case.slack_index
    pv = [i for i, k in enumerate(kinds) if k == PV]
    pq = [i for i, k in enumerate(kinds) if k == PQ]
    ang_idx = sorted(pv + pq)
    mag_idx = list(pq)

    v = case.bus_v.copy()
    theta = case.bus_theta.copy()
    vset = {int(bi): float(vg) for bi, vg in zip(ga.bus_idx, ga.vg)}
    for i in pv + [slack]:
        if i in vset:
            v[i] = vset[i]

    p_spec = -p_load + p_ren
    p_spec[ga.bus_idx] += ga.pg_set
    q_spec = -q_load + q_ren

    for _ in range(max_iter):
        p_inj, q_inj = power_injections(adm.G, adm.B, v, theta)
        dp = p_spec[ang_idx] - p_inj[ang_idx]
        dq = q_spec[mag_idx] - q_inj[mag_idx]
        mism = np.concatenate([dp, dq])
        if np.max(np.abs(mism)) < tol:
            break
        dP_dth, dP_dv, dQ_dth, dQ_dv = injection_jacobian(adm.G, adm.B, v, theta)
        J = np.block(
            [
                [dP_dth[np.ix_(ang_idx, ang_idx)], dP_dv[np.ix_(ang_idx, mag_idx)]],
                [dQ_dth[np.ix_(mag_idx, ang_idx)], dQ_dv[np.ix_(mag_idx, mag_idx)]],
            ]
        )
        try:
            step = np.linalg.solve(J, mism)
        except np.linalg.LinAlgError:
            raise ConvergenceError("power flow Jacobian is singular") from None
        theta[ang_idx] += step[: len(ang_idx)]
        v[mag_idx] += step[len(ang_idx) :]
    else:
        raise ConvergenceError(
            "power flow did not converge", residual_norm=float(np.max(np.abs(mism)))
        )

    buses = tuple(
        replace(b, v=float(v[i]), theta=float(theta[i])) for i, b in enumerate(case.buses)
    )
    return replace(case, buses=buses)


def solved_generator_outputs(case):
    """Generator (P_G, Q_G) implied by the solved bus voltages."""
    adm = case.Y
    p_load, q_load, p_ren, q_ren = case.load_arrays
    p_inj, q_inj = power_injections(adm.G, adm.B, case.bus_v, case.bus_theta)
    gb = case.gen_arrays.bus_idx
    pg = p_inj[gb] + p_load[gb] - p_ren[gb]
    qg = q_inj[gb] + q_load[gb] - q_ren[gb]
    return pg, qg


# ---------------------------------------------------------------------------
# Steady-state initialization
# ---------------------------------------------------------------------------


def init_steady_state(case, governor_sign="stable", tol_pf=1e-6, tol_residual=1e-8):
    """Back-solve machine internal states and inputs from the power flow.

    Terminal current from (P_G, Q_G, v, theta); rotor angle from the q-axis
    phasor ``V + j x_q I``; transient voltage from the stator equation;
    mechanical torque and inputs from the equilibrium of the rotor equations.
    Runs the Newton power-flow refiner first when the case is not solved to
    ``tol_pf``.  The returned pair satisfies ``f(x0, u0) = 0`` and
    ``g(x0) = 0`` elementwise to ``tol_residual``.
    """
    from . import dynamics  # local import to keep module layering acyclic

    _, _, worst = power_balance_residual(case)
    if worst > tol_pf:
        case = solve_power_flow(case)

    L = case.layout
    ga = case.gen_arrays
    gb = ga.bus_idx
    v = case.bus_v
    theta = case.bus_theta
    pg, qg = solved_generator_outputs(case)

    vph = v[gb] * np.exp(1j * theta[gb])
    current = np.conj((pg + 1j * qg) / vph)
    e_q_axis = vph + 1j * ga.x_q * current
    delta = np.angle(e_q_axis)
    # machine dq frame: V_d + jV_q = V exp(-j(delta - pi/2))
    rot = np.exp(-1j * (delta - np.pi / 2.0))
    v_dq = vph * rot
    i_dq = current * rot
    e_p = v_dq.imag + ga.x_d_p * i_dq.real

    omega = np.full(case.n_gen, case.omega0)
    t_m = pg.copy()
    e_fd = (ga.x_d / ga.x_d_p) * e_p - ((ga.x_d - ga.x_d_p) / ga.x_d_p) * v[gb] * np.cos(
        delta - theta[gb]
    )
    t_r = t_m.copy() if governor_sign == "stable" else -t_m

    x0 = np.empty(L.n)
    x0[L.delta] = delta
    x0[L.omega] = omega
    x0[L.e_p] = e_p
    x0[L.t_m] = t_m
    x0[L.p_g] = pg
    x0[L.q_g] = qg
    x0[L.v] = v
    x0[L.theta] = theta
    u0 = np.concatenate([e_fd, t_r])

    f0 = dynamics.eval_f(x0, u0, case, governor_sign=governor_sign)
    g0 = dynamics.eval_g(x0, case)
    worst_f = float(np.max(np.abs(f0)))
    worst_g = float(np.max(np.abs(g0)))
    if max(worst_f, worst_g) > tol_residual:
        bal = g0[2 * case.n_gen :]
        worst_bus = int(np.argmax(np.abs(bal)) % case.n_bus) + 1
        raise InitializationError(
            f"steady-state residual {max(worst_f, worst_g):.3e} exceeds {tol_residual:.1e}",
            worst_bus=worst_bus,
            residual=max(worst_f, worst_g),
        )
    return x0, u0


# ---------------------------------------------------------------------------
# Disturbances
# ---------------------------------------------------------------------------


def with_renewables(case, fraction):
    """Attach renewable injections sized as a fraction of each bus load.

    Buses with a negative load component get zero renewable on that channel,
    keeping the injections nonnegative.
    """
    if not 0.0 <= fraction <= 1.0:
        raise CaseValidationError("renewable fraction must lie in [0, 1]")
    buses = tuple(
        replace(
            b,
            p_ren=fraction * max(b.p_load, 0.0),
            q_ren=fraction * max(b.q_load, 0.0),
        )
        for b in case.buses
    )
    return replace(case, buses=buses)


def apply_disturbance(case, d):
    """Scale loads by (1 + alpha_l/100) and renewables by (1 + alpha_r/100)."""
    kl = 1.0 + d.alpha_l / 100.0
    kr = 1.0 + d.alpha_r / 100.0
    buses = tuple(
        replace(
            b,
            p_load=kl * b.p_load,
            q_load=kl * b.q_load,
            p_ren=kr * b.p_ren,
            q_ren=kr * b.q_ren,
        )
        for b in case.buses
    )
    return replace(case, buses=buses)
