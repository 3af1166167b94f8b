"""Grid data model: buses, branches, devices, time series, and the case loader.

All quantities are stored internally in per-unit on the case's MVA base
(energies in p.u.-h, cost coefficients in $ per p.u.-h). Case files carry
physical units (MW, MVAr, MWh, $/MWh); the loader converts on the way in
and :func:`case_to_dict` converts back on the way out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

__all__ = [
    "Bus",
    "Branch",
    "Generator",
    "RenewableGen",
    "StorageUnit",
    "Svc",
    "TimeGrid",
    "NetworkCase",
    "Violation",
    "CaseError",
    "load_case",
    "save_case",
    "case_from_dict",
    "case_to_dict",
    "validate",
    "with_storage_fees",
    "with_rg_cost",
]


class CaseError(ValueError):
    """Raised when a case file cannot be parsed or violates an invariant."""


@dataclass
class Bus:
    id: int
    voltage_min: float = 0.9
    voltage_max: float = 1.1
    shunt_conductance: float = 0.0   # g_s, p.u.
    shunt_susceptance: float = 0.0   # b_s, p.u.
    is_reference: bool = False


@dataclass
class Branch:
    from_bus: int
    to_bus: int
    series_conductance: float        # g_e, p.u.
    series_susceptance: float        # b_e, p.u.
    charging_susceptance: float = 0.0  # b_c, p.u. (total line charging)
    tap_ratio: np.ndarray = field(default=None)    # per period, dimensionless
    phase_shift: np.ndarray = field(default=None)  # per period, radians
    thermal_limit: float = 10.0      # p.u. MVA


@dataclass
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_quadratic: float = 0.0  # $/(p.u.)^2 h
    cost_linear: float = 0.0     # $/(p.u. h)
    cost_constant: float = 0.0   # $/h
    ramp_up: float = 1e3         # p.u. per hour
    ramp_down: float = 1e3
    initial_output: float = 0.0  # p.u., predecessor for the first-period ramp


@dataclass
class RenewableGen:
    bus: int
    forecast: np.ndarray          # per period, p.u.
    p_min: np.ndarray             # per period, p.u.
    cost_linear: np.ndarray       # per period, $/(p.u. h)
    curtail_penalty: float = 0.0  # $/(p.u. h)
    apparent_capacity: float = 1.0  # p.u.


@dataclass
class StorageUnit:
    bus: int
    eta_ch: float
    eta_dc: float
    self_discharge: float         # fraction lost per scheduling interval
    soc_initial: float            # p.u.-h
    soc_min: float
    soc_max: float
    p_ch_max: float               # p.u.
    p_dc_max: float
    apparent_capacity: float      # p.u.
    charge_fee: np.ndarray = field(default=None)     # per period, $/(p.u. h)
    discharge_fee: np.ndarray = field(default=None)  # per period, $/(p.u. h)
    loss_penalty: float = 0.0     # $/(p.u. h)


@dataclass
class Svc:
    bus: int
    q_min: float
    q_max: float


@dataclass
class TimeGrid:
    n_periods: int
    interval_hours: float
    reserve_up: np.ndarray    # per period, p.u.
    reserve_down: np.ndarray
    load_p: np.ndarray        # (n_buses, T), p.u.
    load_q: np.ndarray


@dataclass
class NetworkCase:
    base_mva: float
    buses: list[Bus]
    branches: list[Branch]
    generators: list[Generator]
    renewables: list[RenewableGen]
    storages: list[StorageUnit]
    svcs: list[Svc]
    time_grid: TimeGrid
    name: str = ""

    def __post_init__(self):
        self._bus_pos = {b.id: k for k, b in enumerate(self.buses)}

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_periods(self) -> int:
        return self.time_grid.n_periods

    def bus_index(self, bus_id: int) -> int:
        """Position of a bus id in the bus list."""
        return self._bus_pos[bus_id]

    def reference_index(self) -> int:
        for k, b in enumerate(self.buses):
            if b.is_reference:
                return k
        raise CaseError("case has no reference bus")


@dataclass
class Violation:
    entity: str   # e.g. "storage[0]", "bus[3]", "case"
    field: str
    rule: str

    def __str__(self):
        return f"{self.entity}.{self.field}: {self.rule}"


# ---------------------------------------------------------------------------
# parsing helpers

def _per_period(value, T: int, what: str) -> np.ndarray:
    """Broadcast a scalar to length T, or length-check a list."""
    if np.isscalar(value):
        return np.full(T, float(value))
    arr = np.asarray(value, dtype=float)
    if arr.shape != (T,):
        raise CaseError(f"{what}: expected scalar or length-{T} array, got shape {arr.shape}")
    return arr


def _req(doc: dict, key: str, where: str):
    if key not in doc:
        raise CaseError(f"{where}: missing required field '{key}'")
    return doc[key]


def case_from_dict(doc: dict[str, Any]) -> NetworkCase:
    """Build a per-unit NetworkCase from a physical-unit case document."""
    try:
        base = float(_req(doc, "base_mva", "case"))
        time = _req(doc, "time", "case")
        T = int(_req(time, "T", "time"))
        dt = float(_req(time, "dt_hours", "time"))
        if T < 1:
            raise CaseError("time.T: must be >= 1")
        sru = _per_period(time.get("sru", 0.0), T, "time.sru") / base
        srd = _per_period(time.get("srd", 0.0), T, "time.srd") / base

        buses = []
        for k, b in enumerate(_req(doc, "buses", "case")):
            buses.append(Bus(
                id=int(_req(b, "id", f"buses[{k}]")),
                voltage_min=float(b.get("voltage_min", 0.9)),
                voltage_max=float(b.get("voltage_max", 1.1)),
                shunt_conductance=float(b.get("shunt_conductance", 0.0)),
                shunt_susceptance=float(b.get("shunt_susceptance", 0.0)),
                is_reference=bool(b.get("is_reference", False)),
            ))

        branches = []
        for k, e in enumerate(_req(doc, "branches", "case")):
            where = f"branches[{k}]"
            branches.append(Branch(
                from_bus=int(_req(e, "from_bus", where)),
                to_bus=int(_req(e, "to_bus", where)),
                series_conductance=float(_req(e, "series_conductance", where)),
                series_susceptance=float(_req(e, "series_susceptance", where)),
                charging_susceptance=float(e.get("charging_susceptance", 0.0)),
                tap_ratio=_per_period(e.get("tap_ratio", 1.0), T, f"{where}.tap_ratio"),
                phase_shift=_per_period(e.get("phase_shift", 0.0), T, f"{where}.phase_shift"),
                thermal_limit=float(e.get("thermal_limit", 1e3 * base)) / base,
            ))

        gens = []
        for k, g in enumerate(doc.get("generators", [])):
            where = f"generators[{k}]"
            gens.append(Generator(
                bus=int(_req(g, "bus", where)),
                p_min=float(_req(g, "p_min", where)) / base,
                p_max=float(_req(g, "p_max", where)) / base,
                q_min=float(g.get("q_min", -1e3 * base)) / base,
                q_max=float(g.get("q_max", 1e3 * base)) / base,
                cost_quadratic=float(g.get("cost_quadratic", 0.0)) * base * base,
                cost_linear=float(g.get("cost_linear", 0.0)) * base,
                cost_constant=float(g.get("cost_constant", 0.0)),
                ramp_up=float(g.get("ramp_up", 1e6)) / base,
                ramp_down=float(g.get("ramp_down", 1e6)) / base,
                initial_output=float(g.get("initial_output", 0.0)) / base,
            ))

        rgs = []
        for k, r in enumerate(doc.get("renewables", [])):
            where = f"renewables[{k}]"
            rgs.append(RenewableGen(
                bus=int(_req(r, "bus", where)),
                forecast=_per_period(_req(r, "forecast", where), T, f"{where}.forecast") / base,
                p_min=_per_period(r.get("p_min", 0.0), T, f"{where}.p_min") / base,
                cost_linear=_per_period(r.get("cost_linear", 0.0), T, f"{where}.cost_linear") * base,
                curtail_penalty=float(r.get("curtail_penalty", 0.0)) * base,
                apparent_capacity=float(_req(r, "apparent_capacity", where)) / base,
            ))

        storages = []
        for k, s in enumerate(doc.get("storages", [])):
            where = f"storages[{k}]"
            storages.append(StorageUnit(
                bus=int(_req(s, "bus", where)),
                eta_ch=float(_req(s, "eta_ch", where)),
                eta_dc=float(_req(s, "eta_dc", where)),
                self_discharge=float(s.get("self_discharge", 0.0)),
                soc_initial=float(_req(s, "soc_initial", where)) / base,
                soc_min=float(_req(s, "soc_min", where)) / base,
                soc_max=float(_req(s, "soc_max", where)) / base,
                p_ch_max=float(_req(s, "p_ch_max", where)) / base,
                p_dc_max=float(_req(s, "p_dc_max", where)) / base,
                apparent_capacity=float(_req(s, "apparent_capacity", where)) / base,
                charge_fee=_per_period(s.get("charge_fee", 0.0), T, f"{where}.charge_fee") * base,
                discharge_fee=_per_period(s.get("discharge_fee", 0.0), T, f"{where}.discharge_fee") * base,
                loss_penalty=float(s.get("loss_penalty", 0.0)) * base,
            ))

        svcs = []
        for k, v in enumerate(doc.get("svcs", [])):
            where = f"svcs[{k}]"
            svcs.append(Svc(
                bus=int(_req(v, "bus", where)),
                q_min=float(_req(v, "q_min", where)) / base,
                q_max=float(_req(v, "q_max", where)) / base,
            ))

        nb = len(buses)
        load_p = np.zeros((nb, T))
        load_q = np.zeros((nb, T))
        pos = {b.id: k for k, b in enumerate(buses)}
        for bus_key, ld in doc.get("loads", {}).items():
            bid = int(bus_key)
            if bid not in pos:
                raise CaseError(f"loads[{bus_key}]: unknown bus id {bid}")
            load_p[pos[bid]] = _per_period(_req(ld, "p_mw", f"loads[{bus_key}]"), T,
                                           f"loads[{bus_key}].p_mw") / base
            load_q[pos[bid]] = _per_period(ld.get("q_mvar", 0.0), T,
                                           f"loads[{bus_key}].q_mvar") / base

        grid = TimeGrid(n_periods=T, interval_hours=dt, reserve_up=sru,
                        reserve_down=srd, load_p=load_p, load_q=load_q)
        case = NetworkCase(base_mva=base, buses=buses, branches=branches,
                           generators=gens, renewables=rgs, storages=storages,
                           svcs=svcs, time_grid=grid, name=str(doc.get("name", "")))
    except CaseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseError(f"malformed case document: {exc}") from exc

    violations = validate(case)
    if violations:
        raise CaseError(f"invalid case: {violations[0]}")
    return case


def load_case(path) -> NetworkCase:
    """Parse a JSON case file and return a validated per-unit NetworkCase."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise CaseError(f"cannot read case file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CaseError(f"cannot parse case file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CaseError(f"case file {path}: top level must be an object")
    return case_from_dict(doc)


def case_to_dict(case: NetworkCase) -> dict[str, Any]:
    """Serialize back to the physical-unit case document schema."""
    base = case.base_mva
    T = case.n_periods
    doc: dict[str, Any] = {
        "name": case.name,
        "base_mva": base,
        "time": {
            "T": T,
            "dt_hours": case.time_grid.interval_hours,
            "sru": (case.time_grid.reserve_up * base).tolist(),
            "srd": (case.time_grid.reserve_down * base).tolist(),
        },
        "buses": [
            {
                "id": b.id,
                "voltage_min": b.voltage_min,
                "voltage_max": b.voltage_max,
                "shunt_conductance": b.shunt_conductance,
                "shunt_susceptance": b.shunt_susceptance,
                "is_reference": b.is_reference,
            }
            for b in case.buses
        ],
        "branches": [
            {
                "from_bus": e.from_bus,
                "to_bus": e.to_bus,
                "series_conductance": e.series_conductance,
                "series_susceptance": e.series_susceptance,
                "charging_susceptance": e.charging_susceptance,
                "tap_ratio": e.tap_ratio.tolist(),
                "phase_shift": e.phase_shift.tolist(),
                "thermal_limit": e.thermal_limit * base,
            }
            for e in case.branches
        ],
        "generators": [
            {
                "bus": g.bus,
                "p_min": g.p_min * base,
                "p_max": g.p_max * base,
                "q_min": g.q_min * base,
                "q_max": g.q_max * base,
                "cost_quadratic": g.cost_quadratic / (base * base),
                "cost_linear": g.cost_linear / base,
                "cost_constant": g.cost_constant,
                "ramp_up": g.ramp_up * base,
                "ramp_down": g.ramp_down * base,
                "initial_output": g.initial_output * base,
            }
            for g in case.generators
        ],
        "renewables": [
            {
                "bus": r.bus,
                "forecast": (r.forecast * base).tolist(),
                "p_min": (r.p_min * base).tolist(),
                "cost_linear": (r.cost_linear / base).tolist(),
                "curtail_penalty": r.curtail_penalty / base,
                "apparent_capacity": r.apparent_capacity * base,
            }
            for r in case.renewables
        ],
        "storages": [
            {
                "bus": s.bus,
                "eta_ch": s.eta_ch,
                "eta_dc": s.eta_dc,
                "self_discharge": s.self_discharge,
                "soc_initial": s.soc_initial * base,
                "soc_min": s.soc_min * base,
                "soc_max": s.soc_max * base,
                "p_ch_max": s.p_ch_max * base,
                "p_dc_max": s.p_dc_max * base,
                "apparent_capacity": s.apparent_capacity * base,
                "charge_fee": (s.charge_fee / base).tolist(),
                "discharge_fee": (s.discharge_fee / base).tolist(),
                "loss_penalty": s.loss_penalty / base,
            }
            for s in case.storages
        ],
        "svcs": [
            {"bus": v.bus, "q_min": v.q_min * base, "q_max": v.q_max * base}
            for v in case.svcs
        ],
        "loads": {},
    }
    for k, b in enumerate(case.buses):
        p = case.time_grid.load_p[k]
        q = case.time_grid.load_q[k]
        if np.any(p != 0.0) or np.any(q != 0.0):
            doc["loads"][str(b.id)] = {
                "p_mw": (p * base).tolist(),
                "q_mvar": (q * base).tolist(),
            }
    return doc


def save_case(case: NetworkCase, path) -> None:
    with open(path, "w") as fh:
        json.dump(case_to_dict(case), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# validation

def _check_finite(out, entity, name, value):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if not np.all(np.isfinite(arr)):
        out.append(Violation(entity, name, "must be finite"))
        return False
    return True


def validate(case: NetworkCase) -> list[Violation]:
    """Check every type invariant; returns one descriptor per violation."""
    out: list[Violation] = []
    T = case.n_periods
    ids = {b.id for b in case.buses}

    if len(ids) != len(case.buses):
        out.append(Violation("case", "buses", "bus ids must be unique"))
    n_ref = sum(1 for b in case.buses if b.is_reference)
    if n_ref != 1:
        out.append(Violation("case", "buses", f"exactly one reference bus required, found {n_ref}"))
    if case.base_mva <= 0:
        out.append(Violation("case", "base_mva", "must be positive"))
    if T < 1:
        out.append(Violation("case", "time.T", "must be >= 1"))
    if case.time_grid.interval_hours <= 0:
        out.append(Violation("case", "time.dt_hours", "must be positive"))
    for name in ("reserve_up", "reserve_down"):
        if getattr(case.time_grid, name).shape != (T,):
            out.append(Violation("case", f"time.{name}", f"must have length T={T}"))
    for name in ("load_p", "load_q"):
        if getattr(case.time_grid, name).shape != (case.n_buses, T):
            out.append(Violation("case", f"loads.{name}", f"must have shape ({case.n_buses}, {T})"))

    for k, b in enumerate(case.buses):
        ent = f"bus[{b.id}]"
        if not (0 < b.voltage_min <= b.voltage_max):
            out.append(Violation(ent, "voltage_min", "requires 0 < voltage_min <= voltage_max"))

    for k, e in enumerate(case.branches):
        ent = f"branch[{k}]"
        if e.from_bus == e.to_bus:
            out.append(Violation(ent, "to_bus", "from_bus and to_bus must differ"))
        for side in ("from_bus", "to_bus"):
            if getattr(e, side) not in ids:
                out.append(Violation(ent, side, f"references missing bus {getattr(e, side)}"))
        if e.tap_ratio.shape != (T,) or e.phase_shift.shape != (T,):
            out.append(Violation(ent, "tap_ratio", f"per-period arrays must have length T={T}"))
        elif np.any(e.tap_ratio <= 0):
            out.append(Violation(ent, "tap_ratio", "entries must be positive"))
        if not e.thermal_limit > 0:
            out.append(Violation(ent, "thermal_limit", "must be positive"))

    for k, g in enumerate(case.generators):
        ent = f"generator[{k}]"
        if g.bus not in ids:
            out.append(Violation(ent, "bus", f"references missing bus {g.bus}"))
        if g.p_min > g.p_max:
            out.append(Violation(ent, "p_min", "requires p_min <= p_max"))
        if g.q_min > g.q_max:
            out.append(Violation(ent, "q_min", "requires q_min <= q_max"))
        if g.ramp_up < 0 or g.ramp_down < 0:
            out.append(Violation(ent, "ramp_up", "ramp rates must be nonnegative"))
        if g.cost_quadratic < 0:
            out.append(Violation(ent, "cost_quadratic", "must be nonnegative"))

    for k, r in enumerate(case.renewables):
        ent = f"renewable[{k}]"
        if r.bus not in ids:
            out.append(Violation(ent, "bus", f"references missing bus {r.bus}"))
        if r.forecast.shape != (T,) or r.p_min.shape != (T,) or r.cost_linear.shape != (T,):
            out.append(Violation(ent, "forecast", f"per-period arrays must have length T={T}"))
        else:
            if np.any(r.p_min < 0):
                out.append(Violation(ent, "p_min", "entries must be nonnegative"))
            if np.any(r.p_min > r.forecast):
                out.append(Violation(ent, "p_min", "entries must not exceed the forecast"))
        if not r.apparent_capacity > 0:
            out.append(Violation(ent, "apparent_capacity", "must be positive"))

    for k, s in enumerate(case.storages):
        ent = f"storage[{k}]"
        if s.bus not in ids:
            out.append(Violation(ent, "bus", f"references missing bus {s.bus}"))
        if not (0 < s.eta_ch <= 1):
            out.append(Violation(ent, "eta_ch", "must lie in (0, 1]"))
        if not (0 < s.eta_dc <= 1):
            out.append(Violation(ent, "eta_dc", "must lie in (0, 1]"))
        elif not (1.0 / s.eta_dc - s.eta_ch > 1e-12):
            # the charge/discharge threshold denominators vanish otherwise
            out.append(Violation(ent, "eta_dc", "1/eta_dc > eta_ch violated"))
        if not (0 <= s.self_discharge < 1):
            out.append(Violation(ent, "self_discharge", "must lie in [0, 1)"))
        if not (s.soc_min <= s.soc_initial <= s.soc_max):
            out.append(Violation(ent, "soc_initial", "requires soc_min <= soc_initial <= soc_max"))
        if not s.p_ch_max > 0:
            out.append(Violation(ent, "p_ch_max", "must be positive"))
        if not s.p_dc_max > 0:
            out.append(Violation(ent, "p_dc_max", "must be positive"))
        if not s.apparent_capacity > 0:
            out.append(Violation(ent, "apparent_capacity", "must be positive"))
        if s.charge_fee.shape != (T,) or s.discharge_fee.shape != (T,):
            out.append(Violation(ent, "charge_fee", f"per-period arrays must have length T={T}"))

    for k, v in enumerate(case.svcs):
        ent = f"svc[{k}]"
        if v.bus not in ids:
            out.append(Violation(ent, "bus", f"references missing bus {v.bus}"))
        if v.q_min > v.q_max:
            out.append(Violation(ent, "q_min", "requires q_min <= q_max"))

    out.extend(_connectivity(case))
    return out


def _connectivity(case: NetworkCase) -> list[Violation]:
    """Every bus must be reachable through the branch graph."""
    nb = case.n_buses
    if nb <= 1:
        return []
    pos = {b.id: k for k, b in enumerate(case.buses)}
    adj: list[list[int]] = [[] for _ in range(nb)]
    for e in case.branches:
        if e.from_bus in pos and e.to_bus in pos:
            adj[pos[e.from_bus]].append(pos[e.to_bus])
            adj[pos[e.to_bus]].append(pos[e.from_bus])
    seen = [False] * nb
    stack = [0]
    seen[0] = True
    while stack:
        u = stack.pop()
        for w in adj[u]:
            if not seen[w]:
                seen[w] = True
                stack.append(w)
    out = []
    for k, ok in enumerate(seen):
        if not ok:
            out.append(Violation(f"bus[{case.buses[k].id}]", "connectivity",
                                 "not connected to the rest of the network"))
    return out


# ---------------------------------------------------------------------------
# scenario overrides (used by the sweep front end)

def with_storage_fees(case: NetworkCase, charge_per_mwh: float | None = None,
                      discharge_per_mwh: float | None = None,
                      only: set[int] | None = None) -> NetworkCase:
    """Copy of the case with uniform storage fees ($/MWh) across all periods.

    `only` restricts the rewrite to the given storage positions.
    """
    T = case.n_periods
    base = case.base_mva
    storages = []
    for k, s in enumerate(case.storages):
        if only is not None and k not in only:
            storages.append(s)
            continue
        ch = s.charge_fee if charge_per_mwh is None else np.full(T, charge_per_mwh * base)
        dc = s.discharge_fee if discharge_per_mwh is None else np.full(T, discharge_per_mwh * base)
        storages.append(replace(s, charge_fee=ch, discharge_fee=dc))
    return replace(case, storages=storages)


def with_rg_cost(case: NetworkCase, cost_per_mwh: float) -> NetworkCase:
    """Copy of the case with a uniform linear cost ($/MWh) on every RG."""
    T = case.n_periods
    rgs = [replace(r, cost_linear=np.full(T, cost_per_mwh * case.base_mva))
           for r in case.renewables]
    return replace(case, renewables=rgs)
