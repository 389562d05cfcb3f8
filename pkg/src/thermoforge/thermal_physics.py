"""Lumped-parameter thermal network for a pumped single-phase coolant loop.

Flow path: tank -> tank junction -> CPHX branches (series chains, possibly
splitting further) -> merge -> LLHX hot side -> tank. The LLHX cold side is
fed from an external sink reservoir at fixed temperature.

State layout (2n+4 temperatures for n CPHX nodes):
    [0]            tank fluid
    [1 .. n]       CPHX fluid, node order 1..n
    [n+1 .. 2n]    CPHX wall, node order 1..n
    [2n+1]         LLHX wall
    [2n+2]         LLHX hot-side fluid
    [2n+3]         LLHX cold-side fluid

Heat loads enter at CPHX walls. Endurance is the first time any temperature
reaches its class bound. All loads cross the API in kW and are converted to
watts exactly once, at the derivative evaluator.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .config_enum import TANK, ConfigGraph, canonicalize
from .errors import DivergenceError, ValidationError

MERGE_FLOW_GUARD = 1e-9  # kg/s; below this the mixed exit temp is unweighted


@dataclass(frozen=True)
class ThermalParams:
    """Loop hardware constants. Temperatures degC, masses kg, flows kg/s."""

    sink_temp: float = 15.0
    pump_flow: float = 0.4
    sink_flow: float = 0.2
    flow_accel_max: float = 0.05  # slew bound on independent flows, kg/s^2
    cphx_wall_mass: float = 1.15
    cphx_fluid_mass: float = 0.2
    llhx_wall_mass: float = 1.2
    llhx_fluid_mass: float = 0.5  # hot side and cold side each
    tank_fluid_mass: float = 2.01
    c_fluid: float = 3680.0  # J/(kg K)
    c_wall: float = 900.0
    hA_cphx: float = 500.0  # W/K, per CPHX wall-fluid interface
    hA_llhx: float = 1000.0  # W/K, each LLHX side
    wall_temp_init: float = 20.0
    fluid_temp_init: float = 20.0
    cold_temp_init: float = 15.0
    wall_temp_max: float = 45.0
    fluid_temp_max: float = 45.0
    cold_temp_max: float = 45.0

    def validate(self) -> "ThermalParams":
        positive = (
            "pump_flow", "sink_flow", "flow_accel_max",
            "cphx_wall_mass", "cphx_fluid_mass", "llhx_wall_mass",
            "llhx_fluid_mass", "tank_fluid_mass",
            "c_fluid", "c_wall", "hA_cphx", "hA_llhx",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("wall_temp_max", "fluid_temp_max", "cold_temp_max"):
            if not np.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        if self.wall_temp_max <= self.wall_temp_init:
            raise ValidationError("wall_temp_max must exceed wall_temp_init")
        if self.fluid_temp_max <= self.fluid_temp_init:
            raise ValidationError("fluid_temp_max must exceed fluid_temp_init")
        if self.cold_temp_max <= self.cold_temp_init:
            raise ValidationError("cold_temp_max must exceed cold_temp_init")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, obj: dict) -> "ThermalParams":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown thermal parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in obj.items()}).validate()


@dataclass(frozen=True)
class FlowLayout:
    """Affine decomposition of branch flows into independent controls.

    Branch flow through CPHX i+1 is row i of:
        mdot_branch = from_pump * mdot_p + from_indep @ mdot_indep
    Dependent (junction-closing) flows satisfy
        mdot_dep = dep_from_indep @ mdot_indep + dep_from_pump * mdot_p
    and Z maps [mdot_p; mdot_indep; mdot_t] to every physical stream:
    n branch flows, then LLHX hot inflow, tank return, sink cold stream.
    """

    n_independent: int
    from_pump: np.ndarray  # (n,)
    from_indep: np.ndarray  # (n, dof)
    dep_from_pump: np.ndarray  # (n_dep,)
    dep_from_indep: np.ndarray  # (n_dep, dof)
    independent_branches: tuple[int, ...]  # node ids owning each indep var
    dependent_branches: tuple[int, ...]
    junctions: tuple[tuple[int, tuple[int, ...], int], ...]  # (vertex, children, first indep idx)
    routing: np.ndarray = field(repr=False, default=None)  # Z, (n+3, dof+2)


class PhysicsGraph:
    """Configuration graph compiled against hardware parameters."""

    def __init__(self, graph: ConfigGraph, params: ThermalParams):
        self.graph = canonicalize(graph)
        self.params = params.validate()
        n = graph.n_nodes
        self.n_nodes = n
        self.n_temps = 2 * n + 4
        self.tank_idx = 0
        self.fluid_idx = np.arange(1, n + 1)
        self.wall_idx = np.arange(n + 1, 2 * n + 1)
        self.llhx_wall_idx = 2 * n + 1
        self.hot_idx = 2 * n + 2
        self.cold_idx = 2 * n + 3

        # upstream temperature index per branch: tank or the parent's fluid node
        up = np.empty(n, dtype=int)
        for i in range(n):
            p = graph.parents[i]
            up[i] = self.tank_idx if p == TANK else p
        self.up_idx = up
        self.leaf_branch_idx = np.array([v - 1 for v in self.graph.leaves()], dtype=int)

        self.layout = _build_flow_layout(self.graph, params)
        self.n_independent = self.layout.n_independent
        self.n_states = self.n_temps + self.n_independent

        p = self.params
        cap = np.empty(self.n_temps)
        cap[self.tank_idx] = p.tank_fluid_mass * p.c_fluid
        cap[self.fluid_idx] = p.cphx_fluid_mass * p.c_fluid
        cap[self.wall_idx] = p.cphx_wall_mass * p.c_wall
        cap[self.llhx_wall_idx] = p.llhx_wall_mass * p.c_wall
        cap[self.hot_idx] = p.llhx_fluid_mass * p.c_fluid
        cap[self.cold_idx] = p.llhx_fluid_mass * p.c_fluid
        self.capacity = cap

        lim = np.empty(self.n_temps)
        lim[self.tank_idx] = p.fluid_temp_max
        lim[self.fluid_idx] = p.fluid_temp_max
        lim[self.wall_idx] = p.wall_temp_max
        lim[self.llhx_wall_idx] = p.wall_temp_max
        lim[self.hot_idx] = p.fluid_temp_max
        lim[self.cold_idx] = p.cold_temp_max
        self.temp_limits = lim

        init = np.empty(self.n_temps)
        init[self.tank_idx] = p.fluid_temp_init
        init[self.fluid_idx] = p.fluid_temp_init
        init[self.wall_idx] = p.wall_temp_init
        init[self.llhx_wall_idx] = p.wall_temp_init
        init[self.hot_idx] = p.fluid_temp_init
        init[self.cold_idx] = p.cold_temp_init
        self.initial_temps = init

        from . import _kernels

        consts = np.empty(11)
        consts[_kernels.C_FLUID] = p.c_fluid
        consts[_kernels.HA_CPHX] = p.hA_cphx
        consts[_kernels.HA_LLHX] = p.hA_llhx
        consts[_kernels.CAP_F] = p.cphx_fluid_mass * p.c_fluid
        consts[_kernels.CAP_W] = p.cphx_wall_mass * p.c_wall
        consts[_kernels.CAP_LW] = p.llhx_wall_mass * p.c_wall
        consts[_kernels.CAP_H] = p.llhx_fluid_mass * p.c_fluid
        consts[_kernels.TANK_MASS] = p.tank_fluid_mass
        consts[_kernels.PUMP] = p.pump_flow
        consts[_kernels.SINK_FLOW] = p.sink_flow
        consts[_kernels.SINK_TEMP] = p.sink_temp
        self.kernel_consts = consts

    def node_names(self) -> list[str]:
        n = self.n_nodes
        return (
            ["tank"]
            + [f"cphx{i}_fluid" for i in range(1, n + 1)]
            + [f"cphx{i}_wall" for i in range(1, n + 1)]
            + ["llhx_wall", "llhx_hot", "llhx_cold"]
        )

    def branch_flows(self, indep) -> np.ndarray:
        """Branch flow per CPHX from independent flows; broadcasts over batches."""
        lay = self.layout
        const = lay.from_pump * self.params.pump_flow
        if lay.n_independent == 0:
            if indep is None:
                return const
            indep = np.asarray(indep, dtype=float)
            return np.broadcast_to(const, indep.shape[:-1] + (self.n_nodes,))
        indep = np.asarray(indep, dtype=float)
        return const + indep @ lay.from_indep.T

    def dependent_flows(self, indep) -> np.ndarray:
        lay = self.layout
        if len(lay.dependent_branches) == 0:
            return np.zeros(np.shape(indep)[:-1] + (0,))
        indep = np.asarray(indep, dtype=float)
        return lay.dep_from_pump * self.params.pump_flow + indep @ lay.dep_from_indep.T

    def split_state(self, state) -> tuple[np.ndarray, np.ndarray]:
        state = np.asarray(state, dtype=float)
        return state[..., : self.n_temps], state[..., self.n_temps :]


def _build_flow_layout(graph: ConfigGraph, params: ThermalParams) -> FlowLayout:
    n = graph.n_nodes
    rows: dict[int, list[float]] = {}  # node -> affine row over [pump, indep...]
    indep_ids: list[int] = []
    dep_ids: list[int] = []
    dep_rows: list[list[float]] = []
    junction_meta: list[tuple[int, tuple[int, ...], int]] = []

    def pad(row: list[float], width: int) -> list[float]:
        return row + [0.0] * (width - len(row))

    queue: list[int] = [TANK]
    while queue:
        vertex = queue.pop(0)
        children = graph.children(vertex)
        if not children:
            continue
        inflow = [1.0] if vertex == TANK else list(rows[vertex])
        if len(children) == 1:
            rows[children[0]] = list(inflow)
        else:
            junction_meta.append((vertex, children, len(indep_ids)))
            for child in children[:-1]:
                indep_ids.append(child)
                rows[child] = [0.0] * len(indep_ids) + [1.0]
            width = len(indep_ids) + 1
            closing = pad(list(inflow), width)
            for child in children[:-1]:
                crow = pad(rows[child], width)
                closing = [a - b for a, b in zip(closing, crow)]
            rows[children[-1]] = closing
            dep_ids.append(children[-1])
            dep_rows.append(closing)
        queue.extend(children)

    dof = len(indep_ids)
    width = dof + 1
    from_pump = np.zeros(n)
    from_indep = np.zeros((n, dof))
    for node in range(1, n + 1):
        row = pad(list(rows[node]), width)
        from_pump[node - 1] = row[0]
        from_indep[node - 1] = row[1:]
    dep_from_pump = np.array([pad(list(r), width)[0] for r in dep_rows])
    dep_from_indep = np.array([pad(list(r), width)[1:] for r in dep_rows]).reshape(
        len(dep_rows), dof
    )

    routing = np.zeros((n + 3, dof + 2))
    routing[:n, 0] = from_pump
    routing[:n, 1 : 1 + dof] = from_indep
    routing[n, 0] = 1.0  # LLHX hot inflow
    routing[n + 1, 0] = 1.0  # tank return
    routing[n + 2, dof + 1] = 1.0  # sink cold stream
    return FlowLayout(
        n_independent=dof,
        from_pump=from_pump,
        from_indep=from_indep,
        dep_from_pump=dep_from_pump,
        dep_from_indep=dep_from_indep,
        independent_branches=tuple(indep_ids),
        dependent_branches=tuple(dep_ids),
        junctions=tuple(junction_meta),
        routing=routing,
    )


def build_physics_graph(graph: ConfigGraph, params: ThermalParams | None = None) -> PhysicsGraph:
    return PhysicsGraph(graph, params or ThermalParams())


def _loads_watts(pg: PhysicsGraph, loads_kw) -> np.ndarray:
    loads = np.asarray(loads_kw, dtype=float)
    if loads.shape != (pg.n_nodes,):
        raise ValidationError(
            f"loads must have shape ({pg.n_nodes},), got {loads.shape}"
        )
    if not np.all(np.isfinite(loads)) or np.any(loads < 0):
        raise ValidationError("loads must be finite and non-negative (kW)")
    return loads * 1000.0


def derivative_from_branch_flows(pg: PhysicsGraph, temps, branch, loads_kw) -> np.ndarray:
    """dT/dt given explicit per-branch flows; broadcasts over leading axes.

    The merge advection is written as sum(m_leaf*T_leaf) - m_hot*T_hot, i.e.
    inflow times the flow-weighted mixed temperature, so the term vanishes
    smoothly as total merged flow goes to zero.
    """
    return _deriv_watts(pg, temps, branch, _loads_watts(pg, loads_kw))


def _deriv_watts(pg: PhysicsGraph, temps, branch, loads_w: np.ndarray) -> np.ndarray:
    p = pg.params
    T = np.asarray(temps, dtype=float)
    m = np.asarray(branch, dtype=float)
    batch = np.broadcast_shapes(T.shape[:-1], m.shape[:-1])
    T = np.broadcast_to(T, batch + (pg.n_temps,))
    m = np.broadcast_to(m, batch + (pg.n_nodes,))
    out = np.empty(batch + (pg.n_temps,))
    cf = p.c_fluid

    Tf = T[..., pg.fluid_idx]
    Tw = T[..., pg.wall_idx]
    Tup = T[..., pg.up_idx]
    Ttank = T[..., pg.tank_idx]
    Tlw = T[..., pg.llhx_wall_idx]
    Thot = T[..., pg.hot_idx]
    Tcold = T[..., pg.cold_idx]

    out[..., pg.fluid_idx] = (m * cf * (Tup - Tf) + p.hA_cphx * (Tw - Tf)) / (
        p.cphx_fluid_mass * cf
    )
    out[..., pg.wall_idx] = (loads_w + p.hA_cphx * (Tf - Tw)) / (
        p.cphx_wall_mass * p.c_wall
    )
    m_leaf = m[..., pg.leaf_branch_idx]
    T_leaf = Tf[..., pg.leaf_branch_idx]
    merged_enthalpy = np.sum(m_leaf * T_leaf, axis=-1)
    merged_flow = np.sum(m_leaf, axis=-1)
    out[..., pg.hot_idx] = (
        cf * (merged_enthalpy - merged_flow * Thot) + p.hA_llhx * (Tlw - Thot)
    ) / (p.llhx_fluid_mass * cf)
    out[..., pg.llhx_wall_idx] = (
        p.hA_llhx * (Thot - Tlw) + p.hA_llhx * (Tcold - Tlw)
    ) / (p.llhx_wall_mass * p.c_wall)
    out[..., pg.cold_idx] = (
        p.sink_flow * cf * (p.sink_temp - Tcold) + p.hA_llhx * (Tlw - Tcold)
    ) / (p.llhx_fluid_mass * cf)
    out[..., pg.tank_idx] = p.pump_flow * (Thot - Ttank) / p.tank_fluid_mass
    return out


def temperature_derivative(pg: PhysicsGraph, state, loads_kw) -> np.ndarray:
    """dT/dt for a state vector [temps; independent flows]."""
    temps, indep = pg.split_state(state)
    return derivative_from_branch_flows(pg, temps, pg.branch_flows(indep), loads_kw)


def temperature_jacobians(pg: PhysicsGraph, temps, branch) -> tuple[np.ndarray, np.ndarray]:
    """(d(dT/dt)/dT, d(dT/dt)/d mdot_branch), batched over leading axes."""
    p = pg.params
    cf = p.c_fluid
    T = np.asarray(temps, dtype=float)
    m = np.asarray(branch, dtype=float)
    batch = np.broadcast_shapes(T.shape[:-1], m.shape[:-1])
    T = np.broadcast_to(T, batch + (pg.n_temps,))
    m = np.broadcast_to(m, batch + (pg.n_nodes,))
    jt = np.zeros(batch + (pg.n_temps, pg.n_temps))
    jm = np.zeros(batch + (pg.n_temps, pg.n_nodes))

    n = pg.n_nodes
    cap_f = p.cphx_fluid_mass * cf
    cap_w = p.cphx_wall_mass * p.c_wall
    fi, wi = pg.fluid_idx, pg.wall_idx
    bi = np.arange(n)

    # row indices fi are all distinct, so paired fancy writes never collide
    jt[..., fi, fi] = -(m * cf + p.hA_cphx) / cap_f
    jt[..., fi, wi] = p.hA_cphx / cap_f
    jt[..., fi, pg.up_idx] = m * cf / cap_f
    jm[..., fi, bi] = cf * (T[..., pg.up_idx] - T[..., fi]) / cap_f

    jt[..., wi, fi] = p.hA_cphx / cap_w
    jt[..., wi, wi] = -p.hA_cphx / cap_w

    lw, hot, cold, tank = pg.llhx_wall_idx, pg.hot_idx, pg.cold_idx, pg.tank_idx
    cap_lw = p.llhx_wall_mass * p.c_wall
    cap_h = p.llhx_fluid_mass * cf
    jt[..., lw, hot] = p.hA_llhx / cap_lw
    jt[..., lw, cold] = p.hA_llhx / cap_lw
    jt[..., lw, lw] = -2.0 * p.hA_llhx / cap_lw

    leaf = pg.leaf_branch_idx
    m_leaf = m[..., leaf]
    merged_flow = np.sum(m_leaf, axis=-1)
    jt[..., hot, 1 + leaf] = m_leaf * cf / cap_h
    jt[..., hot, hot] = -(merged_flow * cf + p.hA_llhx) / cap_h
    jt[..., hot, lw] = p.hA_llhx / cap_h
    jm[..., hot, leaf] = cf * (T[..., 1 + leaf] - T[..., hot, None]) / cap_h

    jt[..., cold, cold] = -(p.sink_flow * cf + p.hA_llhx) / cap_h
    jt[..., cold, lw] = p.hA_llhx / cap_h

    jt[..., tank, hot] = p.pump_flow / p.tank_fluid_mass
    jt[..., tank, tank] = -p.pump_flow / p.tank_fluid_mass
    return jt, jm


def mixed_exit_temperature(pg: PhysicsGraph, temps, branch) -> np.ndarray:
    """Flow-weighted merge temperature; unweighted mean under the flow guard."""
    T = np.asarray(temps, dtype=float)
    m = np.asarray(branch, dtype=float)
    T_leaf = T[..., 1 + pg.leaf_branch_idx]
    m_leaf = m[..., pg.leaf_branch_idx]
    total = np.sum(m_leaf, axis=-1)
    weighted = np.sum(m_leaf * T_leaf, axis=-1)
    safe = np.where(np.abs(total) < MERGE_FLOW_GUARD, 1.0, total)
    return np.where(
        np.abs(total) < MERGE_FLOW_GUARD,
        np.mean(T_leaf, axis=-1),
        weighted / safe,
    )


def energy_balance_residual(pg: PhysicsGraph, temps, branch, loads_kw) -> np.ndarray:
    """sum(C dT/dt) minus injected power minus sink stream uptake, in watts."""
    dT = derivative_from_branch_flows(pg, temps, branch, loads_kw)
    stored = np.sum(pg.capacity * dT, axis=-1)
    injected = float(np.sum(_loads_watts(pg, loads_kw)))
    T = np.asarray(temps, dtype=float)
    sink = pg.params.sink_flow * pg.params.c_fluid * (
        pg.params.sink_temp - T[..., pg.cold_idx]
    )
    return stored - injected - sink


@dataclass
class Trajectory:
    times: np.ndarray  # (k+1,)
    temps: np.ndarray  # (k+1, n_temps)
    branch: np.ndarray  # (k+1, n) branch flows actually applied

    def to_csv(self, pg: PhysicsGraph) -> str:
        names = pg.node_names()
        header = (
            ["t"]
            + [f"T_{nm}" for nm in names]
            + [f"mdot_b{i}" for i in range(1, pg.n_nodes + 1)]
        )
        lines = [",".join(header)]
        for k in range(len(self.times)):
            row = [self.times[k], *self.temps[k], *self.branch[k]]
            lines.append(",".join(f"{v:.12g}" for v in row))
        return "\n".join(lines) + "\n"


ConstantOrPolicy = Callable[[float], Sequence[float]] | Sequence[float] | None


def _as_policy(pg: PhysicsGraph, flow_policy: ConstantOrPolicy):
    dof = pg.n_independent
    if callable(flow_policy):
        def call(t: float) -> np.ndarray:
            v = np.asarray(flow_policy(t), dtype=float).reshape(dof)
            return np.clip(v, 0.0, pg.params.pump_flow)
        return call
    if flow_policy is None:
        const = equal_split_flows(pg)
    else:
        const = np.clip(
            np.asarray(flow_policy, dtype=float).reshape(dof),
            0.0,
            pg.params.pump_flow,
        )
    return lambda t: const


def simulate(
    pg: PhysicsGraph,
    loads_kw,
    flow_policy: ConstantOrPolicy = None,
    t_max: float = 500.0,
    dt: float = 0.02,
) -> Trajectory:
    """Fixed-step RK4 integration of the temperature network.

    flow_policy maps time to the independent flow vector (constant array and
    None for equal splits are also accepted); outputs are clamped to
    [0, pump_flow]. Slew feasibility of the policy is the caller's duty.
    """
    if dt <= 0 or t_max <= 0:
        raise ValidationError(f"need positive dt and t_max, got dt={dt} t_max={t_max}")
    loads_w = _loads_watts(pg, loads_kw)  # validate once, reuse in the loop
    policy = _as_policy(pg, flow_policy)
    n_steps = int(np.ceil(t_max / dt - 1e-12))
    times = np.empty(n_steps + 1)
    temps = np.empty((n_steps + 1, pg.n_temps))
    branch = np.empty((n_steps + 1, pg.n_nodes))
    T = pg.initial_temps.copy()
    times[0] = 0.0
    temps[0] = T
    branch[0] = pg.branch_flows(policy(0.0))
    t = 0.0
    # overflow before the explicit finite check is the failure being detected
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            h = min(dt, t_max - t)
            m0 = pg.branch_flows(policy(t))
            mh = pg.branch_flows(policy(t + 0.5 * h))
            m1 = pg.branch_flows(policy(t + h))
            k1 = _deriv_watts(pg, T, m0, loads_w)
            k2 = _deriv_watts(pg, T + 0.5 * h * k1, mh, loads_w)
            k3 = _deriv_watts(pg, T + 0.5 * h * k2, mh, loads_w)
            k4 = _deriv_watts(pg, T + h * k3, m1, loads_w)
            T = T + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(T)):
                raise DivergenceError(
                    f"integration diverged at step {k + 1} (t = {t + h:.6g} s)"
                )
            t += h
            times[k + 1] = t
            temps[k + 1] = T
            branch[k + 1] = m1
    return Trajectory(times=times, temps=temps, branch=branch)


def endurance_from_trajectory(pg: PhysicsGraph, traj: Trajectory) -> float | None:
    """First bound-crossing time, linearly interpolated; None if never."""
    excess = traj.temps - pg.temp_limits  # (k+1, n_temps)
    hit = np.any(excess >= 0.0, axis=1)
    if not np.any(hit):
        return None
    k = int(np.argmax(hit))
    if k == 0:
        return 0.0
    t0, t1 = traj.times[k - 1], traj.times[k]
    best = np.inf
    for j in np.nonzero(excess[k] >= 0.0)[0]:
        e0, e1 = excess[k - 1, j], excess[k, j]
        if e1 == e0:
            cross = t1
        else:
            cross = t0 + (t1 - t0) * (0.0 - e0) / (e1 - e0)
        best = min(best, max(t0, min(t1, cross)))
    return float(best)


def endurance_with_flow_knots(
    pg: PhysicsGraph,
    loads_kw,
    knot_t,
    knot_m,
    dt: float,
    t_stop: float,
    stop_at_cross: bool = True,
    temps0: np.ndarray | None = None,
) -> tuple[float | None, float, np.ndarray]:
    """Endurance of a piecewise-linear branch-flow schedule (jitted RK4 path).

    knot_t must be strictly increasing; flows hold constant beyond the last
    knot. Returns (endurance or None, max bound excess in K over the window,
    final temps). Same scheme as simulate, specialized for sequential speed.
    """
    from . import _kernels

    loads_w = _loads_watts(pg, loads_kw)
    knot_t = np.ascontiguousarray(knot_t, dtype=float)
    knot_m = np.ascontiguousarray(knot_m, dtype=float)
    if knot_t.ndim != 1 or knot_m.shape != (knot_t.shape[0], pg.n_nodes):
        raise ValidationError(
            f"knot shapes mismatch: {knot_t.shape} vs {knot_m.shape}"
        )
    if knot_t.shape[0] > 1 and np.any(np.diff(knot_t) <= 0.0):
        raise ValidationError("knot times must be strictly increasing")
    if dt <= 0 or t_stop <= 0:
        raise ValidationError(f"need positive dt and t_stop, got {dt}, {t_stop}")
    T0 = pg.initial_temps if temps0 is None else np.asarray(temps0, dtype=float)
    status, endurance, max_excess, T_final, steps = _kernels.rk4_flow_knots(
        np.ascontiguousarray(T0),
        loads_w,
        np.ascontiguousarray(pg.up_idx, dtype=np.int64),
        np.ascontiguousarray(pg.leaf_branch_idx, dtype=np.int64),
        pg.temp_limits,
        pg.kernel_consts,
        knot_t,
        knot_m,
        float(dt),
        float(t_stop),
        bool(stop_at_cross),
    )
    if status == _kernels.DIVERGED:
        raise DivergenceError(f"integration diverged at step {steps}")
    return (endurance if endurance >= 0.0 else None), float(max_excess), T_final


def sample_states_with_flow_knots(
    pg: PhysicsGraph, loads_kw, knot_t, knot_m, sample_t, dt: float
) -> np.ndarray:
    """States at the requested times under a piecewise-linear flow schedule.

    Returns an array of shape (len(sample_t), n_temps); samples are linearly
    interpolated across the bracketing RK4 step, so sample_t need not align
    with the step grid.
    """
    from . import _kernels

    loads_w = _loads_watts(pg, loads_kw)
    knot_t = np.ascontiguousarray(knot_t, dtype=float)
    knot_m = np.ascontiguousarray(knot_m, dtype=float)
    sample_t = np.ascontiguousarray(sample_t, dtype=float)
    if knot_t.ndim != 1 or knot_m.shape != (knot_t.shape[0], pg.n_nodes):
        raise ValidationError(
            f"knot shapes mismatch: {knot_t.shape} vs {knot_m.shape}"
        )
    if sample_t.ndim != 1 or sample_t.shape[0] == 0:
        raise ValidationError("sample_t must be a nonempty 1-d array")
    if np.any(np.diff(sample_t) < 0.0) or sample_t[0] < 0.0:
        raise ValidationError("sample times must be nondecreasing and >= 0")
    if dt <= 0:
        raise ValidationError(f"need positive dt, got {dt}")
    out = np.empty((sample_t.shape[0], pg.n_temps))
    status = _kernels.rk4_sample(
        np.ascontiguousarray(pg.initial_temps),
        loads_w,
        np.ascontiguousarray(pg.up_idx, dtype=np.int64),
        np.ascontiguousarray(pg.leaf_branch_idx, dtype=np.int64),
        pg.kernel_consts,
        knot_t,
        knot_m,
        float(dt),
        sample_t,
        out,
    )
    if status == _kernels.DIVERGED:
        raise DivergenceError("integration diverged while sampling states")
    return out


def constant_flow_endurance(
    pg: PhysicsGraph, loads_kw, indep, dt: float, t_stop: float
) -> float | None:
    """Endurance under constant independent flows (jitted path)."""
    m = pg.branch_flows(
        None if pg.n_independent == 0 else np.asarray(indep, dtype=float)
    )
    endurance, _, _ = endurance_with_flow_knots(
        pg, loads_kw, np.array([0.0]), m.reshape(1, -1), dt, t_stop
    )
    return endurance


def equal_split_flows(pg: PhysicsGraph) -> np.ndarray:
    """Independent flows that split every junction evenly."""
    return _junction_split(pg, lambda children, loads: np.full(len(children), 1.0 / len(children)))


def load_proportional_flows(pg: PhysicsGraph, loads_kw) -> np.ndarray:
    """Independent flows splitting each junction by subtree heat load."""
    loads = np.asarray(loads_kw, dtype=float)

    subtree = np.zeros(pg.n_nodes + 1)
    order = sorted(
        range(1, pg.n_nodes + 1),
        key=lambda v: -_depth_of(pg.graph, v),
    )
    for v in order:
        subtree[v] = loads[v - 1] + sum(subtree[c] for c in pg.graph.children(v))

    def fractions(children, _loads):
        weights = np.array([subtree[c] for c in children])
        total = weights.sum()
        if total <= 0.0:
            return np.full(len(children), 1.0 / len(children))
        return weights / total

    return _junction_split(pg, fractions)


def _depth_of(graph: ConfigGraph, node: int) -> int:
    d = 0
    while node != TANK:
        node = graph.parent(node)
        d += 1
    return d


def _junction_split(pg: PhysicsGraph, fractions) -> np.ndarray:
    flows = {TANK: pg.params.pump_flow}
    indep = np.zeros(pg.n_independent)
    queue = [TANK]
    while queue:
        vertex = queue.pop(0)
        children = pg.graph.children(vertex)
        if not children:
            continue
        if len(children) == 1:
            flows[children[0]] = flows[vertex]
        else:
            fr = fractions(children, None)
            for child, f in zip(children, fr):
                flows[child] = flows[vertex] * f
        queue.extend(children)
    for k, node in enumerate(pg.layout.independent_branches):
        indep[k] = flows[node]
    return indep
