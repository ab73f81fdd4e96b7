"""Receding-horizon control loop, nonlinear plant and baselines.

Controller-plant split: the controller commands pump flows and PRV
settings from the window QP; the plant realizes demands (nominal plus
error), solves the nonlinear hydraulics with pumps flow-pinned and
valves at their commanded settings, and integrates tank heads.  Rule-
based control drives pumps ON (head-gain curve active) or OFF (zero
flow) from hysteresis thresholds on their governing tanks.

Within one controller step the window QP and the hydraulic
linearization alternate: relinearize every stage at the current nominal
flow trajectory, rebuild sensitivities, solve the QP, update the
trajectory, until the squared flow-correction norm meets the stop
tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import units
from .dro import (
    AffinePolicySolution,
    AssemblyError,
    ConstraintSpec,
    ControllerKind,
    CostSpec,
    DroQpBuilder,
    WindowStage,
    assemble_dro_qp,
    extract_solution,
)
from .hydraulics import (
    PRV,
    PUMP,
    HydraulicModel,
    NonConvergenceError,
    StageConditions,
    reservoir_heads,
)
from .ingest import RunConfig, load_fixture
from .network import Network
from .qp import OPTIMAL, QpTolerances, solve_qp
from .uncertainty import TrainingSet, gaussian_errors, scenario_rng

RBC = "rbc"
CONTROLLERS = ("dro", "saa", "robust", "deterministic", RBC)


class ControlError(RuntimeError):
    pass


@dataclass
class Instance:
    """A fixture bound to its run configuration."""

    net: Network
    cfg: RunConfig
    patterns: dict[str, list[float]]
    model: HydraulicModel = field(init=False)
    costs: CostSpec = field(init=False)
    cons: ConstraintSpec = field(init=False)

    def __post_init__(self) -> None:
        self.model = HydraulicModel(self.net)
        self.costs = CostSpec.from_config(self.cfg, self.net, self.model)
        self.cons = ConstraintSpec(dict(self.cfg.constraint_treatment))

    @classmethod
    def from_fixture(cls, inp_path: str | Path, config_path: str | Path | None = None) -> "Instance":
        net, cfg, patterns = load_fixture(inp_path, config_path)
        return cls(net=net, cfg=cfg, patterns=patterns)

    def pattern_multiplier(self, node: int, t: int) -> float:
        pid = self.net.nodes[node].demand_pattern
        if pid and pid in self.patterns:
            seq = self.patterns[pid]
            return seq[t % len(seq)]
        return self.cfg.demand_pattern[t % 24]

    def nominal_demand(self, t0: int, horizon: int) -> np.ndarray:
        """(horizon, n_nodes) nominal demands in GPM, periodic in the day."""
        base = self.net.base_demand_vector()
        out = np.zeros((horizon, len(self.net.nodes)))
        for k in range(horizon):
            for i in range(len(self.net.nodes)):
                if base[i] > 0:
                    out[k, i] = base[i] * self.pattern_multiplier(i, t0 + k)
        return out

    def uncertain_nodes(self) -> list[str]:
        return [n.id for n in self.net.nodes if n.base_demand > 0]

    def initial_tank_heads(self) -> np.ndarray:
        return np.array([self.net.nodes[t].tank_init_head for t in self.model.tanks])

    def pump_ids(self) -> list[str]:
        return [self.model.links[n].link_id for n, lm in enumerate(self.model.links) if lm.kind == PUMP]

    def training_set(self, t0: int, seed_offset: int = 10_000) -> TrainingSet:
        """Window training set: Gaussian errors with std sigma * nominal
        demand at the uncertain nodes, per step; reproducible per (seed, t0)."""
        nodes = self.uncertain_nodes()
        nominal = self.nominal_demand(t0, self.cfg.mpc_window)
        node_cols = [self.net.node_index[nid] for nid in nodes]
        rng = scenario_rng(self.cfg.seed, seed_offset + t0)
        samples = gaussian_errors(nominal[:, node_cols], self.cfg.sigma, self.cfg.samples, rng)
        return TrainingSet(nodes=nodes, samples=samples, epsilon=self.cfg.epsilon)


# ---------------------------------------------------------------------------
# Plant
# ---------------------------------------------------------------------------


@dataclass
class PlantStep:
    heads: np.ndarray  # all nodes, ft
    flows_gpm: np.ndarray  # active links
    tank_heads_next: np.ndarray
    violations: list[tuple[str, float]]
    iterations: int


class Plant:
    """Nonlinear hydraulic plant stepped hourly.

    Tanks act as fixed-head nodes within the hour; the resulting net
    inflow integrates the head forward.  Pump handling depends on the
    command: a flow value pins the pump (variable-speed), mode "curve"
    activates its head-gain relation, mode "off" pins zero flow.
    """

    def __init__(self, inst: Instance):
        self.inst = inst
        self.model = inst.model
        self._q_warm: np.ndarray | None = None

    def step(
        self,
        x_tanks: np.ndarray,
        demand_gpm: np.ndarray,
        pump_commands: dict[str, float | str],
        phi_commands: dict[str, float] | None = None,
        dt_hours: float = 1.0,
    ) -> PlantStep:
        m = self.model
        pinned = reservoir_heads(self.inst.net)
        for j, t_node in enumerate(m.tanks):
            pinned[int(t_node)] = float(x_tanks[j])
        pump_flows: dict[int, float] = {}
        for n, lm in enumerate(m.links):
            if lm.kind != PUMP:
                continue
            cmd = pump_commands.get(lm.link_id, "curve")
            if cmd == "curve":
                continue
            if cmd == "off":
                pump_flows[n] = 0.0
            else:
                link = self.inst.net.links[m.active[n]]
                lo = link.flow_min if np.isfinite(link.flow_min) else 0.0
                hi = link.flow_max if np.isfinite(link.flow_max) else float(cmd)
                pump_flows[n] = units.gpm_to_internal(min(max(float(cmd), lo), hi))
        phi: dict[int, float] = {}
        for n, lm in enumerate(m.links):
            if lm.kind == PRV:
                phi[n] = max(0.0, float((phi_commands or {}).get(lm.link_id, 0.0)))
        cond = StageConditions(
            pinned_heads=pinned,
            demand=np.asarray(demand_gpm, dtype=float) * units.GPM_TO_FT3H,
            pump_flows=pump_flows,
            prv_phi=phi,
        )
        try:
            res = self.model.successive(
                cond, q0=self._q_warm, delta=self.inst.cfg.delta, max_iter=100
            )
        except NonConvergenceError:
            try:
                # retry from the default initialization before damping
                res = self.model.successive(cond, q0=None, delta=self.inst.cfg.delta, max_iter=100)
            except NonConvergenceError:
                res = self.model.successive(
                    cond, q0=None, delta=self.inst.cfg.delta, max_iter=400, damping=0.5
                )
        self._q_warm = res.q.copy()

        inflow = m.tank_net_inflow(res.q)
        x_next = x_tanks + dt_hours * inflow / m.tank_areas
        violations: list[tuple[str, float]] = []
        for j, t_node in enumerate(m.tanks):
            node = self.inst.net.nodes[int(t_node)]
            if x_next[j] < node.head_min - 1e-9:
                violations.append((f"tank_lower:{node.id}", node.head_min - x_next[j]))
            if x_next[j] > node.head_max + 1e-9:
                violations.append((f"tank_upper:{node.id}", x_next[j] - node.head_max))
        for n, lm in enumerate(m.links):
            if lm.kind == PRV and res.q[n] < -1e-6:
                violations.append((f"prv_reverse:{lm.link_id}", -units.internal_to_gpm(res.q[n])))
        return PlantStep(
            heads=res.h,
            flows_gpm=res.q / units.GPM_TO_FT3H,
            tank_heads_next=x_next,
            violations=violations,
            iterations=res.iterations,
        )


# ---------------------------------------------------------------------------
# MPC step
# ---------------------------------------------------------------------------


@dataclass
class MpcStepResult:
    u_gpm: np.ndarray  # applied pump flows (first-stage nominal plan)
    phi: np.ndarray  # applied PRV settings, ft
    policy: AffinePolicySolution
    sl_err_trace: list[float]
    wall_clock: float


def _seed_window(
    inst: Instance, x0: np.ndarray, demand: np.ndarray, horizon: int
) -> tuple[list[np.ndarray], np.ndarray]:
    """Initial per-stage flow trajectory and tank-head path: simulate the
    network with pumps pinned to an equal share of the nominal demand, so
    tank levels stay near their current values and the first QP
    linearization sits at a mild operating point."""
    m = inst.model
    pump_ids = inst.pump_ids()
    q_list: list[np.ndarray] = []
    x_path = np.zeros((horizon + 1, len(m.tanks)))
    x_path[0] = x0
    plant = Plant(inst)
    x = x0.copy()
    for tau in range(horizon):
        share = float(np.sum(demand[tau])) / max(1, len(pump_ids))
        cmds: dict[str, float | str] = {pid: share for pid in pump_ids}
        step = plant.step(x, demand[tau], cmds, phi_commands=None, dt_hours=inst.cfg.dt_hours)
        q_list.append(step.flows_gpm * units.GPM_TO_FT3H)
        x = step.tank_heads_next
        x_path[tau + 1] = x
    return q_list, x_path


def _build_stages(
    inst: Instance, q_list: list[np.ndarray], x_path: np.ndarray
) -> list[WindowStage]:
    from .hydraulics import linearize_link

    m = inst.model
    stages: list[WindowStage] = []
    for tau, q_bar in enumerate(q_list):
        a = np.empty(m.n_links)
        b = np.empty(m.n_links)
        for n, lm in enumerate(m.links):
            a[n], b[n] = linearize_link(lm, q_bar[n])
        pinned = reservoir_heads(inst.net)
        x_ref = x_path[tau + 1]  # end-of-interval pairing
        for j, t_node in enumerate(m.tanks):
            pinned[int(t_node)] = float(x_ref[j])
        cond = StageConditions(
            pinned_heads=pinned,
            demand=np.zeros(len(inst.net.nodes)),
            pump_flows={n: q_bar[n] for n, lm in enumerate(m.links) if lm.kind == PUMP},
            prv_phi={n: 0.0 for n, lm in enumerate(m.links) if lm.kind == PRV},
        )
        resp = m.stage_response(q_bar, cond)
        t_u, t_d, t_x = resp.tank_inflow_sensitivities()
        stages.append(
            WindowStage(q_bar=q_bar.copy(), a=a, b=b, t_u=t_u, t_d=t_d, t_x=t_x, x_ref=x_ref.copy())
        )
    return stages


def mpc_step(
    inst: Instance,
    x0: np.ndarray,
    t0: int,
    train: TrainingSet,
    controller: ControllerKind = ControllerKind.DRO,
    u_prev: np.ndarray | None = None,
    q_seed: list[np.ndarray] | None = None,
    max_sl_iter: int = 20,
    qp_tol: float | None = None,
) -> MpcStepResult:
    """One controller move: alternate linearization and QP solves until the
    flow trajectory is self-consistent, then command the first-stage plan."""
    started = time.perf_counter()
    h = inst.cfg.mpc_window
    demand = inst.nominal_demand(t0, h)
    if q_seed is not None and len(q_seed) == h:
        q_list = [q.copy() for q in q_seed]
        x_path = _propagate_tanks(inst, x0, q_list)
    else:
        q_list, x_path = _seed_window(inst, x0, demand, h)

    tol = QpTolerances(
        eps_abs=qp_tol or inst.cfg.qp_tol, eps_rel=qp_tol or inst.cfg.qp_tol
    )
    err_trace: list[float] = []
    warm = None
    policy = None
    for _ in range(max_sl_iter):
        stages = _build_stages(inst, q_list, x_path)
        prob, builder, meta = assemble_dro_qp(
            inst.net,
            inst.model,
            stages,
            inst.costs,
            inst.cons,
            train,
            x0,
            demand,
            t0,
            controller=controller,
            theta=inst.cfg.theta,
            dt_hours=inst.cfg.dt_hours,
            u_prev=u_prev,
        )
        sol = solve_qp(prob, tol, warm=warm)
        if sol.status != OPTIMAL:
            raise ControlError(
                f"window QP at t={t0} returned {sol.status}: {sol.detail or 'no detail'}"
            )
        warm = (sol.x, np.concatenate([sol.y_eq, sol.z_in]))
        policy = extract_solution(builder, prob, sol, meta)
        q_new = _nominal_flow_trajectory(inst, policy)
        err = float(sum(np.sum((q_new[tau] - q_list[tau]) ** 2) for tau in range(h)))
        err_trace.append(err)
        q_list = q_new
        x_path = np.vstack([x0[None, :], policy.x_nominal[1:]])
        if err <= inst.cfg.delta:
            break
    else:
        raise ControlError(
            f"successive linearization of the window QP did not converge at t={t0}; "
            f"Err trace: {err_trace}"
        )
    phi_ids = [inst.model.links[n].link_id for n in builder.valves]
    return MpcStepResult(
        u_gpm=policy.e_nominal[0].copy(),
        phi=policy.phi_nominal[0].copy(),
        policy=policy,
        sl_err_trace=err_trace,
        wall_clock=time.perf_counter() - started,
    )


def _nominal_flow_trajectory(inst: Instance, policy: AffinePolicySolution) -> list[np.ndarray]:
    m = inst.model
    pumps = [n for n, lm in enumerate(m.links) if lm.kind == PUMP]
    nonpump = [n for n, lm in enumerate(m.links) if lm.kind != PUMP]
    out = []
    for tau in range(policy.horizon):
        q = np.zeros(m.n_links)
        for k, n in enumerate(pumps):
            q[n] = units.gpm_to_internal(policy.e_nominal[tau, k])
        for k, n in enumerate(nonpump):
            q[n] = units.gpm_to_internal(policy.v_nominal[tau, k])
        out.append(q)
    return out


def _propagate_tanks(inst: Instance, x0: np.ndarray, q_list: list[np.ndarray]) -> np.ndarray:
    m = inst.model
    x_path = np.zeros((len(q_list) + 1, len(m.tanks)))
    x_path[0] = x0
    for tau, q in enumerate(q_list):
        x_path[tau + 1] = x_path[tau] + inst.cfg.dt_hours * m.tank_net_inflow(q) / m.tank_areas
    return x_path


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryRecord:
    controller: str
    tank_heads: np.ndarray  # (T+1, n_tk)
    pump_flows: np.ndarray  # (T, n_u) GPM
    phi: np.ndarray  # (T, n_phi)
    flows: np.ndarray  # (T, n_links) GPM
    heads: np.ndarray  # (T, n_nodes)
    step_cost: np.ndarray  # (T,)
    violations: list[tuple[int, str, float]]
    wall_clock: float
    tank_ids: list[str]
    pump_ids: list[str]

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.step_cost))

    def violation_magnitude(self) -> float:
        """Sum of tank-bound violation magnitudes, ft * h."""
        return float(sum(m for _, name, m in self.violations if name.startswith("tank_")))

    def lower_violation_magnitude(self) -> float:
        return float(sum(m for _, name, m in self.violations if name.startswith("tank_lower")))

    def violation_frequency(self, horizon: int | None = None) -> float:
        """Fraction of (step, tank) slots with a tank-bound violation."""
        t_steps = horizon if horizon is not None else self.pump_flows.shape[0]
        slots = t_steps * max(1, len(self.tank_ids))
        hit = len({(t, name) for t, name, _ in self.violations if name.startswith("tank_")})
        return hit / slots


def _step_cost(inst: Instance, t: int, pump_flows_gpm: np.ndarray) -> float:
    price = inst.costs.tou[t % len(inst.costs.tou)]
    u = pump_flows_gpm
    return float(price * np.sum(inst.costs.pump_c1 * u + inst.costs.pump_c2 * u * u)) * inst.cfg.dt_hours


def closed_loop_run(
    inst: Instance,
    controller: str = "dro",
    horizon: int | None = None,
    realized_errors: np.ndarray | None = None,
    epsilon: float | None = None,
    rho: float | None = None,
) -> TrajectoryRecord:
    """Run the receding-horizon loop on the nonlinear plant.

    ``realized_errors`` has shape (T, n_uncertain) in GPM (zeros when
    omitted); the controller never sees them directly, only through the
    evolving tank heads.  ``epsilon``/``rho`` override the config for
    sweep cells.
    """
    started = time.perf_counter()
    if controller not in CONTROLLERS:
        raise ControlError(f"unknown controller {controller!r}")
    if controller == RBC:
        return rbc_baseline(inst, horizon=horizon, realized_errors=realized_errors)

    cfg = inst.cfg
    if epsilon is not None or rho is not None:
        import copy

        cfg = copy.deepcopy(cfg)
        if epsilon is not None:
            cfg.epsilon = epsilon
        if rho is not None:
            cfg.rho = rho
        inst = Instance(net=inst.net, cfg=cfg, patterns=inst.patterns)

    t_end = horizon if horizon is not None else cfg.horizon_hours
    kind = ControllerKind(controller)
    m = inst.model
    plant = Plant(inst)
    nodes_u = inst.uncertain_nodes()
    node_cols = [inst.net.node_index[nid] for nid in nodes_u]
    if realized_errors is None:
        realized_errors = np.zeros((t_end, len(nodes_u)))

    x = inst.initial_tank_heads()
    tank_heads = [x.copy()]
    pump_rows, phi_rows, flow_rows, head_rows, costs = [], [], [], [], []
    violations: list[tuple[int, str, float]] = []
    u_prev = None
    q_seed: list[np.ndarray] | None = None
    pump_ids = inst.pump_ids()

    for t in range(t_end):
        train = inst.training_set(t)
        step = mpc_step(
            inst, x, t, train, controller=kind, u_prev=u_prev, q_seed=q_seed
        )
        demand = inst.nominal_demand(t, 1)[0]
        for j, col in enumerate(node_cols):
            demand[col] = max(0.0, demand[col] + realized_errors[t, j])
        cmds = {pid: float(step.u_gpm[k]) for k, pid in enumerate(pump_ids)}
        phis = {
            inst.model.links[n].link_id: float(step.phi[k])
            for k, n in enumerate(
                [n for n, lm in enumerate(m.links) if lm.kind == PRV]
            )
        }
        ps = plant.step(x, demand, cmds, phis, dt_hours=cfg.dt_hours)
        for name, mag in ps.violations:
            violations.append((t, name, mag))
        pump_flow_real = np.array(
            [ps.flows_gpm[n] for n, lm in enumerate(m.links) if lm.kind == PUMP]
        )
        costs.append(_step_cost(inst, t, pump_flow_real))
        pump_rows.append(pump_flow_real)
        phi_rows.append(step.phi.copy())
        flow_rows.append(ps.flows_gpm.copy())
        head_rows.append(ps.heads.copy())
        x = ps.tank_heads_next
        tank_heads.append(x.copy())
        u_prev = step.u_gpm
        # shift the window trajectory one stage for the next warm start
        qs = _nominal_flow_trajectory(inst, step.policy)
        q_seed = qs[1:] + [qs[-1]]

    return TrajectoryRecord(
        controller=controller,
        tank_heads=np.array(tank_heads),
        pump_flows=np.array(pump_rows),
        phi=np.array(phi_rows),
        flows=np.array(flow_rows),
        heads=np.array(head_rows),
        step_cost=np.array(costs),
        violations=violations,
        wall_clock=time.perf_counter() - started,
        tank_ids=[inst.net.nodes[t].id for t in m.tanks],
        pump_ids=pump_ids,
    )


# ---------------------------------------------------------------------------
# Rule-based control
# ---------------------------------------------------------------------------


def rbc_baseline(
    inst: Instance,
    horizon: int | None = None,
    realized_errors: np.ndarray | None = None,
) -> TrajectoryRecord:
    """Hourly hysteresis switching: a pump turns ON when its governing tank
    drops under the low threshold and OFF above the high threshold;
    conflicting signals resolve in the priority order of the configured
    tank list.  ON pumps run on their head-gain curve."""
    started = time.perf_counter()
    cfg = inst.cfg
    m = inst.model
    t_end = horizon if horizon is not None else cfg.horizon_hours
    pump_ids = inst.pump_ids()
    rules = cfg.rbc_rules
    for pid in pump_ids:
        if pid not in rules:
            raise ControlError(f"rbc rules missing pump {pid!r}")
    tank_ids = [inst.net.nodes[t].id for t in m.tanks]
    tank_pos = {tid: j for j, tid in enumerate(tank_ids)}

    nodes_u = inst.uncertain_nodes()
    node_cols = [inst.net.node_index[nid] for nid in nodes_u]
    if realized_errors is None:
        realized_errors = np.zeros((t_end, len(nodes_u)))

    plant = Plant(inst)
    x = inst.initial_tank_heads()
    state = {pid: False for pid in pump_ids}  # start OFF
    tank_heads = [x.copy()]
    pump_rows, flow_rows, head_rows, costs = [], [], [], []
    violations: list[tuple[int, str, float]] = []

    for t in range(t_end):
        for pid in pump_ids:
            rule = rules[pid]
            lo, hi = float(rule["low"]), float(rule["high"])
            for tid in rule["tanks"]:
                if tid not in tank_pos:
                    raise ControlError(f"rbc rule for pump {pid!r} names unknown tank {tid!r}")
                level = x[tank_pos[tid]]
                if level < lo:
                    state[pid] = True
                    break
                if level > hi:
                    state[pid] = False
                    break
                # within the band: this tank holds, defer to the next in priority
        cmds = {pid: ("curve" if state[pid] else "off") for pid in pump_ids}
        demand = inst.nominal_demand(t, 1)[0]
        for j, col in enumerate(node_cols):
            demand[col] = max(0.0, demand[col] + realized_errors[t, j])
        ps = plant.step(x, demand, cmds, None, dt_hours=cfg.dt_hours)
        for name, mag in ps.violations:
            violations.append((t, name, mag))
        pump_flow_real = np.array(
            [ps.flows_gpm[n] for n, lm in enumerate(m.links) if lm.kind == PUMP]
        )
        costs.append(_step_cost(inst, t, pump_flow_real))
        pump_rows.append(pump_flow_real)
        flow_rows.append(ps.flows_gpm.copy())
        head_rows.append(ps.heads.copy())
        x = ps.tank_heads_next
        tank_heads.append(x.copy())

    n_phi = sum(1 for lm in m.links if lm.kind == PRV)
    return TrajectoryRecord(
        controller=RBC,
        tank_heads=np.array(tank_heads),
        pump_flows=np.array(pump_rows),
        phi=np.zeros((t_end, n_phi)),
        flows=np.array(flow_rows),
        heads=np.array(head_rows),
        step_cost=np.array(costs),
        violations=violations,
        wall_clock=time.perf_counter() - started,
        tank_ids=tank_ids,
        pump_ids=pump_ids,
    )


def robust_baseline(
    inst: Instance,
    horizon: int | None = None,
    realized_errors: np.ndarray | None = None,
    theta: float | None = None,
) -> TrajectoryRecord:
    """Box-robust variant: risk-treated bounds are enforced for every error
    in [-theta*dbar, theta*dbar] via the support function of the box."""
    if theta is not None:
        import copy

        cfg = copy.deepcopy(inst.cfg)
        cfg.theta = theta
        inst = Instance(net=inst.net, cfg=cfg, patterns=inst.patterns)
    return closed_loop_run(
        inst, controller="robust", horizon=horizon, realized_errors=realized_errors
    )
