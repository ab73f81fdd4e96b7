"""Distributionally robust optimal-water-flow QP assembly.

Decision variables per controller window of H stages:

* nominal pump flows ``e`` (the plan), pipe/valve flows ``v``, valve
  head-reductions ``phi`` and junction heads ``l`` per stage, plus tank
  heads ``x`` at stages 1..H, all tied together by junction mass
  balance, per-link linearized energy conservation (pumps excluded:
  a variable-speed pump is a flow actuator, its head gain floats) and
  the tank difference equation;
* a block-lower-triangular feedback gain ``D`` mapping realized demand
  errors to pump-flow adjustments (affine disturbance feedback);
* CVaR/DRO auxiliaries (kappa, lambda, s, varsigma) plus one clipped
  risk epigraph variable per treated constraint.

Realized-trajectory model: demand errors propagate to pipe flows, tank
inflows and tank heads through the linearized network response, so the
risk coefficients a_i(D) of a tank-bound constraint include the network
sensitivity of the tank head to both the error itself and the pump
reaction D.  The worst case over a Wasserstein ball of radius eps around
the empirical error distribution reduces, per constraint, to

    lambda_i * eps + mean_o s_io
    s_io >= rho * (<a_ik, xi_o> + b_ik [+ <varsigma_iko, z - F xi_o>])
    ||F' varsigma_iko - rho a_ik||_inf <= lambda_i   (unbounded support:
    lambda_i >= rho ||a_ik||_inf),  varsigma >= 0,

with the two affine pieces (a_ik, b_ik) encoding [C + kappa]_+ -
kappa*beta.  Each constraint's risk enters the objective clipped at
zero, the soft-penalty reading of "CVaR <= 0": margin beyond the bound
earns no reward, which keeps a large risk aversion rho from pinning
tanks at their upper bounds.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import units
from .hydraulics import PRV, PUMP, HydraulicModel
from .ingest import RunConfig
from .network import Network
from .qp import QpProblem, QpSolution
from .uncertainty import TrainingSet


class ControllerKind(str, enum.Enum):
    DRO = "dro"
    SAA = "saa"
    ROBUST = "robust"
    DETERMINISTIC = "deterministic"


@dataclass
class CostSpec:
    """Stage cost: TOU-scaled pump cost c1*u + c2*u^2 per pump (u in GPM),
    a smoothness weight on pump-flow increments and an optional tank
    safety-level pull."""

    tou: np.ndarray  # 24 hourly prices
    pump_c1: np.ndarray  # per pump
    pump_c2: np.ndarray  # per pump, > 0 keeps the plan strictly convex
    smooth_weight: float = 0.0
    safety_weight: float = 0.0
    safety_head: float = 0.0
    rho: float = 0.0
    beta: float = 0.2

    @staticmethod
    def from_config(cfg: RunConfig, net: Network, model: HydraulicModel) -> "CostSpec":
        pumps = [n for n, lm in enumerate(model.links) if lm.kind == PUMP]
        c1 = np.zeros(len(pumps))
        c2 = np.zeros(len(pumps))
        for k, n in enumerate(pumps):
            link_id = model.links[n].link_id
            c1[k], c2[k] = cfg.pump_energy.get(link_id, (0.05, 1e-6))
        return CostSpec(
            tou=np.asarray(cfg.tou_prices, dtype=float),
            pump_c1=c1,
            pump_c2=c2,
            smooth_weight=cfg.smooth_weight,
            safety_weight=cfg.safety_weight,
            safety_head=cfg.safety_head,
            rho=cfg.rho,
            beta=cfg.beta,
        )


@dataclass
class ConstraintSpec:
    """Treatment of every scalar bound in the window: 2*H*(n_tk + n_u)
    constraints over tank heads and pump flows.  Keys are the four bound
    classes, optionally overridden per element id
    (e.g. ``"tank_lower:23"``)."""

    treatment: dict[str, str]

    def resolve(self, kind: str, element_id: str) -> str:
        specific = self.treatment.get(f"{kind}:{element_id}")
        if specific is not None:
            return specific
        try:
            return self.treatment[kind]
        except KeyError:
            raise ValueError(f"treatment map does not cover constraint class {kind!r}") from None


@dataclass
class RiskConstraint:
    """One scalar bound prepared for risk treatment."""

    name: str
    kind: str  # tank_lower | tank_upper | pump_lower | pump_upper
    treatment: str
    stage: int  # deepest error stage the constraint depends on
    bound: float
    # b_i(e) = <b_cols, vars> + b_const ; a_i(D) = sign * (row of M_u D + M_d)
    b_const: float


@dataclass
class WindowStage:
    """Per-stage linearization bundle used by the assembler."""

    q_bar: np.ndarray
    a: np.ndarray
    b: np.ndarray
    t_u: np.ndarray
    t_d: np.ndarray
    t_x: np.ndarray
    x_ref: np.ndarray  # tank heads the stage was linearized at (end of interval)


@dataclass
class AffinePolicySolution:
    d_gain: np.ndarray  # (n_u*H, n_xi*H), GPM per GPM, block lower triangular
    e_nominal: np.ndarray  # (H, n_u) GPM
    v_nominal: np.ndarray  # (H, n_w) GPM
    phi_nominal: np.ndarray  # (H, n_phi) ft
    l_nominal: np.ndarray  # (H, n_junctions) ft
    x_nominal: np.ndarray  # (H+1, n_tk) ft, includes x0
    kappa: dict[str, float]
    lam: dict[str, float]
    s_mean: dict[str, float]
    risk: dict[str, float]
    objective: float
    expected_cost: float
    worst_case_risk: float
    m_u: np.ndarray  # tank-head response to pump adjustments (internal units)
    m_d: np.ndarray  # tank-head response to demand errors (internal units)
    qp: QpProblem
    sol: QpSolution
    xi_nodes: list[str]
    horizon: int


class AssemblyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# CVaR epigraph pieces
# ---------------------------------------------------------------------------


def cvar_epigraph_terms(
    a_i: np.ndarray, b_i: float, kappa: float, beta: float
) -> list[tuple[np.ndarray, float]]:
    """The two affine pieces whose max equals [C(xi) + kappa]_+ - kappa*beta
    for C(xi) = <a_i, xi> + b_i."""
    if not (0.0 < beta <= 1.0):
        raise ValueError("beta must lie in (0, 1]")
    return [
        (a_i, b_i + kappa * (1.0 - beta)),
        (np.zeros_like(a_i), -kappa * beta),
    ]


# ---------------------------------------------------------------------------
# Assembler
# ---------------------------------------------------------------------------


class _VarMap:
    """Running variable-index allocator with named blocks."""

    def __init__(self) -> None:
        self.total = 0
        self.blocks: dict[str, tuple[int, int]] = {}

    def add(self, name: str, size: int) -> int:
        start = self.total
        self.blocks[name] = (start, size)
        self.total += size
        return start

    def slice(self, name: str) -> slice:
        start, size = self.blocks[name]
        return slice(start, start + size)


class DroQpBuilder:
    """Assembles the window QP for one linearization pass.

    The builder owns the variable layout; :func:`assemble_dro_qp` is the
    public entry.
    """

    def __init__(
        self,
        net: Network,
        model: HydraulicModel,
        stages: list[WindowStage],
        costs: CostSpec,
        cons: ConstraintSpec,
        train: TrainingSet,
        x0: np.ndarray,
        demand_nominal: np.ndarray,  # (H, n_nodes) GPM
        t0: int,
        controller: ControllerKind,
        theta: float = 0.0,
        u_prev: np.ndarray | None = None,
        dt_hours: float = 1.0,
    ) -> None:
        self.net = net
        self.model = model
        self.stages = stages
        self.costs = costs
        self.cons = cons
        self.train = train
        self.x0 = np.asarray(x0, dtype=float)
        self.demand = np.asarray(demand_nominal, dtype=float)
        self.t0 = t0
        self.controller = controller
        self.theta = theta
        self.dt = dt_hours
        self.horizon = len(stages)
        self.u_prev = None if u_prev is None else np.asarray(u_prev, dtype=float)

        m = model
        self.pumps = [n for n, lm in enumerate(m.links) if lm.kind == PUMP]
        self.nonpump = [n for n, lm in enumerate(m.links) if lm.kind != PUMP]
        self.valves = [n for n, lm in enumerate(m.links) if lm.kind == PRV]
        self.n_u = len(self.pumps)
        self.n_w = len(self.nonpump)
        self.n_phi = len(self.valves)
        self.n_tk = len(m.tanks)
        self.junctions = list(m.junctions)
        self.n_lj = len(self.junctions)
        self.uses_recourse = controller is not ControllerKind.DETERMINISTIC

        # uncertain node columns
        self.xi_nodes = list(train.nodes)
        self.n_xi = len(self.xi_nodes)
        node_idx = {net.nodes[i].id: i for i in range(len(net.nodes))}
        junction_pos = {node: k for k, node in enumerate(self.junctions)}
        self.xi_junction_cols = []
        for nid in self.xi_nodes:
            if nid not in node_idx or node_idx[nid] not in junction_pos:
                raise AssemblyError(f"uncertain node {nid!r} is not a junction of the network")
            self.xi_junction_cols.append(junction_pos[node_idx[nid]])

        self.samples_int = train.flat() * units.GPM_TO_FT3H  # (N_s, n_xi*H)
        if train.horizon != self.horizon:
            raise AssemblyError(
                f"training horizon {train.horizon} does not match window {self.horizon}"
            )
        self.n_s = train.n_samples

        self._layout()
        self._recourse_maps()

    # -- variable layout ---------------------------------------------

    def _layout(self) -> None:
        vm = _VarMap()
        h = self.horizon
        for tau in range(h):
            vm.add(f"e{tau}", self.n_u)
            vm.add(f"v{tau}", self.n_w)
            vm.add(f"phi{tau}", self.n_phi)
            vm.add(f"l{tau}", self.n_lj)
        vm.add("x", self.n_tk * h)
        if self.uses_recourse:
            # causal blocks D[r, c] for c <= r, each n_u x n_xi
            self.d_index: dict[tuple[int, int], int] = {}
            for r in range(h):
                for c in range(r + 1):
                    self.d_index[(r, c)] = vm.add(f"D{r}.{c}", self.n_u * self.n_xi)
        self.vm = vm

    def _d_var(self, r: int, c: int, i_u: int, j_xi: int) -> int:
        return self.d_index[(r, c)] + i_u * self.n_xi + j_xi

    def d_row_entries(self, r: int, i_u: int) -> list[tuple[int, int]]:
        """(variable index, lifted xi column) pairs of one row of D."""
        out = []
        for c in range(r + 1):
            for j in range(self.n_xi):
                out.append((self._d_var(r, c, i_u, j), c * self.n_xi + j))
        return out

    # -- recourse maps -------------------------------------------------

    def _recourse_maps(self) -> None:
        """Lifted tank-head deviation maps: dx = M_u (D xi) + M_d xi with the
        per-stage network response and implicit within-stage tank feedback."""
        h, n_tk = self.horizon, self.n_tk
        n_u, n_xi = self.n_u, self.n_xi
        m_u = np.zeros((n_tk * h, n_u * h))
        m_d = np.zeros((n_tk * h, n_xi * h))
        if not self.uses_recourse:
            self.m_u, self.m_d = m_u, m_d
            return
        scale = np.diag(self.dt / self.model.tank_areas)
        prev_u = np.zeros((n_tk, n_u * h))
        prev_d = np.zeros((n_tk, n_xi * h))
        for tau, st in enumerate(self.stages):
            t_d = st.t_d[:, self.xi_junction_cols]  # restrict to uncertain nodes
            gain = np.linalg.solve(np.eye(n_tk) - scale @ st.t_x, np.eye(n_tk))
            base_u = prev_u.copy()
            base_d = prev_d.copy()
            base_u[:, tau * n_u : (tau + 1) * n_u] += scale @ st.t_u
            base_d[:, tau * n_xi : (tau + 1) * n_xi] += scale @ t_d
            cur_u = gain @ base_u
            cur_d = gain @ base_d
            m_u[tau * n_tk : (tau + 1) * n_tk] = cur_u
            m_d[tau * n_tk : (tau + 1) * n_tk] = cur_d
            prev_u, prev_d = cur_u, cur_d
        self.m_u, self.m_d = m_u, m_d

    # -- assembly -------------------------------------------------------

    def build(self) -> tuple[QpProblem, dict]:
        n = self.vm.total
        eq_rows: list[tuple[list[int], list[float], float]] = []
        in_rows: list[tuple[list[int], list[float], float]] = []

        def add_eq(cols, vals, rhs):
            eq_rows.append((list(cols), list(vals), float(rhs)))

        def add_in(cols, vals, rhs):
            in_rows.append((list(cols), list(vals), float(rhs)))

        self._nominal_physics(add_eq)
        self._nominal_bounds(add_in)
        risk_cons = self._risk_constraints()

        # risk variables appended after the core layout
        extra_cols: dict[str, int] = {}

        def new_var(name: str) -> int:
            nonlocal n
            extra_cols[name] = n
            n += 1
            return n - 1

        objective_lin: dict[int, float] = {}
        meta: dict = {"risk": risk_cons, "cols": extra_cols}

        if self.controller is ControllerKind.ROBUST:
            self._robust_rows(risk_cons, add_in, new_var)
        else:
            self._risk_rows(risk_cons, add_in, new_var, objective_lin)

        p_trip, c_vec = self._objective(n, objective_lin)

        a_eq, b_eq = _rows_to_csr(eq_rows, n)
        a_in, b_in = _rows_to_csr(in_rows, n)
        prob = QpProblem(
            p=sp.csc_matrix((p_trip[2], (p_trip[0], p_trip[1])), shape=(n, n)),
            c=c_vec,
            a_eq=a_eq,
            b_eq=b_eq,
            a_in=a_in,
            b_in=b_in,
        )
        return prob, meta

    # nominal mass balance, energy conservation, tank dynamics
    def _nominal_physics(self, add_eq) -> None:
        m = self.model
        g = units.GPM_TO_FT3H
        h = self.horizon
        x_off = self.vm.blocks["x"][0]
        for tau in range(h):
            st = self.stages[tau]
            e_off = self.vm.blocks[f"e{tau}"][0]
            v_off = self.vm.blocks[f"v{tau}"][0]
            phi_off = self.vm.blocks[f"phi{tau}"][0]
            l_off = self.vm.blocks[f"l{tau}"][0]
            junction_col = {node: l_off + k for k, node in enumerate(self.junctions)}
            link_col = {}
            for k, nlink in enumerate(self.pumps):
                link_col[nlink] = e_off + k
            for k, nlink in enumerate(self.nonpump):
                link_col[nlink] = v_off + k

            # junction mass balance: net inflow = nominal demand (internal units)
            for i in self.junctions:
                cols, vals = [], []
                for nlink in range(m.n_links):
                    s = m.bf[nlink, i]
                    if s != 0.0:
                        cols.append(link_col[nlink])
                        vals.append(-s)
                add_eq(cols, vals, self.demand[tau, i] * g)

            # per-link energy rows (pipes and valves; pumps excluded)
            x_cols = {int(t): x_off + tau * self.n_tk + j for j, t in enumerate(m.tanks)}
            for nlink, lm in enumerate(m.links):
                if lm.kind == PUMP:
                    continue
                fi = int(np.argmax(m.bf[nlink] > 0))
                ti = int(np.argmax(m.bf[nlink] < 0))
                cols, vals = [], []
                rhs = 0.0
                if lm.kind == PRV:
                    k_phi = self.valves.index(nlink)
                    cols.append(phi_off + k_phi)
                    vals.append(-1.0)
                else:
                    a_n, b_n = st.a[nlink], st.b[nlink]
                    rhs += lm.sigma * (a_n - b_n * st.q_bar[nlink])
                    cols.append(link_col[nlink])
                    vals.append(-lm.sigma * b_n)
                for node, sign in ((fi, 1.0), (ti, -1.0)):
                    node_obj = self.net.nodes[node]
                    if node in x_cols:  # end-of-interval tank head
                        cols.append(x_cols[node])
                        vals.append(sign)
                    elif node_obj.kind.value == "reservoir":
                        rhs -= sign * node_obj.elevation_head
                    else:
                        cols.append(junction_col[node])
                        vals.append(sign)
                add_eq(cols, vals, rhs)

            # tank update x(tau+1) = x(tau) + dt/A * net inflow
            for j, t_node in enumerate(m.tanks):
                cols = [x_off + tau * self.n_tk + j]
                vals = [1.0]
                rhs = 0.0
                if tau == 0:
                    rhs += self.x0[j]
                else:
                    cols.append(x_off + (tau - 1) * self.n_tk + j)
                    vals.append(-1.0)
                coef = self.dt / m.tank_areas[j]
                for nlink in range(m.n_links):
                    s = m.bf[nlink, t_node]
                    if s != 0.0:
                        cols.append(link_col[nlink])
                        vals.append(coef * s)  # +s flow leaves the tank
                add_eq(cols, vals, rhs)

    def _nominal_bounds(self, add_in) -> None:
        m = self.model
        for tau in range(self.horizon):
            v_off = self.vm.blocks[f"v{tau}"][0]
            phi_off = self.vm.blocks[f"phi{tau}"][0]
            for k, nlink in enumerate(self.nonpump):
                lo, hi = m.flow_min[nlink], m.flow_max[nlink]
                if np.isfinite(hi):
                    add_in([v_off + k], [1.0], hi)
                if np.isfinite(lo):
                    add_in([v_off + k], [-1.0], -lo)
            for k in range(self.n_phi):
                add_in([phi_off + k], [-1.0], 0.0)  # PRVs only reduce head

    def _risk_constraints(self) -> list[RiskConstraint]:
        m = self.model
        out: list[RiskConstraint] = []
        for tau in range(self.horizon):
            for k, nlink in enumerate(self.pumps):
                link = self.net.links[m.active[nlink]]
                for kind, bound in (("pump_lower", link.flow_min), ("pump_upper", link.flow_max)):
                    out.append(
                        RiskConstraint(
                            name=f"{kind}:{link.id}@{tau}",
                            kind=kind,
                            treatment=self.cons.resolve(kind, link.id),
                            stage=tau,
                            bound=units.gpm_to_internal(bound) if np.isfinite(bound) else bound,
                            b_const=0.0,
                        )
                    )
        for k_state in range(1, self.horizon + 1):
            for j, t_node in enumerate(m.tanks):
                node = self.net.nodes[t_node]
                for kind, bound in (("tank_lower", node.head_min), ("tank_upper", node.head_max)):
                    out.append(
                        RiskConstraint(
                            name=f"{kind}:{node.id}@{k_state}",
                            kind=kind,
                            treatment=self.cons.resolve(kind, node.id),
                            stage=k_state - 1,
                            bound=bound,
                            b_const=0.0,
                        )
                    )
        return out

    # -- constraint coefficient helpers ---------------------------------

    def _nominal_term(self, rc: RiskConstraint) -> tuple[int, float, float]:
        """(variable column, coefficient, constant) of b_i(e)."""
        kind, name = rc.kind, rc.name
        elem, stage = name.split(":")[1].split("@")
        tau = int(stage)
        if kind.startswith("pump"):
            pump_ids = [self.model.links[n].link_id for n in self.pumps]
            k = pump_ids.index(elem)
            col = self.vm.blocks[f"e{tau}"][0] + k
            if kind == "pump_lower":
                return col, -1.0, rc.bound
            return col, 1.0, -rc.bound
        tank_ids = [self.net.nodes[t].id for t in self.model.tanks]
        j = tank_ids.index(elem)
        col = self.vm.blocks["x"][0] + (tau - 1) * self.n_tk + j
        if kind == "tank_lower":
            return col, -1.0, rc.bound
        return col, 1.0, -rc.bound

    def _a_entries(self, rc: RiskConstraint) -> tuple[list[tuple[int, int, float]], np.ndarray]:
        """a_i(D) as (D variable, xi column, coefficient) triples plus the
        constant part over the lifted xi vector."""
        kind, name = rc.kind, rc.name
        elem, stage = name.split(":")[1].split("@")
        n_xi_lift = self.n_xi * self.horizon
        const = np.zeros(n_xi_lift)
        entries: list[tuple[int, int, float]] = []
        sign = -1.0 if kind.endswith("lower") else 1.0
        if kind.startswith("pump"):
            tau = int(stage)
            pump_ids = [self.model.links[n].link_id for n in self.pumps]
            i_u = pump_ids.index(elem)
            for var, xi_col in self.d_row_entries(tau, i_u):
                entries.append((var, xi_col, sign))
        else:
            k_state = int(stage)
            tank_ids = [self.net.nodes[t].id for t in self.model.tanks]
            j = tank_ids.index(elem)
            row = (k_state - 1) * self.n_tk + j
            const += sign * self.m_d[row]
            for r in range(self.horizon):
                for i_u in range(self.n_u):
                    w = self.m_u[row, r * self.n_u + i_u]
                    if w == 0.0:
                        continue
                    for var, xi_col in self.d_row_entries(r, i_u):
                        entries.append((var, xi_col, sign * w))
        return entries, const

    # -- risk machinery ---------------------------------------------------

    def _risk_rows(self, risk_cons, add_in, new_var, objective_lin) -> None:
        rho, beta = self.costs.rho, self.costs.beta
        force_saa = self.controller is ControllerKind.SAA
        samples = self.samples_int
        support = self.train.support
        for rc in risk_cons:
            if not np.isfinite(rc.bound):
                continue
            col_b, coef_b, const_b = self._nominal_term(rc)
            if rc.treatment == "deterministic" or not self.uses_recourse:
                add_in([col_b], [coef_b], -const_b)
                continue
            eps = 0.0 if force_saa else self.train.epsilon_at(rc.stage) * units.GPM_TO_FT3H
            use_dro = rc.treatment == "dro" and not force_saa
            entries, const_vec = self._a_entries(rc)
            # per-D-variable accumulated coefficient of <a_i, xi_o>
            kap = new_var(f"kappa[{rc.name}]")
            r_var = new_var(f"risk[{rc.name}]")
            s_vars = [new_var(f"s[{rc.name}]{o}") for o in range(self.n_s)]
            lam = new_var(f"lambda[{rc.name}]") if use_dro else None

            if support is not None and use_dro:
                self._support_rows(rc, entries, const_vec, kap, s_vars, lam, add_in, new_var, rho, beta)
            else:
                for o in range(self.n_s):
                    xi = samples[o]
                    # k=1 piece: <a_i, xi_o> + b_i + kappa(1-beta) <= s_io
                    cols = [col_b, kap, s_vars[o]]
                    vals = [coef_b, (1.0 - beta), -1.0]
                    acc: dict[int, float] = {}
                    for var, xi_col, w in entries:
                        acc[var] = acc.get(var, 0.0) + w * xi[xi_col]
                    cols.extend(acc.keys())
                    vals.extend(acc.values())
                    add_in(cols, vals, -(const_b + float(const_vec @ xi)))
                    # k=2 piece: -kappa*beta <= s_io
                    add_in([kap, s_vars[o]], [-beta, -1.0], 0.0)
                if use_dro:
                    # lambda >= |a_i[c]| for every xi coordinate (k=1; k=2 is 0)
                    by_col: dict[int, dict[int, float]] = {}
                    for var, xi_col, w in entries:
                        by_col.setdefault(xi_col, {})[var] = (
                            by_col.setdefault(xi_col, {}).get(var, 0.0) + w
                        )
                    for xi_col in range(self.n_xi * self.horizon):
                        lin = by_col.get(xi_col, {})
                        base = float(const_vec[xi_col])
                        if not lin and base == 0.0:
                            continue
                        for sgn in (1.0, -1.0):
                            cols = list(lin.keys()) + [lam]
                            vals = [sgn * v for v in lin.values()] + [-1.0]
                            add_in(cols, vals, -sgn * base)

            # clipped epigraph: r >= rho*(lambda*eps + mean s), r >= 0
            cols = [r_var] + s_vars
            vals = [-1.0] + [rho / self.n_s] * self.n_s
            if use_dro and lam is not None:
                cols.append(lam)
                vals.append(rho * eps)
            add_in(cols, vals, 0.0)
            add_in([r_var], [-1.0], 0.0)
            objective_lin[r_var] = objective_lin.get(r_var, 0.0) + 1.0

    def _support_rows(self, rc, entries, const_vec, kap, s_vars, lam, add_in, new_var, rho, beta) -> None:
        """Polytope-support variant.  Works in the rho-normalized scale used
        throughout (s, lambda and varsigma all divided by rho), adding one
        varsigma block per (piece, sample) plus the dual-norm rows against
        F' varsigma - a_ik."""
        f_mat = self.train.support.f / units.GPM_TO_FT3H  # F acts on GPM paths
        z_vec = self.train.support.z
        n_rows = f_mat.shape[0]
        col_b, coef_b, const_b = self._nominal_term(rc)
        for o in range(self.n_s):
            xi = self.samples_int[o]
            slack = z_vec - f_mat @ xi
            for k_piece in (1, 2):
                vs = [new_var(f"vs[{rc.name}]{k_piece}.{o}.{r}") for r in range(n_rows)]
                for v in vs:
                    add_in([v], [-1.0], 0.0)  # varsigma >= 0
                cols = [s_vars[o]]
                vals = [-1.0]
                rhs = 0.0
                if k_piece == 1:
                    cols += [col_b, kap]
                    vals += [coef_b, 1.0 - beta]
                    acc: dict[int, float] = {}
                    for var, xi_col, w in entries:
                        acc[var] = acc.get(var, 0.0) + w * xi[xi_col]
                    cols.extend(acc.keys())
                    vals.extend(acc.values())
                    rhs -= const_b + float(const_vec @ xi)
                else:
                    cols.append(kap)
                    vals.append(-beta)
                cols.extend(vs)
                vals.extend(slack.tolist())
                add_in(cols, vals, rhs)
                # |(F' varsigma - a_ik)_coord| <= lambda per xi coordinate
                for xi_col in range(self.n_xi * self.horizon):
                    lin: dict[int, float] = {}
                    base = 0.0
                    if k_piece == 1:
                        for var, c_xi, w in entries:
                            if c_xi == xi_col:
                                lin[var] = lin.get(var, 0.0) - w
                        base = -float(const_vec[xi_col])
                    for r in range(n_rows):
                        if f_mat[r, xi_col] != 0.0:
                            lin[vs[r]] = lin.get(vs[r], 0.0) + f_mat[r, xi_col]
                    if not lin and base == 0.0:
                        continue
                    for sgn in (1.0, -1.0):
                        cols2 = list(lin.keys()) + [lam]
                        vals2 = [sgn * v for v in lin.values()] + [-1.0]
                        add_in(cols2, vals2, -sgn * base)

    def _robust_rows(self, risk_cons, add_in, new_var) -> None:
        """Box-robust tightening: b_i + sum_c |theta*dbar_c * a_i[c]| <= 0,
        stated with one magnitude variable per xi coordinate."""
        half = self._box_halfwidths()
        for rc in risk_cons:
            if not np.isfinite(rc.bound):
                continue
            col_b, coef_b, const_b = self._nominal_term(rc)
            if rc.treatment == "deterministic":
                add_in([col_b], [coef_b], -const_b)
                continue
            entries, const_vec = self._a_entries(rc)
            by_col: dict[int, dict[int, float]] = {}
            for var, xi_col, w in entries:
                by_col.setdefault(xi_col, {})[var] = by_col.setdefault(xi_col, {}).get(var, 0.0) + w
            m_vars = []
            for xi_col in range(self.n_xi * self.horizon):
                lin = by_col.get(xi_col, {})
                base = float(const_vec[xi_col])
                if (not lin and base == 0.0) or half[xi_col] == 0.0:
                    continue
                mv = new_var(f"m[{rc.name}]{xi_col}")
                m_vars.append(mv)
                for sgn in (1.0, -1.0):
                    cols = list(lin.keys()) + [mv]
                    vals = [sgn * half[xi_col] * v for v in lin.values()] + [-1.0]
                    add_in(cols, vals, -sgn * half[xi_col] * base)
            add_in([col_b] + m_vars, [coef_b] + [1.0] * len(m_vars), -const_b)

    def _box_halfwidths(self) -> np.ndarray:
        """theta * nominal demand per uncertain node and stage, internal units."""
        out = np.zeros(self.n_xi * self.horizon)
        node_idx = {self.net.nodes[i].id: i for i in range(len(self.net.nodes))}
        for tau in range(self.horizon):
            for j, nid in enumerate(self.xi_nodes):
                out[tau * self.n_xi + j] = (
                    self.theta * self.demand[tau, node_idx[nid]] * units.GPM_TO_FT3H
                )
        return out

    # -- objective -------------------------------------------------------

    def _objective(self, n: int, objective_lin: dict[int, float]):
        rows: list[int] = []
        cols: list[int] = []
        vals: list[float] = []
        c = np.zeros(n)
        for var, w in objective_lin.items():
            c[var] += w

        g = units.GPM_TO_FT3H
        # forecast errors are zero-mean by construction, so the policy
        # expectation keeps only the empirical second moment of the samples
        sigma2 = (
            self.samples_int.T @ self.samples_int / self.n_s if self.uses_recourse else None
        )

        def put(i: int, j: int, v: float) -> None:
            rows.append(i)
            cols.append(j)
            vals.append(v)

        for tau in range(self.horizon):
            price = self.costs.tou[(self.t0 + tau) % len(self.costs.tou)]
            e_off = self.vm.blocks[f"e{tau}"][0]
            for k in range(self.n_u):
                c1 = self.costs.pump_c1[k] / g  # stated per GPM
                c2 = self.costs.pump_c2[k] / (g * g)
                c[e_off + k] += price * c1
                put(e_off + k, e_off + k, 2.0 * price * c2)
                if self.uses_recourse:
                    # E[c2 (e + D xi)^2] = c2 e^2 + c2 (D row) Sigma (D row)'
                    row_entries = self.d_row_entries(tau, k)
                    for var_a, col_a in row_entries:
                        for var_b, col_b in row_entries:
                            w = 2.0 * price * c2 * sigma2[col_a, col_b]
                            if w != 0.0:
                                put(var_a, var_b, w)

        if self.costs.smooth_weight > 0.0:
            w_s = self.costs.smooth_weight / (g * g)
            for tau in range(self.horizon):
                e_off = self.vm.blocks[f"e{tau}"][0]
                if tau == 0:
                    if self.u_prev is not None:  # (e_0 - u applied at t-1)^2
                        for k in range(self.n_u):
                            put(e_off + k, e_off + k, 2.0 * w_s)
                            c[e_off + k] += -2.0 * w_s * self.u_prev[k] * g
                    continue
                p_off = self.vm.blocks[f"e{tau-1}"][0]
                for k in range(self.n_u):
                    for (i, si) in ((e_off + k, 1.0), (p_off + k, -1.0)):
                        for (j, sj) in ((e_off + k, 1.0), (p_off + k, -1.0)):
                            put(i, j, 2.0 * w_s * si * sj)

        if self.costs.safety_weight > 0.0:
            x_off = self.vm.blocks["x"][0]
            for idx in range(self.n_tk * self.horizon):
                put(x_off + idx, x_off + idx, 2.0 * self.costs.safety_weight)
                c[x_off + idx] += -2.0 * self.costs.safety_weight * self.costs.safety_head

        if self.uses_recourse:
            # tie-break ridge keeps unused feedback entries at zero
            for (r, cc), start in self.d_index.items():
                for k in range(self.n_u * self.n_xi):
                    put(start + k, start + k, 2.0 * 1e-8)

        return (rows, cols, vals), c


def _rows_to_csr(rows: list[tuple[list[int], list[float], float]], n: int):
    if not rows:
        return sp.csc_matrix((0, n)), np.zeros(0)
    data = []
    indices = []
    indptr = [0]
    rhs = []
    for cols, vals, b in rows:
        indices.extend(cols)
        data.extend(vals)
        indptr.append(len(indices))
        rhs.append(b)
    mat = sp.csr_matrix((data, indices, indptr), shape=(len(rows), n)).tocsc()
    return mat, np.array(rhs)


# ---------------------------------------------------------------------------
# Public entry
# ---------------------------------------------------------------------------


def assemble_dro_qp(
    net: Network,
    model: HydraulicModel,
    stages: list[WindowStage],
    costs: CostSpec,
    cons: ConstraintSpec,
    train: TrainingSet,
    x0: np.ndarray,
    demand_nominal: np.ndarray,
    t0: int,
    controller: ControllerKind = ControllerKind.DRO,
    theta: float = 0.0,
    dt_hours: float = 1.0,
    u_prev: np.ndarray | None = None,
) -> tuple[QpProblem, DroQpBuilder, dict]:
    builder = DroQpBuilder(
        net,
        model,
        stages,
        costs,
        cons,
        train,
        x0,
        demand_nominal,
        t0,
        controller,
        theta=theta,
        u_prev=u_prev,
        dt_hours=dt_hours,
    )
    prob, meta = builder.build()
    return prob, builder, meta


def extract_solution(
    builder: DroQpBuilder, prob: QpProblem, sol: QpSolution, meta: dict
) -> AffinePolicySolution:
    x = sol.x
    h = builder.horizon
    g = units.GPM_TO_FT3H
    e_nom = np.array([x[builder.vm.slice(f"e{tau}")] for tau in range(h)]) / g
    v_nom = np.array([x[builder.vm.slice(f"v{tau}")] for tau in range(h)]) / g
    phi_nom = np.array([x[builder.vm.slice(f"phi{tau}")] for tau in range(h)])
    l_nom = np.array([x[builder.vm.slice(f"l{tau}")] for tau in range(h)])
    x_lift = x[builder.vm.slice("x")]
    x_nom = np.vstack([builder.x0[None, :], x_lift.reshape(h, builder.n_tk)])

    n_xi_l = builder.n_xi * h
    d_gain = np.zeros((builder.n_u * h, n_xi_l))
    if builder.uses_recourse:
        for (r, c), start in builder.d_index.items():
            blk = x[start : start + builder.n_u * builder.n_xi].reshape(builder.n_u, builder.n_xi)
            d_gain[r * builder.n_u : (r + 1) * builder.n_u, c * builder.n_xi : (c + 1) * builder.n_xi] = blk

    cols = meta["cols"]
    kappa = {}
    lam = {}
    s_mean = {}
    risk = {}
    for rc in meta["risk"]:
        key = rc.name
        if f"kappa[{key}]" in cols:
            kappa[key] = float(x[cols[f"kappa[{key}]"]])
        if f"lambda[{key}]" in cols:
            lam[key] = float(builder.costs.rho * x[cols[f"lambda[{key}]"]])
        s_cols = [cols[f"s[{key}]{o}"] for o in range(builder.n_s) if f"s[{key}]{o}" in cols]
        if s_cols:
            s_mean[key] = float(builder.costs.rho * np.mean(x[s_cols]))
        if f"risk[{key}]" in cols:
            risk[key] = float(x[cols[f"risk[{key}]"]])

    worst = float(sum(risk.values()))
    return AffinePolicySolution(
        d_gain=d_gain,
        e_nominal=e_nom,
        v_nominal=v_nom,
        phi_nominal=phi_nom,
        l_nominal=l_nom,
        x_nominal=x_nom,
        kappa=kappa,
        lam=lam,
        s_mean=s_mean,
        risk=risk,
        objective=sol.objective,
        expected_cost=sol.objective - worst,
        worst_case_risk=worst,
        m_u=builder.m_u,
        m_d=builder.m_d,
        qp=prob,
        sol=sol,
        xi_nodes=list(builder.xi_nodes),
        horizon=h,
    )
