"""Nonlinear hydraulic residuals, Laplacian linearization and the
successive-linearization solver.

Per-link head relations (flow q positive along the link's from->to
orientation, internal units ft and ft^3/h):

* pipe:  h_from - h_to = r * q * |q|            (signed Chezy-Manning loss)
* pump:  h_to - h_from = alpha q^2 + beta q + gamma   (delivery-side gain)
* PRV:   h_from - h_to = phi                     (commanded head reduction)

``link_headfun``/``linearize_link`` work in the natural orientation of
each relation (a pump's value is its head gain); assembly multiplies by
the orientation sign so that every energy row reads
``h_from - h_to = a~ + b~ * dq`` along the incidence direction.

The weighted node Laplacian uses edge weights 1/b~.  Solving mass
balance plus the linearized energy rows is a square sparse system; one
Newton pass of the successive scheme is exactly that solve, and the
iteration stops when the squared flow-correction norm falls below a
tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .network import Link, LinkKind, Network, NodeKind
from . import units

SLOPE_FLOOR = 1e-8

PIPE, PUMP, PRV = 0, 1, 2
_KIND_CODE = {LinkKind.PIPE: PIPE, LinkKind.PUMP: PUMP, LinkKind.PRV: PRV}


class HydraulicError(RuntimeError):
    pass


class InfeasibleNetworkError(HydraulicError):
    """The stage system is singular (disconnected active graph or no head anchor)."""


class NonConvergenceError(HydraulicError):
    def __init__(self, message: str, err_trace: list[float]):
        super().__init__(message)
        self.err_trace = err_trace


@dataclass(frozen=True)
class LinkModel:
    """Internal-unit coefficients for one active link."""

    link_id: str
    kind: int  # PIPE | PUMP | PRV
    r: float = 0.0  # ft / (ft^3/h)^2
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    sigma: float = 1.0  # orientation sign of the head relation along from->to


def link_headfun(lm: LinkModel, q: float) -> float:
    """Head difference across the link at flow q, in the relation's own
    orientation (pumps: head gain at the delivery node); PRVs return the
    argument itself, which carries phi rather than a flow."""
    if lm.kind == PIPE:
        return lm.r * q * abs(q)
    if lm.kind == PUMP:
        return lm.alpha * q * q + lm.beta * q + lm.gamma
    return q  # PRV: identity in phi


def linearize_link(lm: LinkModel, q_bar: float, floor: float = SLOPE_FLOOR) -> tuple[float, float]:
    """First-order model value/slope (a, b) of the head relation at q_bar.

    The slope is floored away from zero (degenerate tangent at zero pipe
    flow) so Laplacian weights stay defined; the floor does not move the
    fixed point of the successive scheme.
    """
    if lm.kind == PIPE:
        a = lm.r * q_bar * abs(q_bar)
        b = 2.0 * lm.r * abs(q_bar)
    elif lm.kind == PUMP:
        a = lm.alpha * q_bar * q_bar + lm.beta * q_bar + lm.gamma
        b = 2.0 * lm.alpha * q_bar + lm.beta
    else:  # PRV: identity in phi
        a = q_bar
        b = 1.0
    if abs(b) < floor:
        b = floor if b >= 0.0 else -floor
    return a, b


def assemble_laplacian(bf: np.ndarray, a_t: np.ndarray, b_t: np.ndarray,
                       include: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Weighted node Laplacian and nominal carrying vector.

    ``bf`` is the incidence matrix over active links; ``a_t``/``b_t`` are
    the orientation-adjusted linearization value/slope per link (so that
    h_from - h_to = a_t + b_t dq).  Edge weights are 1/b_t; the carrying
    vector is the incidence-signed sum of a_t/b_t.  ``include`` masks the
    links that contribute (energy rows present).
    """
    n_links, n_nodes = bf.shape
    if include is None:
        include = np.ones(n_links, dtype=bool)
    lap = np.zeros((n_nodes, n_nodes))
    qbar_vec = np.zeros(n_nodes)
    for n in range(n_links):
        if not include[n]:
            continue
        fi = int(np.argmax(bf[n] > 0))
        ti = int(np.argmax(bf[n] < 0))
        w = 1.0 / b_t[n]
        lap[fi, fi] += w
        lap[ti, ti] += w
        lap[fi, ti] -= w
        lap[ti, fi] -= w
        c = a_t[n] / b_t[n]
        qbar_vec[fi] += c
        qbar_vec[ti] -= c
    return lap, qbar_vec


@dataclass
class LinearizedHydraulics:
    """Snapshot of one linearization pass: nominal flows, per-link (a, b),
    the weighted Laplacian, carrying vector and incidence matrix."""

    q_bar: np.ndarray
    a: np.ndarray  # relation-oriented values
    b: np.ndarray  # relation-oriented slopes
    L: np.ndarray
    Q_bar: np.ndarray
    B_f: np.ndarray
    energy_mask: np.ndarray


# Pump operating modes inside a stage solve.
PUMP_CURVE = "curve"  # head gain follows the fixed-speed curve, flow free
PUMP_FLOW = "flow"  # flow pinned to a command, head gain free (variable speed)


@dataclass
class StageConditions:
    """Boundary data for one hydraulic stage solve.

    ``pinned_heads`` maps node index -> head (reservoirs always; tanks at
    their current level).  ``demand`` is the full nodal demand vector in
    ft^3/h (junction rows are enforced).  ``pump_flows`` pins specific
    pump links (by active-link position) to commanded flows; pumps absent
    from it run on their curve.  ``prv_phi`` maps PRV links to commanded
    head reductions in ft (default 0 = fully open).
    """

    pinned_heads: dict[int, float]
    demand: np.ndarray
    pump_flows: dict[int, float] = field(default_factory=dict)
    prv_phi: dict[int, float] = field(default_factory=dict)


@dataclass
class StageSolution:
    h: np.ndarray  # heads over all nodes, ft
    dq: np.ndarray  # flow corrections over active links, ft^3/h
    residual: float  # inf-norm of the linear-system residual after refinement


class HydraulicModel:
    """Internal-unit view of a network's active links plus solvers."""

    def __init__(self, net: Network):
        self.net = net
        self.active = net.active_links()
        self.bf = _incidence(net, self.active)
        self.links: list[LinkModel] = []
        for li in self.active:
            self.links.append(_link_model(net.links[li]))
        self.n_nodes = len(net.nodes)
        self.n_links = len(self.active)
        self.kinds = np.array([lm.kind for lm in self.links])
        self.sigma = np.array([lm.sigma for lm in self.links])
        self.junctions = np.array(
            [i for i, n in enumerate(net.nodes) if n.kind is NodeKind.JUNCTION], dtype=int
        )
        self.tanks = np.array(
            [i for i, n in enumerate(net.nodes) if n.kind is NodeKind.TANK], dtype=int
        )
        self.reservoirs = np.array(
            [i for i, n in enumerate(net.nodes) if n.kind is NodeKind.RESERVOIR], dtype=int
        )
        self.tank_areas = np.array([net.nodes[i].tank_area for i in self.tanks])
        self.flow_min = np.array(
            [units.gpm_to_internal(net.links[li].flow_min) for li in self.active]
        )
        self.flow_max = np.array(
            [units.gpm_to_internal(net.links[li].flow_max) for li in self.active]
        )

    # -- linearization -------------------------------------------------

    def linearize(self, q_bar: np.ndarray) -> LinearizedHydraulics:
        a = np.empty(self.n_links)
        b = np.empty(self.n_links)
        for n, lm in enumerate(self.links):
            a[n], b[n] = linearize_link(lm, q_bar[n])
        mask = np.ones(self.n_links, dtype=bool)
        lap, qv = assemble_laplacian(self.bf, self.sigma * a, self.sigma * b, mask)
        return LinearizedHydraulics(
            q_bar=q_bar.copy(), a=a, b=b, L=lap, Q_bar=qv, B_f=self.bf.copy(), energy_mask=mask
        )

    def default_initial_flows(self) -> np.ndarray:
        """Remark-style initialization: pipes at 1 ft/s line velocity,
        pumps at the efficiency-curve stationary point e2/(2 e1), clamped
        to their flow bounds; PRV flows start at zero."""
        q0 = np.zeros(self.n_links)
        for n, li in enumerate(self.active):
            link = self.net.links[li]
            if link.kind is LinkKind.PIPE:
                area = math.pi * link.pipe.diameter**2 / 4.0
                q0[n] = area * 1.0 * units.SECONDS_PER_HOUR  # ft^2 * ft/s -> ft^3/h
            elif link.kind is LinkKind.PUMP:
                e1, e2 = link.pump.e1, link.pump.e2
                if e1 != 0.0:
                    q_gpm = e2 / (2.0 * e1)
                else:
                    lo = link.flow_min if math.isfinite(link.flow_min) else 0.0
                    hi = link.flow_max if math.isfinite(link.flow_max) else 0.0
                    q_gpm = 0.5 * (lo + hi)
                q0[n] = units.gpm_to_internal(q_gpm)
            q0[n] = min(max(q0[n], self.flow_min[n]), self.flow_max[n])
        return q0

    # -- stage solve ---------------------------------------------------

    def solve_stage(self, q_bar: np.ndarray, cond: StageConditions) -> StageSolution:
        """One WFP pass: junction mass balance plus linearized energy rows
        around ``q_bar``, with pinned heads eliminated (Dirichlet)."""
        free_nodes = [i for i in range(self.n_nodes) if i not in cond.pinned_heads]
        if set(cond.pinned_heads) - set(range(self.n_nodes)):
            raise HydraulicError("pinned head index out of range")
        col_of_node = {i: c for c, i in enumerate(free_nodes)}
        nh = len(free_nodes)

        # Flow unknowns: every active link except flow-pinned pumps.
        pinned_flow: dict[int, float] = {}
        for n, lm in enumerate(self.links):
            if lm.kind == PUMP and n in cond.pump_flows:
                pinned_flow[n] = cond.pump_flows[n] - q_bar[n]
        free_links = [n for n in range(self.n_links) if n not in pinned_flow]
        col_of_link = {n: nh + c for c, n in enumerate(free_links)}
        nq = len(free_links)

        rows: list[int] = []
        cols: list[int] = []
        vals: list[float] = []
        rhs: list[float] = []
        r = 0

        def put(i: int, j: int, v: float) -> None:
            rows.append(i)
            cols.append(j)
            vals.append(v)

        # Junction mass balance: net inflow of (q_bar + dq) equals demand.
        for i in self.junctions:
            acc = float(cond.demand[i])
            for n in range(self.n_links):
                s = self.bf[n, i]
                if s == 0.0:
                    continue
                acc += s * q_bar[n]
                if n in pinned_flow:
                    acc += s * pinned_flow[n]
                else:
                    put(r, col_of_link[n], -s)
            rhs.append(acc)
            r += 1

        # Energy rows: h_from - h_to = sigma * (a + b dq), PRVs pinned to phi.
        for n, lm in enumerate(self.links):
            if lm.kind == PUMP and n in pinned_flow:
                continue  # variable-speed pump: gain is free
            fi = int(np.argmax(self.bf[n] > 0))
            ti = int(np.argmax(self.bf[n] < 0))
            if lm.kind == PRV:
                const = cond.prv_phi.get(n, 0.0)
            else:
                a, b = linearize_link(lm, q_bar[n])
                const = lm.sigma * a
                put(r, col_of_link[n], -lm.sigma * b)
            acc = const
            for node, sign in ((fi, 1.0), (ti, -1.0)):
                if node in cond.pinned_heads:
                    acc -= sign * cond.pinned_heads[node]
                else:
                    put(r, col_of_node[node], sign)
            rhs.append(acc)
            r += 1

        if r != nh + nq:
            raise InfeasibleNetworkError(
                f"stage system is not square: {r} equations, {nh + nq} unknowns"
                " (check PRV settings and pump modes)"
            )
        mat = sp.csc_matrix((vals, (rows, cols)), shape=(r, r))
        b_vec = np.array(rhs)
        try:
            lu = spla.splu(mat)
        except RuntimeError as exc:
            raise InfeasibleNetworkError(
                f"singular stage system (disconnected active graph or missing head anchor): {exc}"
            ) from None
        x = lu.solve(b_vec)
        # Two rounds of iterative refinement keep row residuals near machine
        # precision even when Laplacian weights are badly spread.
        for _ in range(2):
            res = b_vec - mat @ x
            x = x + lu.solve(res)
        residual = float(np.max(np.abs(b_vec - mat @ x))) if r else 0.0

        h = np.zeros(self.n_nodes)
        for i, v in cond.pinned_heads.items():
            h[i] = v
        for i in free_nodes:
            h[i] = x[col_of_node[i]]
        dq = np.zeros(self.n_links)
        for n in free_links:
            dq[n] = x[col_of_link[n]]
        for n, v in pinned_flow.items():
            dq[n] = v
        return StageSolution(h=h, dq=dq, residual=residual)

    # -- successive linearization ---------------------------------------

    def successive(
        self,
        cond: StageConditions,
        q0: np.ndarray | None = None,
        delta: float = 1e-6,
        max_iter: int = 100,
        damping: float = 1.0,
    ) -> "SuccessiveResult":
        """Relinearize / solve / update until the squared flow-correction
        norm drops to ``delta``; returns the converged state and the
        error trace.  ``damping`` scales the update (1 = plain iteration;
        the fallback for hostile starting points uses a smaller step)."""
        if delta <= 0:
            raise ValueError("delta must be positive")
        q_bar = self.default_initial_flows() if q0 is None else q0.astype(float).copy()
        if not np.all(np.isfinite(q_bar)):
            raise ValueError("initial flows must be finite")
        trace: list[float] = []
        h = np.zeros(self.n_nodes)
        residual = 0.0
        for _ in range(max_iter):
            sol = self.solve_stage(q_bar, cond)
            err = float(np.dot(sol.dq, sol.dq))
            trace.append(err)
            q_bar = q_bar + damping * sol.dq
            h = sol.h
            residual = sol.residual
            if err <= delta:
                return SuccessiveResult(h=h, q=q_bar, err_trace=trace, residual=residual)
        raise NonConvergenceError(
            f"no convergence within {max_iter} iterations (last Err {trace[-1]:.3e})", trace
        )

    def nonlinear_residuals(self, h: np.ndarray, q: np.ndarray, cond: StageConditions) -> np.ndarray:
        """|h_from - h_to - sigma*headfun(q)| per active link with an energy
        relation (flow-pinned pumps have none and report 0)."""
        out = np.zeros(self.n_links)
        for n, lm in enumerate(self.links):
            if lm.kind == PUMP and n in cond.pump_flows:
                continue
            fi = int(np.argmax(self.bf[n] > 0))
            ti = int(np.argmax(self.bf[n] < 0))
            qn = cond.prv_phi.get(n, 0.0) if lm.kind == PRV else q[n]
            out[n] = abs(h[fi] - h[ti] - lm.sigma * link_headfun(lm, qn))
        return out

    def tank_net_inflow(self, q: np.ndarray) -> np.ndarray:
        """Net inflow (ft^3/h) at each tank for active-link flows q."""
        return -(self.bf[:, self.tanks].T @ q)

    # -- linear response maps -------------------------------------------

    def stage_response(self, q_bar: np.ndarray, cond: StageConditions) -> "StageResponse":
        """Sensitivities of the stage solution to pump commands, nodal
        demand and pinned tank heads, at the linearization point q_bar.

        All pumps must be flow-pinned in ``cond`` (controller setting).
        """
        pumps = [n for n, lm in enumerate(self.links) if lm.kind == PUMP]
        if any(n not in cond.pump_flows for n in pumps):
            raise HydraulicError("stage_response requires all pumps flow-pinned")

        free_nodes = [i for i in range(self.n_nodes) if i not in cond.pinned_heads]
        col_of_node = {i: c for c, i in enumerate(free_nodes)}
        nh = len(free_nodes)
        free_links = [n for n in range(self.n_links) if n not in cond.pump_flows]
        col_of_link = {n: nh + c for c, n in enumerate(free_links)}
        nq = len(free_links)
        dim = nh + nq

        rows: list[int] = []
        cols: list[int] = []
        vals: list[float] = []
        r = 0
        junction_rows: dict[int, int] = {}
        energy_row_node: list[tuple[int, int, float]] = []  # (row, node, sign) for pinned heads

        def put(i: int, j: int, v: float) -> None:
            rows.append(i)
            cols.append(j)
            vals.append(v)

        for i in self.junctions:
            junction_rows[i] = r
            for n in range(self.n_links):
                s = self.bf[n, i]
                if s == 0.0 or n in cond.pump_flows:
                    continue
                put(r, col_of_link[n], -s)
            r += 1
        for n, lm in enumerate(self.links):
            if n in cond.pump_flows:
                continue
            fi = int(np.argmax(self.bf[n] > 0))
            ti = int(np.argmax(self.bf[n] < 0))
            if lm.kind != PRV:
                _, b = linearize_link(lm, q_bar[n])
                put(r, col_of_link[n], -lm.sigma * b)
            for node, sign in ((fi, 1.0), (ti, -1.0)):
                if node in cond.pinned_heads:
                    energy_row_node.append((r, node, sign))
                else:
                    put(r, col_of_node[node], sign)
            r += 1
        mat = sp.csc_matrix((vals, (rows, cols)), shape=(dim, dim))
        lu = spla.splu(mat)
        return StageResponse(self, lu, junction_rows, energy_row_node, col_of_link, dim, cond)


@dataclass
class StageResponse:
    """Solved sensitivity operator for one stage; see
    :meth:`HydraulicModel.stage_response`."""

    model: HydraulicModel
    lu: object
    junction_rows: dict[int, int]
    energy_row_node: list[tuple[int, int, float]]
    col_of_link: dict[int, int]
    dim: int
    cond: StageConditions

    def _flow_solution(self, rhs: np.ndarray) -> np.ndarray:
        """Map stacked rhs columns -> free-link flow deviations."""
        sol = self.lu.solve(rhs)
        if sol.ndim == 1:
            sol = sol[:, None]
        nq = len(self.col_of_link)
        flows = np.zeros((self.model.n_links, sol.shape[1]))
        for n, c in self.col_of_link.items():
            flows[n] = sol[c]
        return flows

    def tank_inflow_sensitivities(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(T_u, T_d, T_x): derivative of tank net inflow with respect to
        pump commands, junction demand and pinned tank heads."""
        m = self.model
        pumps = [n for n, lm in enumerate(m.links) if lm.kind == PUMP]
        bt_tanks = -m.bf[:, m.tanks].T  # n_TK x n_links

        # Pump command u_k: demand rows gain -bf[k, i]*1 moved to rhs, and the
        # pinned flow contributes directly to tank inflow.
        rhs_u = np.zeros((self.dim, len(pumps)))
        direct_u = np.zeros((len(m.tanks), len(pumps)))
        for c, n in enumerate(pumps):
            for i, rr in self.junction_rows.items():
                s = m.bf[n, i]
                if s != 0.0:
                    rhs_u[rr, c] += -s
            direct_u[:, c] = bt_tanks[:, n]
        # Demand at junction i: rhs of its mass row gains +1.
        rhs_d = np.zeros((self.dim, len(m.junctions)))
        for c, i in enumerate(m.junctions):
            rhs_d[self.junction_rows[i], c] = 1.0
        # Pinned tank head x_j: energy rows referencing it move sign*x to rhs.
        rhs_x = np.zeros((self.dim, len(m.tanks)))
        tank_col = {int(t): c for c, t in enumerate(m.tanks)}
        for rr, node, sign in self.energy_row_node:
            if node in tank_col:
                rhs_x[rr, tank_col[node]] += -sign

        fu = self._flow_solution(rhs_u)
        fd = self._flow_solution(rhs_d)
        fx = self._flow_solution(rhs_x)
        t_u = bt_tanks @ fu + direct_u
        t_d = bt_tanks @ fd
        t_x = bt_tanks @ fx
        return t_u, t_d, t_x

    def flow_sensitivities(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(F_u, F_d, F_x): derivative of all active-link flows with respect
        to pump commands, junction demand and pinned tank heads; pump
        columns include the pinned command itself."""
        m = self.model
        pumps = [n for n, lm in enumerate(m.links) if lm.kind == PUMP]
        rhs_u = np.zeros((self.dim, len(pumps)))
        for c, n in enumerate(pumps):
            for i, rr in self.junction_rows.items():
                s = m.bf[n, i]
                if s != 0.0:
                    rhs_u[rr, c] += -s
        rhs_d = np.zeros((self.dim, len(m.junctions)))
        for c, i in enumerate(m.junctions):
            rhs_d[self.junction_rows[i], c] = 1.0
        rhs_x = np.zeros((self.dim, len(m.tanks)))
        tank_col = {int(t): c for c, t in enumerate(m.tanks)}
        for rr, node, sign in self.energy_row_node:
            if node in tank_col:
                rhs_x[rr, tank_col[node]] += -sign
        fu = self._flow_solution(rhs_u)
        for c, n in enumerate(pumps):
            fu[n, c] += 1.0
        return fu, self._flow_solution(rhs_d), self._flow_solution(rhs_x)


@dataclass
class SuccessiveResult:
    h: np.ndarray
    q: np.ndarray
    err_trace: list[float]
    residual: float

    @property
    def iterations(self) -> int:
        return len(self.err_trace)

    @property
    def final_err(self) -> float:
        return self.err_trace[-1]


# ---------------------------------------------------------------------------
# module-level helpers
# ---------------------------------------------------------------------------


def _incidence(net: Network, active: list[int]) -> np.ndarray:
    bf = np.zeros((len(active), len(net.nodes)))
    for row, li in enumerate(active):
        link = net.links[li]
        bf[row, net.node_index[link.from_node]] = 1.0
        bf[row, net.node_index[link.to_node]] = -1.0
    return bf


def _link_model(link: Link) -> LinkModel:
    kind = _KIND_CODE[link.kind]
    if kind == PIPE:
        from .network import resistance_chezy_manning

        r_cfs = resistance_chezy_manning(link)
        return LinkModel(link_id=link.id, kind=PIPE, r=units.resistance_cfs_to_internal(r_cfs))
    if kind == PUMP:
        p = link.pump
        g = units.GPM_TO_FT3H
        # Curve coefficients arrive in GPM; rescale so q is ft^3/h.
        return LinkModel(
            link_id=link.id,
            kind=PUMP,
            alpha=p.alpha / (g * g),
            beta=p.beta / g,
            gamma=p.gamma,
            sigma=-1.0,
        )
    return LinkModel(link_id=link.id, kind=PRV)


def solve_wfp0(
    model: HydraulicModel,
    q_bar: np.ndarray,
    demand_gpm: np.ndarray,
    pinned_heads: dict[int, float],
    pump_flows_gpm: dict[int, float] | None = None,
    prv_phi: dict[int, float] | None = None,
) -> StageSolution:
    """Feasibility solve of mass balance + linearized energy conservation.

    ``demand_gpm`` is the nodal demand vector in GPM; pump commands are in
    GPM as well.  Heads come back in ft, flow corrections in ft^3/h.
    """
    cond = StageConditions(
        pinned_heads=dict(pinned_heads),
        demand=np.asarray(demand_gpm, dtype=float) * units.GPM_TO_FT3H,
        pump_flows={k: units.gpm_to_internal(v) for k, v in (pump_flows_gpm or {}).items()},
        prv_phi=dict(prv_phi or {}),
    )
    return model.solve_stage(q_bar, cond)


def successive_linearization(
    model: HydraulicModel,
    demand_gpm: np.ndarray,
    pinned_heads: dict[int, float],
    q0: np.ndarray | None = None,
    delta: float = 1e-6,
    max_iter: int = 100,
    pump_flows_gpm: dict[int, float] | None = None,
    prv_phi: dict[int, float] | None = None,
) -> SuccessiveResult:
    cond = StageConditions(
        pinned_heads=dict(pinned_heads),
        demand=np.asarray(demand_gpm, dtype=float) * units.GPM_TO_FT3H,
        pump_flows={k: units.gpm_to_internal(v) for k, v in (pump_flows_gpm or {}).items()},
        prv_phi=dict(prv_phi or {}),
    )
    return model.successive(cond, q0=q0, delta=delta, max_iter=max_iter)


def reservoir_heads(net: Network) -> dict[int, float]:
    return {i: net.nodes[i].elevation_head for i in net.reservoirs}
