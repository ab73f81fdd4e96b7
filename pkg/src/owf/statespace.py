"""Per-step difference-algebraic model of the linearized network and its
horizon-lifted form.

Variable blocks follow the link/node partition of the network:

* ``x``   tank heads                      (n_tk)
* ``l``   junction + reservoir heads      (n_l, junctions first)
* ``u``   pump flows                      (n_u)
* ``v``   pipe + PRV flows                (n_v)
* ``v_p`` pipe flows only                 (n_p)
* ``phi`` PRV head reductions             (n_phi)

The three relations are the tank update, nodal mass balance and the
Laplacian-form energy conservation.  With the incidence convention
(+1 at the from-node) net nodal inflow is ``-B_f.T q``, so the mass
and tank blocks carry a minus sign relative to the raw incidence
transpose while the energy blocks are the plain Laplacian partition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hydraulics import PIPE, PRV, PUMP, HydraulicModel, LinearizedHydraulics
from .network import Network, NodeKind


@dataclass(frozen=True)
class DaeDimensions:
    n_tk: int
    n_u: int
    n_v: int
    n_p: int
    n_l: int
    n_phi: int

    def as_tuple(self) -> tuple[int, int, int, int, int, int]:
        return (self.n_tk, self.n_u, self.n_v, self.n_p, self.n_l, self.n_phi)


@dataclass
class DaeModel:
    """One-step model x+ = A x + B_u u + B_v v;  d = E_u u + E_v v;
    F_x x + F_l l = F_u u + F_v v_p + F_phi phi + F_0."""

    a: np.ndarray
    b_u: np.ndarray
    b_v: np.ndarray
    e_u: np.ndarray
    e_v: np.ndarray
    f_x: np.ndarray
    f_l: np.ndarray
    f_u: np.ndarray
    f_v: np.ndarray
    f_phi: np.ndarray
    f_0: np.ndarray
    dims: DaeDimensions
    tank_nodes: np.ndarray
    head_nodes: np.ndarray  # junctions then reservoirs
    pump_links: np.ndarray
    pipe_links: np.ndarray
    valve_links: np.ndarray


def build_dae(net: Network, model: HydraulicModel, lin: LinearizedHydraulics, dt_hours: float) -> DaeModel:
    """Assemble the DAE blocks from a linearization snapshot.

    The energy blocks are the Laplacian column partition (tanks vs other
    nodes) against the incidence transpose partition (pumps / pipes /
    valves) plus the carrying vector; the mass/tank blocks are the
    negated incidence transpose, scaled by dt/area for tanks.
    """
    tanks = model.tanks
    for t in tanks:
        if net.nodes[t].tank_area <= 0:
            raise ValueError(f"tank {net.nodes[t].id!r} lacks a positive area")
    juncs = [i for i, n in enumerate(net.nodes) if n.kind is NodeKind.JUNCTION]
    ress = [i for i, n in enumerate(net.nodes) if n.kind is NodeKind.RESERVOIR]
    head_nodes = np.array(juncs + ress, dtype=int)

    pumps = np.array([n for n, lm in enumerate(model.links) if lm.kind == PUMP], dtype=int)
    pipes = np.array([n for n, lm in enumerate(model.links) if lm.kind == PIPE], dtype=int)
    valves = np.array([n for n, lm in enumerate(model.links) if lm.kind == PRV], dtype=int)

    bt = lin.B_f.T  # nodes x links
    inflow = -bt  # net inflow operator
    scale = np.diag(dt_hours / model.tank_areas) if len(tanks) else np.zeros((0, 0))

    b_u = scale @ inflow[np.ix_(tanks, pumps)] if len(tanks) else np.zeros((0, len(pumps)))
    nonpump = np.concatenate([pipes, valves]) if len(pipes) + len(valves) else np.array([], dtype=int)
    b_v = scale @ inflow[np.ix_(tanks, nonpump)] if len(tanks) else np.zeros((0, len(nonpump)))

    e_u = inflow[:, pumps]
    e_v = inflow[:, nonpump]

    f_x = lin.L[:, tanks]
    f_l = lin.L[:, head_nodes]
    f_u = bt[:, pumps]
    f_v = bt[:, pipes]
    f_phi = bt[:, valves]
    f_0 = lin.Q_bar.copy()

    dims = DaeDimensions(
        n_tk=len(tanks),
        n_u=len(pumps),
        n_v=len(nonpump),
        n_p=len(pipes),
        n_l=len(head_nodes),
        n_phi=len(valves),
    )
    return DaeModel(
        a=np.eye(len(tanks)),
        b_u=b_u,
        b_v=b_v,
        e_u=e_u,
        e_v=e_v,
        f_x=f_x,
        f_l=f_l,
        f_u=f_u,
        f_v=f_v,
        f_phi=f_phi,
        f_0=f_0,
        dims=dims,
        tank_nodes=tanks.copy(),
        head_nodes=head_nodes,
        pump_links=pumps,
        pipe_links=pipes,
        valve_links=valves,
    )


@dataclass
class LiftedSystem:
    """Horizon-stacked matrices: states x(1..t) against inputs at stages
    0..t-1, with block-diagonal Kronecker lifts for the algebraic rows."""

    a: np.ndarray  # (n_tk*t, n_tk): stacked powers applied to x0
    b_u: np.ndarray
    b_v: np.ndarray
    e_u: np.ndarray
    e_v: np.ndarray
    f_x: np.ndarray
    f_l: np.ndarray
    f_u: np.ndarray
    f_v: np.ndarray
    f_phi: np.ndarray
    f_0: np.ndarray
    horizon: int
    dae: DaeModel


def lift_horizon(dae: DaeModel, t: int) -> LiftedSystem:
    """Causal stacking over ``t`` stages.

    ``a`` holds [A; A^2; ...; A^t]; ``b_u``/``b_v`` are block lower
    triangular with block (r, c) = A^(r-c) B for c <= r; the E/F blocks
    are I_t (x) block.
    """
    if t < 1:
        raise ValueError("horizon must be >= 1")
    n_tk = dae.dims.n_tk
    powers = [np.eye(n_tk)]
    for _ in range(t):
        powers.append(dae.a @ powers[-1])

    a = np.vstack([powers[k] for k in range(1, t + 1)]) if n_tk else np.zeros((0, 0))

    def toeplitz(block: np.ndarray) -> np.ndarray:
        rows = []
        ncols = block.shape[1]
        for r in range(t):
            row = [
                powers[r - c] @ block if c <= r else np.zeros((n_tk, ncols))
                for c in range(t)
            ]
            rows.append(np.hstack(row))
        return np.vstack(rows) if rows else np.zeros((0, 0))

    eye_t = np.eye(t)
    return LiftedSystem(
        a=a,
        b_u=toeplitz(dae.b_u),
        b_v=toeplitz(dae.b_v),
        e_u=np.kron(eye_t, dae.e_u),
        e_v=np.kron(eye_t, dae.e_v),
        f_x=np.kron(eye_t, dae.f_x),
        f_l=np.kron(eye_t, dae.f_l),
        f_u=np.kron(eye_t, dae.f_u),
        f_v=np.kron(eye_t, dae.f_v),
        f_phi=np.kron(eye_t, dae.f_phi),
        f_0=np.tile(dae.f_0, t),
        horizon=t,
        dae=dae,
    )


def simulate_steps(dae: DaeModel, x0: np.ndarray, u_path: np.ndarray, v_path: np.ndarray) -> np.ndarray:
    """Step-by-step recursion oracle: returns x(1..t) stacked."""
    x = np.asarray(x0, dtype=float).copy()
    out = []
    for k in range(u_path.shape[0]):
        x = dae.a @ x + dae.b_u @ u_path[k] + dae.b_v @ v_path[k]
        out.append(x.copy())
    return np.concatenate(out) if out else np.zeros(0)
