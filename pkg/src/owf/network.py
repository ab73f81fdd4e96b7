"""Typed graph model of a water distribution network.

Nodes are junctions, reservoirs or tanks; links are pipes, pumps or
pressure-reducing valves (PRVs).  The model stores physical
coefficients in user units (feet, GPM) and exposes the signed
link-by-node incidence matrix plus static validation.

Orientation convention: every link has a ``from`` and a ``to`` node and
positive flow runs from ``from`` to ``to``.  A pump's ``from`` node is
the suction side and its ``to`` node the delivery side; its head-gain
curve alpha*q^2 + beta*q + gamma is stated as delivery-minus-suction
head for flow q through the pump.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np


class NodeKind(enum.Enum):
    JUNCTION = "junction"
    RESERVOIR = "reservoir"
    TANK = "tank"


class LinkKind(enum.Enum):
    PIPE = "pipe"
    PUMP = "pump"
    PRV = "prv"


class NetworkError(ValueError):
    """Raised for structurally invalid networks (dangling references etc.)."""


@dataclass(frozen=True)
class PipeCoeffs:
    """Chezy-Manning pipe data: length and diameter in feet, dimensionless roughness."""

    length: float
    diameter: float
    roughness: float


@dataclass(frozen=True)
class PumpCoeffs:
    """Head-gain curve alpha*q^2 + beta*q + gamma and efficiency curve
    e1*q^2 + e2*q + e3, with q in GPM and heads in feet."""

    alpha: float
    beta: float
    gamma: float
    e1: float = 0.0
    e2: float = 0.0
    e3: float = 0.0


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    base_demand: float = 0.0  # GPM, junctions only
    elevation_head: float = 0.0  # ft, reservoirs
    tank_area: float = 0.0  # ft^2, tanks
    tank_init_head: float = 0.0  # ft, tanks
    head_min: float = -math.inf
    head_max: float = math.inf
    demand_pattern: str | None = None


@dataclass(frozen=True)
class Link:
    id: str
    kind: LinkKind
    from_node: str
    to_node: str
    pipe: PipeCoeffs | None = None
    pump: PumpCoeffs | None = None
    flow_min: float = -math.inf  # GPM
    flow_max: float = math.inf  # GPM
    active: bool = True  # fixed on/off status; inactive links drop out of assembly


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    element: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: [{self.element}] {self.message}"


@dataclass
class Network:
    """Ordered node/link collections with id -> index maps.

    Immutable by convention after :func:`validate` passes; safe to share
    across worker processes read-only.
    """

    nodes: list[Node] = field(default_factory=list)
    links: list[Link] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.node_index: dict[str, int] = {n.id: i for i, n in enumerate(self.nodes)}
        self.link_index: dict[str, int] = {e.id: i for i, e in enumerate(self.links)}
        if len(self.node_index) != len(self.nodes):
            raise NetworkError("duplicate node ids")
        if len(self.link_index) != len(self.links):
            raise NetworkError("duplicate link ids")

    # -- typed views -------------------------------------------------

    def nodes_of(self, kind: NodeKind) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind is kind]

    def links_of(self, kind: LinkKind, active_only: bool = True) -> list[int]:
        return [
            i
            for i, e in enumerate(self.links)
            if e.kind is kind and (e.active or not active_only)
        ]

    @property
    def junctions(self) -> list[int]:
        return self.nodes_of(NodeKind.JUNCTION)

    @property
    def reservoirs(self) -> list[int]:
        return self.nodes_of(NodeKind.RESERVOIR)

    @property
    def tanks(self) -> list[int]:
        return self.nodes_of(NodeKind.TANK)

    def active_links(self) -> list[int]:
        return [i for i, e in enumerate(self.links) if e.active]

    def base_demand_vector(self) -> np.ndarray:
        """Base demands (GPM) over all nodes in node order."""
        return np.array([n.base_demand for n in self.nodes], dtype=float)

    def with_link(self, link_id: str, **changes) -> "Network":
        """Copy of the network with one link replaced (used to toggle `active`)."""
        i = self.link_index[link_id]
        links = list(self.links)
        links[i] = replace(links[i], **changes)
        return Network(nodes=list(self.nodes), links=links)


def build_incidence(net: Network, active_only: bool = True) -> np.ndarray:
    """Signed link-by-node incidence matrix.

    Row n carries +1 at the ``from`` node of link n and -1 at its ``to``
    node, so ``B @ h`` is the head difference along each link and
    ``-B.T @ q`` is the net inflow at each node.
    """
    links = net.active_links() if active_only else range(len(net.links))
    rows = []
    for li in links:
        link = net.links[li]
        try:
            fi = net.node_index[link.from_node]
            ti = net.node_index[link.to_node]
        except KeyError as exc:
            raise NetworkError(
                f"link {link.id!r} references unknown node {exc.args[0]!r}"
            ) from None
        row = np.zeros(len(net.nodes))
        row[fi] = 1.0
        row[ti] = -1.0
        rows.append(row)
    if not rows:
        return np.zeros((0, len(net.nodes)))
    return np.vstack(rows)


def resistance_chezy_manning(link: Link) -> float:
    """Chezy-Manning resistance 4.66 * L * C^2 / D^5.33 for a pipe.

    L and D in feet, C the Manning roughness; the result is the
    coefficient of q^2 (q in CFS) in the head-loss relation.
    """
    if link.kind is not LinkKind.PIPE or link.pipe is None:
        raise NetworkError(f"link {link.id!r} is not a pipe")
    p = link.pipe
    if p.diameter <= 0.0:
        raise NetworkError(f"pipe {link.id!r} has non-positive diameter")
    if p.length <= 0.0 or p.roughness <= 0.0:
        raise NetworkError(f"pipe {link.id!r} has non-positive length or roughness")
    return 4.66 * p.length * p.roughness**2 / p.diameter**5.33


def validate(net: Network) -> list[Diagnostic]:
    """Static validation. Empty result means every invariant holds.

    Errors cover broken references, bad coefficient signs and
    disconnected nodes; the tree-topology check and a non-concave pump
    curve only warn, since downstream code still runs on such networks
    (with weaker accuracy guarantees).
    """
    out: list[Diagnostic] = []

    def err(element: str, msg: str) -> None:
        out.append(Diagnostic("error", element, msg))

    def warn(element: str, msg: str) -> None:
        out.append(Diagnostic("warning", element, msg))

    for n in net.nodes:
        if n.base_demand < 0:
            err(n.id, "base demand must be non-negative")
        if n.kind is not NodeKind.JUNCTION and n.base_demand != 0:
            err(n.id, "only junctions may carry demand")
        if n.kind is NodeKind.TANK:
            if n.tank_area <= 0:
                err(n.id, "tank area must be positive")
            if not (n.head_min <= n.tank_init_head <= n.head_max):
                err(n.id, "initial tank head outside [head_min, head_max]")
        if n.head_min > n.head_max:
            err(n.id, "head_min exceeds head_max")

    for e in net.links:
        if e.from_node not in net.node_index:
            err(e.id, f"unknown from-node {e.from_node!r}")
            continue
        if e.to_node not in net.node_index:
            err(e.id, f"unknown to-node {e.to_node!r}")
            continue
        if e.from_node == e.to_node:
            err(e.id, "self-loop link")
        if e.flow_min > e.flow_max:
            err(e.id, "flow_min exceeds flow_max")
        if e.kind is LinkKind.PIPE:
            if e.pipe is None:
                err(e.id, "pipe link lacks pipe coefficients")
            else:
                p = e.pipe
                if p.length <= 0 or p.diameter <= 0 or p.roughness <= 0:
                    err(e.id, "pipe length, diameter and roughness must be positive")
        elif e.kind is LinkKind.PUMP:
            if e.pump is None:
                err(e.id, "pump link lacks curve coefficients")
            elif e.pump.alpha > 0:
                warn(e.id, "pump head-gain curve is not concave (alpha > 0)")

    if any(d.severity == "error" for d in out):
        return out

    # Connectivity over active links: every tank and junction must be
    # reachable from some reservoir.
    n_nodes = len(net.nodes)
    adj: list[list[int]] = [[] for _ in range(n_nodes)]
    n_active = 0
    for e in net.links:
        if not e.active:
            continue
        n_active += 1
        fi, ti = net.node_index[e.from_node], net.node_index[e.to_node]
        adj[fi].append(ti)
        adj[ti].append(fi)
    seen = [False] * n_nodes
    stack = [net.node_index[net.nodes[i].id] for i in net.reservoirs]
    for s in stack:
        seen[s] = True
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    if not net.reservoirs:
        err("network", "no reservoir present")
    for i, n in enumerate(net.nodes):
        if n.kind is not NodeKind.RESERVOIR and not seen[i]:
            err(n.id, "not reachable from any reservoir via active links")

    if n_active != n_nodes - 1:
        warn(
            "network",
            f"active links ({n_active}) != nodes - 1 ({n_nodes - 1}): not a tree;"
            " linearization accuracy is only established on trees",
        )

    return out


def is_valid(net: Network) -> bool:
    return not any(d.severity == "error" for d in validate(net))
