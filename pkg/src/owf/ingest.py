"""EPANET-style ``.inp`` subset parser and native run-configuration loader.

Only the sections the model needs are interpreted:

    [JUNCTIONS]   id  elevation  base_demand_gpm  [pattern_id]
    [RESERVOIRS]  id  head_ft
    [TANKS]       id  elevation  init_level  min_level  max_level  diameter_ft
    [PIPES]       id  from  to  length_ft  diameter  roughness  [OPEN|CLOSED]
    [PUMPS]       id  from  to  HEAD curve_id  [EFFIC curve_id]
    [VALVES]      id  from  to  PRV
    [PATTERNS]    id  m1 m2 ...      (rows with the same id concatenate)
    [CURVES]      id  x  y           (exactly three rows per id; the quadratic
                                      through the points supplies pump coefficients)

Pipe diameter is read verbatim in feet; set ``pipe_diameter_units = "inches"``
in the run config to reinterpret.  Other sections are preserved verbatim so
real EPANET files degrade gracefully.  Comment text after ';' is stripped.

A sidecar TOML or JSON config supplies what ``.inp`` lacks for this model:
the TOU price vector, risk parameters, horizon/window lengths, per-constraint
treatments and optional flow bounds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import (
    Link,
    LinkKind,
    Network,
    Node,
    NodeKind,
    PipeCoeffs,
    PumpCoeffs,
)

KNOWN_SECTIONS = (
    "JUNCTIONS",
    "RESERVOIRS",
    "TANKS",
    "PIPES",
    "PUMPS",
    "VALVES",
    "PATTERNS",
    "CURVES",
)


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ConversionError(ValueError):
    """Raised when a parsed document cannot be turned into a Network."""


class ConfigError(ValueError):
    """Raised for invalid run-configuration input."""


@dataclass(frozen=True)
class InpRow:
    tokens: tuple[str, ...]
    line: int


@dataclass
class InpDocument:
    """Section name (upper-case) -> rows; unknown sections keep raw text."""

    sections: dict[str, list[InpRow]] = field(default_factory=dict)
    unknown: dict[str, list[str]] = field(default_factory=dict)
    section_order: list[str] = field(default_factory=list)


def parse_inp(text: str) -> InpDocument:
    """Parse ``.inp`` text into sections of whitespace-separated rows."""
    doc = InpDocument()
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError("malformed section header", lineno)
            name = line[1:-1].strip().upper()
            if not name:
                raise ParseError("empty section header", lineno)
            current = name
            if name not in doc.section_order:
                doc.section_order.append(name)
            if name in KNOWN_SECTIONS:
                doc.sections.setdefault(name, [])
            else:
                doc.unknown.setdefault(name, [])
            continue
        if current is None:
            raise ParseError("content before first section header", lineno)
        if current in KNOWN_SECTIONS:
            doc.sections[current].append(InpRow(tuple(line.split()), lineno))
        else:
            doc.unknown[current].append(raw.rstrip())
    return doc


def serialize_inp(doc: InpDocument) -> str:
    """Re-emit a document; recognized rows are whitespace-normalized."""
    out: list[str] = []
    for name in doc.section_order:
        out.append(f"[{name}]")
        if name in doc.sections:
            for row in doc.sections[name]:
                out.append(" ".join(row.tokens))
        else:
            out.extend(doc.unknown.get(name, []))
        out.append("")
    return "\n".join(out)


def _num(tok: str, what: str, line: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ParseError(f"malformed numeric {what}: {tok!r}", line) from None


def _fit_quadratic(points: list[tuple[float, float]], curve_id: str) -> tuple[float, float, float]:
    """Coefficients (a, b, c) of the quadratic a x^2 + b x + c through 3 points."""
    if len(points) != 3:
        raise ConversionError(
            f"curve {curve_id!r} needs exactly 3 points, found {len(points)}"
        )
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    try:
        coeff = np.linalg.solve(np.vander(xs, 3), ys)
    except np.linalg.LinAlgError:
        raise ConversionError(f"curve {curve_id!r} has collinear/duplicate x values") from None
    return float(coeff[0]), float(coeff[1]), float(coeff[2])


def to_network(doc: InpDocument, diameter_units: str = "feet") -> Network:
    """Build a Network from a parsed document.

    Node and link ordering is document order, which fixes the incidence
    row/column layout deterministically.
    """
    if diameter_units not in ("feet", "inches"):
        raise ConfigError(f"pipe_diameter_units must be 'feet' or 'inches', got {diameter_units!r}")
    dia_scale = 1.0 if diameter_units == "feet" else 1.0 / 12.0

    curves: dict[str, list[tuple[float, float]]] = {}
    for row in doc.sections.get("CURVES", []):
        if len(row.tokens) != 3:
            raise ConversionError(f"[CURVES] row at line {row.line}: expected 'id x y'")
        cid = row.tokens[0]
        curves.setdefault(cid, []).append(
            (_num(row.tokens[1], "curve x", row.line), _num(row.tokens[2], "curve y", row.line))
        )

    nodes: list[Node] = []
    seen: set[str] = set()

    def add_node(node: Node, line: int) -> None:
        if node.id in seen:
            raise ConversionError(f"duplicate node id {node.id!r} at line {line}")
        seen.add(node.id)
        nodes.append(node)

    for row in doc.sections.get("JUNCTIONS", []):
        t = row.tokens
        if len(t) < 3:
            raise ConversionError(f"[JUNCTIONS] row at line {row.line}: expected 'id elev demand [pattern]'")
        add_node(
            Node(
                id=t[0],
                kind=NodeKind.JUNCTION,
                base_demand=_num(t[2], "demand", row.line),
                demand_pattern=t[3] if len(t) > 3 else None,
            ),
            row.line,
        )
    for row in doc.sections.get("RESERVOIRS", []):
        t = row.tokens
        if len(t) < 2:
            raise ConversionError(f"[RESERVOIRS] row at line {row.line}: expected 'id head'")
        head = _num(t[1], "head", row.line)
        add_node(
            Node(id=t[0], kind=NodeKind.RESERVOIR, elevation_head=head, head_min=head, head_max=head),
            row.line,
        )
    for row in doc.sections.get("TANKS", []):
        t = row.tokens
        if len(t) < 6:
            raise ConversionError(
                f"[TANKS] row at line {row.line}: expected 'id elev init min max diameter'"
            )
        elev = _num(t[1], "elevation", row.line)
        init_l, min_l, max_l = (_num(t[k], "level", row.line) for k in (2, 3, 4))
        dia = _num(t[5], "diameter", row.line)
        if dia <= 0:
            raise ConversionError(f"[TANKS] row at line {row.line}: tank diameter must be positive")
        add_node(
            Node(
                id=t[0],
                kind=NodeKind.TANK,
                tank_area=math.pi * dia * dia / 4.0,
                tank_init_head=elev + init_l,
                head_min=elev + min_l,
                head_max=elev + max_l,
            ),
            row.line,
        )

    node_ids = {n.id for n in nodes}
    links: list[Link] = []
    seen_links: set[str] = set()

    def add_link(link: Link, line: int) -> None:
        if link.id in seen_links:
            raise ConversionError(f"duplicate link id {link.id!r} at line {line}")
        for nid in (link.from_node, link.to_node):
            if nid not in node_ids:
                raise ConversionError(
                    f"link {link.id!r} at line {line} references unknown node {nid!r}"
                )
        seen_links.add(link.id)
        links.append(link)

    for row in doc.sections.get("PIPES", []):
        t = row.tokens
        if len(t) < 6:
            raise ConversionError(
                f"[PIPES] row at line {row.line}: expected 'id from to length diameter roughness [status]'"
            )
        active = True
        if len(t) > 6:
            status = t[6].upper()
            if status not in ("OPEN", "CLOSED"):
                raise ConversionError(f"[PIPES] row at line {row.line}: bad status {t[6]!r}")
            active = status == "OPEN"
        add_link(
            Link(
                id=t[0],
                kind=LinkKind.PIPE,
                from_node=t[1],
                to_node=t[2],
                pipe=PipeCoeffs(
                    length=_num(t[3], "length", row.line),
                    diameter=_num(t[4], "diameter", row.line) * dia_scale,
                    roughness=_num(t[5], "roughness", row.line),
                ),
            ),
            row.line,
        )
    for row in doc.sections.get("PUMPS", []):
        t = row.tokens
        if len(t) < 5 or t[3].upper() != "HEAD":
            raise ConversionError(
                f"[PUMPS] row at line {row.line}: expected 'id from to HEAD curve [EFFIC curve]'"
            )
        if t[4] not in curves:
            raise ConversionError(f"pump {t[0]!r} references unknown curve {t[4]!r}")
        alpha, beta, gamma = _fit_quadratic(curves[t[4]], t[4])
        e1 = e2 = e3 = 0.0
        if len(t) >= 7:
            if t[5].upper() != "EFFIC":
                raise ConversionError(f"[PUMPS] row at line {row.line}: expected EFFIC keyword")
            if t[6] not in curves:
                raise ConversionError(f"pump {t[0]!r} references unknown curve {t[6]!r}")
            e1, e2, e3 = _fit_quadratic(curves[t[6]], t[6])
        add_link(
            Link(
                id=t[0],
                kind=LinkKind.PUMP,
                from_node=t[1],
                to_node=t[2],
                pump=PumpCoeffs(alpha=alpha, beta=beta, gamma=gamma, e1=e1, e2=e2, e3=e3),
                flow_min=0.0,
            ),
            row.line,
        )
    for row in doc.sections.get("VALVES", []):
        t = row.tokens
        if len(t) < 4:
            raise ConversionError(f"[VALVES] row at line {row.line}: expected 'id from to type'")
        if t[3].upper() != "PRV":
            raise ConversionError(f"unsupported valve kind {t[3]!r} at line {row.line}")
        # No reverse flow through a PRV.
        add_link(Link(id=t[0], kind=LinkKind.PRV, from_node=t[1], to_node=t[2], flow_min=0.0), row.line)

    return Network(nodes=nodes, links=links)


def parse_patterns(doc: InpDocument) -> dict[str, list[float]]:
    """Pattern id -> multiplier list; rows sharing an id concatenate."""
    patterns: dict[str, list[float]] = {}
    for row in doc.sections.get("PATTERNS", []):
        if len(row.tokens) < 2:
            raise ConversionError(f"[PATTERNS] row at line {row.line}: expected 'id m1 [m2 ...]'")
        vals = [_num(tok, "pattern multiplier", row.line) for tok in row.tokens[1:]]
        if any(v <= 0 for v in vals):
            raise ConversionError(f"[PATTERNS] row at line {row.line}: multipliers must be positive")
        patterns.setdefault(row.tokens[0], []).extend(vals)
    return patterns


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

TREATMENTS = ("deterministic", "saa", "dro")

DEFAULT_TREATMENT = {
    "tank_lower": "dro",
    "tank_upper": "deterministic",
    "pump_lower": "deterministic",
    "pump_upper": "deterministic",
}


@dataclass
class RunConfig:
    """Everything the controller and harness need beyond the ``.inp`` file."""

    horizon_hours: int = 24
    mpc_window: int = 4
    dt_hours: float = 1.0
    samples: int = 100
    epsilon: float = 0.08
    rho: float = 2.8e4
    beta: float = 0.2
    seed: int = 0
    sigma: float = 0.2  # forecast-error std as a fraction of nominal demand
    theta: float = 0.2  # half-width of the box support, fraction of nominal demand
    constraint_treatment: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_TREATMENT))
    tou_prices: list[float] = field(default_factory=lambda: list(_DEFAULT_TOU))
    demand_pattern: list[float] = field(default_factory=lambda: list(_DEFAULT_PATTERN))
    pipe_diameter_units: str = "feet"
    flow_bounds: dict[str, tuple[float, float]] = field(default_factory=dict)
    pump_energy: dict[str, tuple[float, float]] = field(default_factory=dict)  # id -> (c1, c2)
    smooth_weight: float = 0.0
    safety_weight: float = 0.0
    safety_head: float = 0.0
    rbc_rules: dict[str, dict] = field(default_factory=dict)
    delta: float = 1e-6  # successive-linearization stop tolerance
    qp_tol: float = 1e-8

    def validate(self) -> None:
        if self.horizon_hours < 1 or self.mpc_window < 1:
            raise ConfigError("horizon_hours and mpc_window must be >= 1")
        if self.dt_hours <= 0:
            raise ConfigError("dt_hours must be positive")
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")
        if self.epsilon < 0 or self.rho < 0 or self.sigma < 0 or self.theta < 0:
            raise ConfigError("epsilon, rho, sigma and theta must be non-negative")
        if not (0.0 < self.beta <= 1.0):
            raise ConfigError("beta must lie in (0, 1]")
        if len(self.tou_prices) != 24 or any(p < 0 for p in self.tou_prices):
            raise ConfigError("tou_prices must hold 24 non-negative values")
        if len(self.demand_pattern) != 24 or any(m <= 0 for m in self.demand_pattern):
            raise ConfigError("demand_pattern must hold 24 positive multipliers")
        for key, val in self.constraint_treatment.items():
            if val not in TREATMENTS:
                raise ConfigError(f"unknown treatment {val!r} for constraint {key!r}")
        if self.delta <= 0:
            raise ConfigError("delta must be positive")


# Flat fallbacks; fixtures ship their own profiles.
_DEFAULT_TOU = [0.06] * 7 + [0.10] * 7 + [0.18] * 6 + [0.10] * 4
_DEFAULT_PATTERN = [1.0] * 24


def load_config(path: str | Path) -> RunConfig:
    """Load a TOML or JSON run config; unknown keys are rejected."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".json":
        data = json.loads(raw)
    else:
        try:
            import tomllib  # py >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        data = tomllib.loads(raw.decode())
    return config_from_dict(data)


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    known = set(cfg.__dataclass_fields__)
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if key == "flow_bounds":
            value = {k: (float(v[0]), float(v[1])) for k, v in value.items()}
        if key == "pump_energy":
            value = {k: (float(v[0]), float(v[1])) for k, v in value.items()}
        if key == "constraint_treatment":
            merged = dict(DEFAULT_TREATMENT)
            merged.update(value)
            value = merged
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def apply_flow_bounds(net: Network, cfg: RunConfig) -> Network:
    """Copy of the network with config-supplied flow bounds applied."""
    out = net
    for link_id, (lo, hi) in cfg.flow_bounds.items():
        if link_id not in net.link_index:
            raise ConfigError(f"flow_bounds references unknown link {link_id!r}")
        out = out.with_link(link_id, flow_min=lo, flow_max=hi)
    return out


def load_fixture(inp_path: str | Path, config_path: str | Path | None = None) -> tuple[Network, RunConfig, dict[str, list[float]]]:
    """Parse an ``.inp`` file plus optional sidecar config.

    Returns (network, config, patterns).  When no sidecar is given, a
    config file with the same stem and a ``.toml``/``.json`` suffix is
    picked up automatically if present.
    """
    inp_path = Path(inp_path)
    if config_path is None:
        for suffix in (".toml", ".json"):
            cand = inp_path.with_suffix(suffix)
            if cand.exists():
                config_path = cand
                break
    cfg = load_config(config_path) if config_path is not None else RunConfig()
    doc = parse_inp(inp_path.read_text())
    net = to_network(doc, diameter_units=cfg.pipe_diameter_units)
    net = apply_flow_bounds(net, cfg)
    patterns = parse_patterns(doc)
    return net, cfg, patterns
