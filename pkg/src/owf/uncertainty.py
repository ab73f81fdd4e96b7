"""Forecast-error sample sets, support polytopes and risk oracles.

Sample paths are stored in GPM as arrays of shape (n_samples, horizon,
n_nodes) over an explicit list of uncertain nodes (those with demand).
The flattened path vector used by the controller is stage-major:
[stage 0 nodes..., stage 1 nodes..., ...].

``wasserstein_1d_empirical`` and ``cvar_discrete`` are exact sort-based
oracles used to test the optimization-side reformulations; they are not
on the controller's solve path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class SupportPolytope:
    """Feasible set {xi : F xi <= z} on the flattened path vector.

    An absent polytope (the default) means unbounded support; this is kept
    distinct from zero-sized matrices so the vacuous constraint 0 <= 0
    never arises.
    """

    f: np.ndarray
    z: np.ndarray

    def contains(self, flat: np.ndarray, tol: float = 1e-9) -> bool:
        return bool(np.all(self.f @ flat <= self.z + tol))


def box_support(half_width: np.ndarray) -> SupportPolytope:
    """|xi_j| <= half_width_j as a polytope over the flattened path."""
    n = half_width.size
    eye = np.eye(n)
    return SupportPolytope(f=np.vstack([eye, -eye]), z=np.concatenate([half_width, half_width]))


@dataclass
class TrainingSet:
    """Empirical forecast-error distribution for one controller window."""

    nodes: list[str]  # uncertain node ids, column order of samples
    samples: np.ndarray  # (n_samples, horizon, n_nodes), GPM
    epsilon: float | np.ndarray = 0.0  # Wasserstein radius, per step if a vector
    support: SupportPolytope | None = None

    def __post_init__(self) -> None:
        if self.samples.ndim != 3:
            raise ValueError("samples must have shape (n_samples, horizon, n_nodes)")
        if self.samples.shape[0] < 1:
            raise ValueError("at least one sample path is required")
        if self.samples.shape[2] != len(self.nodes):
            raise ValueError("sample node dimension does not match node list")
        eps = np.atleast_1d(np.asarray(self.epsilon, dtype=float))
        if np.any(eps < 0):
            raise ValueError("epsilon must be non-negative")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def horizon(self) -> int:
        return self.samples.shape[1]

    def flat(self) -> np.ndarray:
        """(n_samples, horizon * n_nodes) stage-major flattening."""
        return self.samples.reshape(self.n_samples, -1)

    def epsilon_at(self, stage: int) -> float:
        eps = np.atleast_1d(np.asarray(self.epsilon, dtype=float))
        return float(eps[stage]) if eps.size > 1 else float(eps[0])

    def validate_support(self) -> None:
        if self.support is None:
            return
        for o, row in enumerate(self.flat()):
            if not self.support.contains(row):
                raise ValueError(f"sample {o} falls outside the configured support")


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ForecastModel:
    """Named error generator: 'persistence' or 'gaussian' with a std
    fraction of nominal demand; reproducible under the stored seed."""

    kind: str
    sigma_frac: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("persistence", "gaussian"):
            raise ValueError(f"unknown forecast model {self.kind!r}")
        if self.sigma_frac < 0:
            raise ValueError("sigma_frac must be non-negative")


def scenario_rng(seed: int, scenario: int) -> np.random.Generator:
    """Independent stream per (seed, scenario index)."""
    return np.random.default_rng(np.random.SeedSequence((seed, scenario)))


def persistence_errors(
    pattern: np.ndarray, base: np.ndarray, horizon: int, t0: int
) -> np.ndarray:
    """Forecast errors of the hold-last-value predictor, shape (1, horizon, n).

    The forecast for every step in [t0, t0+horizon) is the demand at
    t0-1, so the error at lead k accumulates the pattern differences
    between t0-1 and t0+k; it grows with the lead on trending patterns
    and vanishes on constant ones.  The pattern is treated as periodic.
    """
    pattern = np.asarray(pattern, dtype=float)
    base = np.asarray(base, dtype=float)
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    period = pattern.size
    anchor = pattern[(t0 - 1) % period]
    out = np.empty((1, horizon, base.size))
    for k in range(horizon):
        mult = pattern[(t0 + k) % period]
        out[0, k, :] = base * (mult - anchor)
    return out


def gaussian_errors(
    nominal: np.ndarray, sigma_frac: float, n: int, seed: int | np.random.Generator
) -> np.ndarray:
    """I.i.d. zero-mean Gaussian errors, std = sigma_frac * nominal demand
    per node and step; shape (n, horizon, n_nodes).  Deterministic for a
    fixed seed."""
    if sigma_frac < 0:
        raise ValueError("sigma_frac must be non-negative")
    nominal = np.atleast_2d(np.asarray(nominal, dtype=float))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    draws = rng.standard_normal((n,) + nominal.shape)
    return draws * (sigma_frac * nominal)[None, :, :]


def clipped_gaussian_errors(
    nominal: np.ndarray, sigma_frac: float, theta: float, n: int, seed: int | np.random.Generator
) -> np.ndarray:
    """Gaussian errors clipped into the box [-theta*nominal, theta*nominal],
    keeping Monte Carlo draws consistent with a box-support model."""
    nominal = np.atleast_2d(np.asarray(nominal, dtype=float))
    raw = gaussian_errors(nominal, sigma_frac, n, seed)
    half = theta * nominal
    return np.clip(raw, -half[None, :, :], half[None, :, :])


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def wasserstein_1d_empirical(p: np.ndarray, q: np.ndarray) -> float:
    """Type-1 distance between two equal-size scalar empirical
    distributions: mean absolute difference of the sorted samples."""
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    if p.size == 0 or q.size == 0:
        raise ValueError("empty sample set")
    if p.size != q.size:
        raise ValueError("sample counts must match for the sort-and-pair oracle")
    return float(np.mean(np.abs(np.sort(p) - np.sort(q))))


def cvar_discrete(losses: np.ndarray, beta: float) -> float:
    """Exact CVaR_beta of an empirical loss distribution.

    Evaluates min_k k + mean[(loss - k)_+]/beta by sorting: the minimum
    sits at the empirical beta-quantile, and the discrete formula handles
    fractional tail mass exactly.
    """
    if not (0.0 < beta <= 1.0):
        raise ValueError("beta must lie in (0, 1]")
    x = np.sort(np.asarray(losses, dtype=float).ravel())[::-1]
    n = x.size
    if n == 0:
        raise ValueError("empty loss set")
    m = beta * n
    j = int(np.ceil(m - 1e-12))
    kappa = x[j - 1]
    return float(kappa + np.sum(x[: j - 1] - kappa) / m)


def cvar_epigraph_value(losses: np.ndarray, beta: float, kappa: float) -> float:
    """kappa + mean[(loss - kappa)_+]/beta, the epigraph objective the QP
    reformulation minimizes over kappa."""
    losses = np.asarray(losses, dtype=float).ravel()
    return float(kappa + np.mean(np.maximum(losses - kappa, 0.0)) / beta)


def cvar_epigraph_min(losses: np.ndarray, beta: float) -> float:
    """Minimize the epigraph objective explicitly; the optimum is attained
    at one of the sample points, so scanning them is exact."""
    losses = np.asarray(losses, dtype=float).ravel()
    return min(cvar_epigraph_value(losses, beta, k) for k in losses)


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

SAMPLES_HEADER = ("scenario", "step", "node", "error")


def samples_to_csv(ts: TrainingSet, path: str | Path) -> None:
    """Write (scenario, step, node, error) rows for external forecasters."""
    lines = [",".join(SAMPLES_HEADER)]
    for o in range(ts.n_samples):
        for k in range(ts.horizon):
            for j, node in enumerate(ts.nodes):
                lines.append(f"{o},{k},{node},{ts.samples[o, k, j]!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def samples_from_csv(path: str | Path, epsilon: float | np.ndarray = 0.0,
                     support: SupportPolytope | None = None) -> TrainingSet:
    """Read a sample-set CSV produced by :func:`samples_to_csv` (or any
    external forecaster following the same schema)."""
    rows = Path(path).read_text().strip().splitlines()
    if not rows or tuple(rows[0].split(",")) != SAMPLES_HEADER:
        raise ValueError(f"{path}: expected header {','.join(SAMPLES_HEADER)!r}")
    records: dict[tuple[int, int, str], float] = {}
    nodes: list[str] = []
    max_scen = -1
    max_step = -1
    for lineno, row in enumerate(rows[1:], start=2):
        parts = row.split(",")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields")
        o, k, node, err = int(parts[0]), int(parts[1]), parts[2], float(parts[3])
        if node not in nodes:
            nodes.append(node)
        records[(o, k, node)] = err
        max_scen = max(max_scen, o)
        max_step = max(max_step, k)
    samples = np.zeros((max_scen + 1, max_step + 1, len(nodes)))
    for (o, k, node), err in records.items():
        samples[o, k, nodes.index(node)] = err
    return TrainingSet(nodes=nodes, samples=samples, epsilon=epsilon, support=support)
