"""Convex quadratic program solver used by the controller.

The main path is an operator-splitting (ADMM) iteration on the form

    minimize    0.5 x'Px + c'x
    subject to  l <= A x <= u

with equality rows encoded as l = u.  Each pass solves a quasi-definite
KKT system (factored once per penalty value), projects onto the
constraint interval with over-relaxation, and checks unscaled residuals.
Diagonal (Ruiz) equilibration handles the wide coefficient spread of the
hydraulic constraints; the penalty is re-tuned from the residual ratio
every 25 iterations.  Divergence directions of the iterates double as
infeasibility certificates, and a terminal KKT "polish" re-solves on the
detected active set to push residuals near machine precision.

A dense active-set solver over the same problem type serves as the test
oracle and as a rescue path when the splitting iteration hits its cap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


@dataclass
class QpProblem:
    """min 0.5 x'Px + c'x  s.t.  A_eq x = b_eq,  A_in x <= b_in.

    P is symmetrized on construction; dimensions are checked eagerly so
    assembly bugs surface with the offending block named.
    """

    p: sp.csc_matrix
    c: np.ndarray
    a_eq: sp.csc_matrix
    b_eq: np.ndarray
    a_in: sp.csc_matrix
    b_in: np.ndarray
    names: dict[int, str] = field(default_factory=dict)  # variable index -> label

    def __post_init__(self) -> None:
        self.p = sp.csc_matrix(self.p)
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        if self.p.shape != (n, n):
            raise ValueError(f"P is {self.p.shape}, expected ({n}, {n})")
        self.p = ((self.p + self.p.T) * 0.5).tocsc()
        self.a_eq = sp.csc_matrix(self.a_eq) if self.a_eq is not None else sp.csc_matrix((0, n))
        self.a_in = sp.csc_matrix(self.a_in) if self.a_in is not None else sp.csc_matrix((0, n))
        self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        self.b_in = np.asarray(self.b_in, dtype=float).ravel()
        if self.a_eq.shape != (self.b_eq.size, n):
            raise ValueError(f"A_eq is {self.a_eq.shape}, expected ({self.b_eq.size}, {n})")
        if self.a_in.shape != (self.b_in.size, n):
            raise ValueError(f"A_in is {self.a_in.shape}, expected ({self.b_in.size}, {n})")

    @property
    def n(self) -> int:
        return self.c.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.p @ x) + self.c @ x)


@dataclass
class QpTolerances:
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    eps_infeas: float = 1e-9
    max_iter: int = 20000
    check_every: int = 25
    sigma: float = 1e-6
    alpha: float = 1.6
    rho0: float = 0.1
    polish: bool = True
    scaling_iters: int = 10


@dataclass
class Residuals:
    primal: float
    dual: float
    gap: float


OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"


@dataclass
class QpSolution:
    x: np.ndarray
    y_eq: np.ndarray
    z_in: np.ndarray
    status: str
    residuals: Residuals
    iterations: int
    objective: float
    detail: str = ""
    certificate: np.ndarray | None = None


def solve_qp(
    prob: QpProblem,
    tol: QpTolerances | None = None,
    warm: tuple[np.ndarray, np.ndarray] | None = None,
) -> QpSolution:
    """Solve with the ADMM iteration; certify or rescue before returning.

    ``warm`` optionally carries (x, y) from a structurally identical solve
    (receding-horizon reuse).
    """
    tol = tol or QpTolerances()
    n = prob.n
    m_eq, m_in = prob.b_eq.size, prob.b_in.size
    m = m_eq + m_in
    a = sp.vstack([prob.a_eq, prob.a_in]).tocsc() if m else sp.csc_matrix((0, n))
    lb = np.concatenate([prob.b_eq, np.full(m_in, -np.inf)])
    ub = np.concatenate([prob.b_eq, prob.b_in])

    if m == 0:
        return _solve_unconstrained(prob, tol)

    # -- Ruiz equilibration ------------------------------------------
    d = np.ones(n)
    e = np.ones(m)
    gamma = 1.0
    p_s, a_s, c_s = prob.p, a, prob.c.copy()
    for _ in range(tol.scaling_iters):
        col_p = _col_inf_norms(p_s)
        col_a_by_x = _col_inf_norms(a_s)
        row_a = _col_inf_norms(sp.csc_matrix(a_s.T))
        nx = np.sqrt(np.clip(np.maximum(col_p, col_a_by_x), 1e-10, 1e10))
        nz = np.sqrt(np.clip(row_a, 1e-10, 1e10))
        dx = 1.0 / nx
        ez = 1.0 / nz
        d *= dx
        e *= ez
        p_s = _scale_sym(prob.p, d) * gamma
        a_s = _scale_lr(a, e, d)
        c_s = gamma * d * prob.c
        # cost scaling keeps the gradient O(1)
        g = max(np.mean(_col_inf_norms(p_s)), np.linalg.norm(c_s, np.inf), 1e-8)
        gamma_step = 1.0 / max(g, 1e-8)
        gamma *= gamma_step
        p_s = p_s * gamma_step
        c_s = c_s * gamma_step
    lb_s = e * lb
    ub_s = e * ub
    eq_rows = np.arange(m) < m_eq

    # -- iteration ----------------------------------------------------
    rho_bar = tol.rho0
    rho = np.where(eq_rows, rho_bar * 1e3, rho_bar)
    factor = _KktFactor(p_s, a_s, tol.sigma, rho)

    if warm is not None:
        x = warm[0] / d
        y = (e > 0) * (warm[1] * gamma / e)
        z = a_s @ x
    else:
        x = np.zeros(n)
        y = np.zeros(m)
        z = np.zeros(m)

    status = MAX_ITER
    detail = ""
    certificate = None
    iterations = tol.max_iter
    for it in range(1, tol.max_iter + 1):
        x_prev, z_prev, y_prev = x, z, y
        rhs = np.concatenate([tol.sigma * x - c_s, z - y / rho])
        sol = factor.solve(rhs)
        x_t, nu = sol[:n], sol[n:]
        z_t = z + (nu - y) / rho
        x = tol.alpha * x_t + (1 - tol.alpha) * x
        z_raw = tol.alpha * z_t + (1 - tol.alpha) * z + y / rho
        z = np.clip(z_raw, lb_s, ub_s)
        y = y + rho * (tol.alpha * z_t + (1 - tol.alpha) * z_prev - z)

        if it % tol.check_every:
            continue

        x_u = d * x
        z_u = z / e
        y_u = e * y / gamma
        r_prim, r_dual, e_prim, e_dual = _residuals(prob, a, x_u, z_u, y_u, tol)
        if r_prim <= e_prim and r_dual <= e_dual:
            status = OPTIMAL
            iterations = it
            break

        dy = y - y_prev
        if _primal_infeasible(a_s, lb_s, ub_s, dy, tol.eps_infeas):
            status = INFEASIBLE
            detail = "primal infeasibility certificate from the dual divergence direction"
            certificate = e * dy
            iterations = it
            break
        dx = x - x_prev
        if _dual_infeasible(p_s, a_s, c_s, lb_s, ub_s, eq_rows, dx, tol.eps_infeas):
            status = INFEASIBLE
            detail = "dual infeasibility certificate (objective unbounded below)"
            certificate = d * dx
            iterations = it
            break

        # adaptive penalty from the scaled residual ratio
        rs = _scaled_residual_ratio(p_s, a_s, c_s, x, z, y)
        if rs > 5.0 or rs < 0.2:
            rho_bar = float(np.clip(rho_bar * np.sqrt(rs), 1e-6, 1e6))
            rho = np.where(eq_rows, rho_bar * 1e3, rho_bar)
            factor = _KktFactor(p_s, a_s, tol.sigma, rho)

    x_u = d * x
    y_u = e * y / gamma
    z_u = z / e

    if status == MAX_ITER and prob.n <= 500:
        rescue = solve_qp_dense(prob)
        if rescue.status == OPTIMAL:
            rescue.detail = "dense KKT rescue after splitting hit the iteration cap"
            return rescue

    if status == OPTIMAL and tol.polish:
        polished = _polish(prob, a, lb, ub, x_u, y_u, tol)
        if polished is not None:
            x_u, y_full = polished
            y_u = y_full

    res = Residuals(*_kkt_residual_values(prob, x_u, y_u[:m_eq], np.maximum(y_u[m_eq:], 0.0)))
    return QpSolution(
        x=x_u,
        y_eq=y_u[:m_eq],
        z_in=np.maximum(y_u[m_eq:], 0.0),
        status=status,
        residuals=res,
        iterations=iterations,
        objective=prob.objective(x_u),
        detail=detail,
        certificate=certificate,
    )


def _solve_unconstrained(prob: QpProblem, tol: QpTolerances) -> QpSolution:
    reg = (prob.p + tol.sigma * sp.eye(prob.n, format="csc")).tocsc()
    lu = spla.splu(reg)
    x = lu.solve(-prob.c)
    for _ in range(3):  # refine against the unregularized gradient
        x = x - lu.solve(prob.p @ x + prob.c)
    grad = prob.p @ x + prob.c
    status = OPTIMAL if np.linalg.norm(grad, np.inf) <= max(tol.eps_abs, 1e-9) else INFEASIBLE
    res = Residuals(0.0, float(np.linalg.norm(grad, np.inf)), 0.0)
    return QpSolution(
        x=x,
        y_eq=np.zeros(0),
        z_in=np.zeros(0),
        status=status,
        residuals=res,
        iterations=1,
        objective=prob.objective(x),
        detail="" if status == OPTIMAL else "unbounded direction in unconstrained problem",
    )


# -- pieces -----------------------------------------------------------


def _col_inf_norms(mat: sp.csc_matrix) -> np.ndarray:
    mat = sp.csc_matrix(mat)
    out = np.zeros(mat.shape[1])
    absdata = np.abs(mat.data)
    for j in range(mat.shape[1]):
        lo, hi = mat.indptr[j], mat.indptr[j + 1]
        if hi > lo:
            out[j] = absdata[lo:hi].max()
    return out


def _scale_sym(p: sp.csc_matrix, d: np.ndarray) -> sp.csc_matrix:
    dd = sp.diags(d)
    return (dd @ p @ dd).tocsc()


def _scale_lr(a: sp.csc_matrix, e: np.ndarray, d: np.ndarray) -> sp.csc_matrix:
    return (sp.diags(e) @ a @ sp.diags(d)).tocsc()


class _KktFactor:
    def __init__(self, p: sp.csc_matrix, a: sp.csc_matrix, sigma: float, rho: np.ndarray):
        n, m = p.shape[0], a.shape[0]
        kkt = sp.bmat(
            [
                [p + sigma * sp.eye(n), a.T],
                [a, -sp.diags(1.0 / rho)],
            ],
            format="csc",
        )
        self.lu = spla.splu(kkt)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self.lu.solve(rhs)


def _residuals(prob, a, x, z, y, tol) -> tuple[float, float, float, float]:
    ax = a @ x if a.shape[0] else np.zeros(0)
    r_prim = float(np.linalg.norm(ax - z, np.inf)) if z.size else 0.0
    px = prob.p @ x
    aty = a.T @ y if a.shape[0] else np.zeros(prob.n)
    r_dual = float(np.linalg.norm(px + prob.c + aty, np.inf))
    e_prim = tol.eps_abs + tol.eps_rel * max(
        np.linalg.norm(ax, np.inf) if ax.size else 0.0,
        np.linalg.norm(z, np.inf) if z.size else 0.0,
    )
    e_dual = tol.eps_abs + tol.eps_rel * max(
        np.linalg.norm(px, np.inf),
        np.linalg.norm(aty, np.inf),
        np.linalg.norm(prob.c, np.inf),
    )
    return r_prim, r_dual, e_prim, e_dual


def _scaled_residual_ratio(p, a, c, x, z, y) -> float:
    ax = a @ x
    r_p = np.linalg.norm(ax - z, np.inf)
    den_p = max(np.linalg.norm(ax, np.inf), np.linalg.norm(z, np.inf), 1e-10)
    r_d = np.linalg.norm(p @ x + c + a.T @ y, np.inf)
    den_d = max(
        np.linalg.norm(p @ x, np.inf),
        np.linalg.norm(a.T @ y, np.inf),
        np.linalg.norm(c, np.inf),
        1e-10,
    )
    return float((r_p / den_p) / max(r_d / den_d, 1e-12))


def _primal_infeasible(a, lb, ub, dy, eps) -> bool:
    nrm = np.linalg.norm(dy, np.inf)
    if nrm < 1e-14:
        return False
    v = dy / nrm
    if np.linalg.norm(a.T @ v, np.inf) > eps:
        return False
    pos, neg = np.maximum(v, 0.0), np.minimum(v, 0.0)
    # rows with infinite bound cannot push in that direction
    if np.any(neg[~np.isfinite(lb)] < -eps):
        return False
    support = float(ub[np.isfinite(ub)] @ pos[np.isfinite(ub)])
    support += float(lb[np.isfinite(lb)] @ neg[np.isfinite(lb)])
    return support < -eps


def _dual_infeasible(p, a, c, lb, ub, eq_rows, dx, eps) -> bool:
    nrm = np.linalg.norm(dx, np.inf)
    if nrm < 1e-14:
        return False
    v = dx / nrm
    if np.linalg.norm(p @ v, np.inf) > eps or c @ v > -eps:
        return False
    av = a @ v
    ok_up = av <= eps
    ok_dn = av >= -eps
    fin_up = np.isfinite(ub)
    fin_dn = np.isfinite(lb)
    if np.any(fin_up & ~ok_up) or np.any(fin_dn & ~ok_dn):
        return False
    return True


def _kkt_residual_values(prob, x, y_eq, z_in) -> tuple[float, float, float]:
    r_stat = prob.p @ x + prob.c
    if y_eq.size:
        r_stat = r_stat + prob.a_eq.T @ y_eq
    if z_in.size:
        r_stat = r_stat + prob.a_in.T @ z_in
    r_eq = prob.a_eq @ x - prob.b_eq if y_eq.size else np.zeros(0)
    s_in = prob.a_in @ x - prob.b_in if z_in.size else np.zeros(0)
    primal = max(
        float(np.linalg.norm(r_eq, np.inf)) if r_eq.size else 0.0,
        float(np.max(s_in)) if s_in.size else 0.0,
        0.0,
    )
    dual = float(np.linalg.norm(r_stat, np.inf))
    gap = float(np.abs(z_in @ s_in)) if s_in.size else 0.0
    return primal, dual, gap


def _polish(prob, a, lb, ub, x, y, tol) -> tuple[np.ndarray, np.ndarray] | None:
    """Re-solve the KKT system on the detected active set with light
    regularization and refinement; keep the result only if it tightens
    every residual."""
    m_eq = prob.b_eq.size
    ax = a @ x if a.shape[0] else np.zeros(0)
    act = np.zeros(a.shape[0], dtype=bool)
    act[:m_eq] = True
    scale = 1.0 + np.abs(ub)
    ineq = slice(m_eq, a.shape[0])
    act[ineq] = (y[ineq] > 1e-10) | (ax[ineq] >= ub[ineq] - 1e-7 * scale[ineq])
    rows = np.flatnonzero(act)
    if rows.size == 0:
        return None
    a_act = a[rows]
    n = prob.n
    delta = 1e-9
    kkt = sp.bmat(
        [[prob.p + delta * sp.eye(n), a_act.T], [a_act, -delta * sp.eye(rows.size)]],
        format="csc",
    )
    rhs = np.concatenate([-prob.c, ub[rows]])
    try:
        lu = spla.splu(kkt)
    except RuntimeError:
        return None
    sol = lu.solve(rhs)
    for _ in range(3):  # refine against the unregularized KKT system
        unreg = np.concatenate(
            [prob.p @ sol[:n] + a_act.T @ sol[n:] + prob.c, a_act @ sol[:n] - ub[rows]]
        )
        sol = sol - lu.solve(unreg)
    x_p = sol[:n]
    y_full = np.zeros(a.shape[0])
    y_full[rows] = sol[n:]
    y_full[ineq] = np.maximum(y_full[ineq], 0.0)
    old = _kkt_residual_values(prob, x, y[:m_eq], np.maximum(y[ineq], 0.0))
    new = _kkt_residual_values(prob, x_p, y_full[:m_eq], y_full[ineq])
    if max(new[0], new[1]) <= max(old[0], old[1]) and new[0] <= max(old[0], 1e-9):
        return x_p, y_full
    return None


# ---------------------------------------------------------------------------
# Dense active-set oracle
# ---------------------------------------------------------------------------


def solve_qp_dense(prob: QpProblem, max_changes: int | None = None) -> QpSolution:
    """Direct KKT solve with a primal-dual working set (dense).

    Intended for desk-scale problems (few hundred variables) as an
    independent check of the splitting solver and as its rescue path.
    """
    n = prob.n
    if n > 2000:
        raise ValueError("dense oracle is limited to small problems")
    p = prob.p.toarray() + 1e-12 * np.eye(n)
    a_eq = prob.a_eq.toarray()
    a_in = prob.a_in.toarray()
    m_in = prob.b_in.size
    max_changes = max_changes or (3 * (m_in + prob.b_eq.size) + 50)

    working: list[int] = []
    x = np.zeros(n)
    y_eq = np.zeros(prob.b_eq.size)
    z = np.zeros(m_in)
    feas_tol = 1e-9

    for _ in range(max_changes):
        rows = [a_eq] + [a_in[k : k + 1] for k in working]
        c_mat = np.vstack(rows) if rows else np.zeros((0, n))
        rhs_c = np.concatenate([prob.b_eq, prob.b_in[working]])
        k = c_mat.shape[0]
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = p
        kkt[:n, n:] = c_mat.T
        kkt[n:, :n] = c_mat
        rhs = np.concatenate([-prob.c, rhs_c])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        x = sol[:n]
        mult = sol[n:]
        y_eq = mult[: prob.b_eq.size]
        mult_in = mult[prob.b_eq.size :]

        if working and mult_in.size and np.min(mult_in) < -feas_tol:
            drop = int(np.argmin(mult_in))
            working.pop(drop)
            continue
        slack = a_in @ x - prob.b_in if m_in else np.zeros(0)
        if prob.b_eq.size and np.linalg.norm(a_eq @ x - prob.b_eq, np.inf) > 1e-6:
            return QpSolution(
                x=x,
                y_eq=y_eq,
                z_in=np.zeros(m_in),
                status=INFEASIBLE,
                residuals=Residuals(*_kkt_residual_values(prob, x, y_eq, np.zeros(m_in))),
                iterations=0,
                objective=prob.objective(x),
                detail="inconsistent equality constraints",
            )
        candidates = [k for k in range(m_in) if slack[k] > feas_tol * (1 + abs(prob.b_in[k])) and k not in working]
        if not candidates:
            z = np.zeros(m_in)
            for idx, k_row in enumerate(working):
                z[k_row] = max(mult_in[idx], 0.0)
            res = Residuals(*_kkt_residual_values(prob, x, y_eq, z))
            return QpSolution(
                x=x,
                y_eq=y_eq,
                z_in=z,
                status=OPTIMAL,
                residuals=res,
                iterations=0,
                objective=prob.objective(x),
            )
        working.append(max(candidates, key=lambda k_row: slack[k_row]))

    res = Residuals(*_kkt_residual_values(prob, x, y_eq, z))
    return QpSolution(
        x=x,
        y_eq=y_eq,
        z_in=z,
        status=MAX_ITER,
        residuals=res,
        iterations=max_changes,
        objective=prob.objective(x),
        detail="working-set iteration cap reached",
    )


# ---------------------------------------------------------------------------
# KKT certification
# ---------------------------------------------------------------------------


@dataclass
class KktReport:
    stationarity: float
    primal_eq: float
    primal_in: float
    dual_feas: float
    comp_slack: float
    worst: str
    passed: bool

    def __str__(self) -> str:
        lines = [
            f"stationarity    {self.stationarity:.3e}",
            f"primal equality {self.primal_eq:.3e}",
            f"primal inequal. {self.primal_in:.3e}",
            f"dual feas.      {self.dual_feas:.3e}",
            f"compl. slack    {self.comp_slack:.3e}",
            f"worst           {self.worst}",
            f"passed          {self.passed}",
        ]
        return "\n".join(lines)


def check_kkt(prob: QpProblem, sol: QpSolution, tol: float = 1e-7) -> KktReport:
    """Verify stationarity, feasibility, dual signs and complementary
    slackness of a claimed-optimal solution."""
    x, y, z = sol.x, sol.y_eq, sol.z_in
    r_stat = prob.p @ x + prob.c
    if y.size:
        r_stat = r_stat + prob.a_eq.T @ y
    if z.size:
        r_stat = r_stat + prob.a_in.T @ z
    stat = float(np.linalg.norm(r_stat, np.inf))
    p_eq = float(np.linalg.norm(prob.a_eq @ x - prob.b_eq, np.inf)) if y.size else 0.0
    slack = prob.a_in @ x - prob.b_in if z.size else np.zeros(0)
    p_in = float(np.max(slack)) if slack.size else 0.0
    d_feas = float(-np.min(z)) if z.size else 0.0
    comp = float(np.max(np.abs(z * slack))) if slack.size else 0.0

    checks = {
        "stationarity": stat,
        "primal equality": p_eq,
        "primal inequality": max(p_in, 0.0),
        "dual feasibility": max(d_feas, 0.0),
        "complementary slackness": comp,
    }
    worst_name = max(checks, key=lambda k: checks[k])
    scale = 1.0 + float(np.linalg.norm(prob.c, np.inf))
    passed = all(v <= tol * scale for v in checks.values())
    if stat == checks[worst_name] and prob.names:
        j = int(np.argmax(np.abs(r_stat)))
        worst_name += f" at {prob.names.get(j, f'x[{j}]')}"
    return KktReport(
        stationarity=stat,
        primal_eq=p_eq,
        primal_in=max(p_in, 0.0),
        dual_feas=max(d_feas, 0.0),
        comp_slack=comp,
        worst=worst_name,
        passed=passed,
    )


# ---------------------------------------------------------------------------
# Problem dump (sparse text interchange)
# ---------------------------------------------------------------------------


def dump_problem(prob: QpProblem, path) -> None:
    """Write the problem in a line-based triplet format (documented in the
    README) for cross-checks against external solvers."""
    lines = [f"OWF-QP 1 n {prob.n} m_eq {prob.b_eq.size} m_in {prob.b_in.size}"]

    def emit(tag: str, mat: sp.csc_matrix) -> None:
        coo = mat.tocoo()
        for i, j, v in zip(coo.row, coo.col, coo.data):
            lines.append(f"{tag} {i} {j} {v!r}")

    emit("P", prob.p)
    for j, v in enumerate(prob.c):
        if v != 0.0:
            lines.append(f"c {j} {v!r}")
    emit("Aeq", prob.a_eq)
    for i, v in enumerate(prob.b_eq):
        lines.append(f"beq {i} {v!r}")
    emit("Ain", prob.a_in)
    for i, v in enumerate(prob.b_in):
        lines.append(f"bin {i} {v!r}")
    lines.append("END")
    from pathlib import Path

    Path(path).write_text("\n".join(lines) + "\n")


def load_problem(path) -> QpProblem:
    from pathlib import Path

    lines = Path(path).read_text().strip().splitlines()
    head = lines[0].split()
    if head[:2] != ["OWF-QP", "1"]:
        raise ValueError("not an OWF-QP v1 dump")
    n, m_eq, m_in = int(head[3]), int(head[5]), int(head[7])
    trip: dict[str, list[tuple[int, int, float]]] = {"P": [], "Aeq": [], "Ain": []}
    c = np.zeros(n)
    b_eq = np.zeros(m_eq)
    b_in = np.zeros(m_in)
    for line in lines[1:]:
        if line == "END":
            break
        parts = line.split()
        tag = parts[0]
        if tag in trip:
            trip[tag].append((int(parts[1]), int(parts[2]), float(parts[3])))
        elif tag == "c":
            c[int(parts[1])] = float(parts[2])
        elif tag == "beq":
            b_eq[int(parts[1])] = float(parts[2])
        elif tag == "bin":
            b_in[int(parts[1])] = float(parts[2])
        else:
            raise ValueError(f"unknown tag {tag!r}")

    def build(tag: str, shape) -> sp.csc_matrix:
        if trip[tag]:
            i, j, v = zip(*trip[tag])
            return sp.csc_matrix((v, (i, j)), shape=shape)
        return sp.csc_matrix(shape)

    return QpProblem(
        p=build("P", (n, n)),
        c=c,
        a_eq=build("Aeq", (m_eq, n)),
        b_eq=b_eq,
        a_in=build("Ain", (m_in, n)),
        b_in=b_in,
    )
