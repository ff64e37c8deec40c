"""Network flow estimation: assemble the path-flow box QP and solve it with
an operator-splitting (ADMM) method, then recover OD and link flows and round
path flows to an integer trip table.

The QP minimizes, over path flows y >= 0,

    w * (1'Phi y - xt)^2  +  gamma * ||y - G Phi y||^2  +  rho * ||W (Omega y - zt)||^2

subject to box constraints on y, Phi y and Omega y. In canonical form this is
min 0.5 y'Py + q'y + const over l <= Ay <= u with A stacking [I; Phi; Omega].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .clustering import AssignmentMap
from .netmodel import IncidenceSet

logger = logging.getLogger(__name__)


@dataclass
class FlowProblem:
    """Inputs of one TOD interval's flow estimation QP.

    weight_diag holds the diagonal of the link confidence matrix W; z_tilde
    must be zero wherever weight_diag is zero.
    """

    incidence: IncidenceSet
    G: sp.spmatrix                  # (n_paths x n_od) assignment shares
    weight_diag: np.ndarray         # (n_links,)
    x_tilde: float                  # full-scale total trips for the interval
    z_tilde: np.ndarray             # (n_links,) zero-padded link flow prior
    gamma: float = 1.0
    rho: float = 1.0
    alpha: np.ndarray | None = None  # OD upper bounds, default x_tilde each
    beta: np.ndarray | None = None   # path upper bounds, default alpha of own OD
    capacity: np.ndarray | None = None  # link upper bounds
    total_weight: float = 1.0

    def resolved_bounds(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        inc = self.incidence
        alpha = self.alpha if self.alpha is not None else np.full(inc.n_od, float(self.x_tilde))
        if self.beta is not None:
            beta = self.beta
        else:
            # each path inherits its OD pair's bound
            od_of_path = np.asarray(inc.phi.argmax(axis=0)).ravel()
            beta = alpha[od_of_path]
        if self.capacity is None:
            raise ValueError("capacity bounds are required (resolve them from the network)")
        return np.asarray(alpha, float), np.asarray(beta, float), np.asarray(self.capacity, float)

    def validate(self) -> None:
        inc = self.incidence
        n, m, e = inc.n_od, inc.n_paths, inc.n_links
        if self.G.shape != (m, n):
            raise ValueError(f"G shape {self.G.shape} != ({m}, {n})")
        if self.weight_diag.shape != (e,):
            raise ValueError("weight_diag length mismatch")
        if self.z_tilde.shape != (e,):
            raise ValueError("z_tilde length mismatch")
        if np.any(self.weight_diag < 0):
            raise ValueError("link weights must be >= 0")
        if np.any(self.z_tilde[self.weight_diag == 0] != 0):
            raise ValueError("z_tilde must be zero on unmeasured links")
        if self.gamma < 0 or self.rho < 0 or self.total_weight < 0:
            raise ValueError("term weights must be >= 0")
        if self.x_tilde < 0:
            raise ValueError("x_tilde must be >= 0")
        alpha, beta, cap = self.resolved_bounds()
        for name, v, size in (("alpha", alpha, n), ("beta", beta, m), ("capacity", cap, e)):
            if v.shape != (size,):
                raise ValueError(f"{name} length mismatch")
            if np.any(v < 0):
                raise ValueError(f"{name} must be >= 0")


@dataclass
class CanonicalQP:
    P: np.ndarray               # dense (n x n), symmetric PSD
    q: np.ndarray
    A: sp.csc_matrix            # (m x n)
    l: np.ndarray
    u: np.ndarray
    const: float = 0.0
    # structure of the stacked constraint rows, when built from a FlowProblem
    incidence: IncidenceSet | None = None
    n_paths: int = 0
    n_od: int = 0
    n_links: int = 0

    def objective(self, y: np.ndarray) -> float:
        return float(0.5 * y @ self.P @ y + self.q @ y + self.const)


@dataclass
class ADMMSettings:
    sigma: float = 0.1            # splitting penalty (step), adapted by residual balancing
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 20000
    scaling_iters: int = 10       # Ruiz equilibration passes
    polish: bool = True
    check_interval: int = 25
    adapt_interval: int = 50
    relaxation: float = 1.6
    reg: float = 1e-6             # KKT regularization on the decision block

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.eps_abs <= 0 or self.eps_rel <= 0:
            raise ValueError("tolerances must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class FlowSolution:
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    objective: float
    primal_residual: float
    dual_residual: float
    status: str                   # solved | max_iter | infeasible
    iterations: int
    duals: np.ndarray | None = None
    path_upper: np.ndarray | None = None
    polished: bool = False
    sigma_final: float = 0.0
    residual_history: list[tuple[int, float, float]] = field(default_factory=list)


def evaluate_objective(problem: FlowProblem, y: np.ndarray) -> float:
    """Direct evaluation of the three error terms at y."""
    inc = problem.incidence
    total = float(np.asarray(inc.phi.sum(axis=0)).ravel() @ y)
    t1 = problem.total_weight * (total - problem.x_tilde) ** 2
    resid = y - problem.G @ (inc.phi @ y)
    t2 = problem.gamma * float(resid @ resid)
    link_err = problem.weight_diag * (inc.omega @ y - problem.z_tilde)
    t3 = problem.rho * float(link_err @ link_err)
    return t1 + t2 + t3


def build_qp(problem: FlowProblem) -> CanonicalQP:
    """Assemble the canonical box QP for one TOD interval."""
    problem.validate()
    inc = problem.incidence
    n, m, e = inc.n_od, inc.n_paths, inc.n_links
    phi = inc.phi.tocsr()
    omega = inc.omega.tocsr()
    w = np.asarray(problem.weight_diag, float)
    zt = np.asarray(problem.z_tilde, float)

    s = np.asarray(phi.sum(axis=0)).ravel()               # row vector 1'Phi
    t1 = 2.0 * problem.total_weight * np.outer(s, s)
    gphi = (problem.G @ phi).tocsr()
    b = (sp.identity(m, format="csr") - gphi)
    t2 = 2.0 * problem.gamma * (b.T @ b).toarray()
    w_omega = omega.multiply(w[:, None]).tocsr()
    t3 = 2.0 * problem.rho * (w_omega.T @ w_omega).toarray()
    P = t1 + t2 + t3
    P = 0.5 * (P + P.T)

    q = (-2.0 * problem.total_weight * problem.x_tilde * s
         - 2.0 * problem.rho * np.asarray(w_omega.T @ (w * zt)).ravel())
    const = (problem.total_weight * problem.x_tilde ** 2
             + problem.rho * float((w * zt) @ (w * zt)))

    alpha, beta, cap = problem.resolved_bounds()
    A = sp.vstack([sp.identity(m, format="csr"), phi, omega]).tocsc()
    l = np.zeros(m + n + e)
    u = np.concatenate([beta, alpha, cap])
    return CanonicalQP(P=P, q=q, A=A, l=l, u=u, const=const,
                       incidence=inc, n_paths=m, n_od=n, n_links=e)


# ---------------------------------------------------------------------------
# Scaling

def _ruiz_equilibrate(P, q, A, l, u, iters):
    """Modified Ruiz equilibration of the joint [P A'; A 0] matrix plus cost
    normalization. Returns scaled data and the diagonal scalers (D, E, c)."""
    n, m = P.shape[0], A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    Ps, qs, As = P.copy(), q.copy(), A.copy().tolil().tocsr()
    for _ in range(iters):
        col_norm_p = np.max(np.abs(Ps), axis=0) if n else np.zeros(0)
        col_norm_a = np.asarray(abs(As).max(axis=0).todense()).ravel() if m else np.zeros(n)
        delta_d = np.maximum(col_norm_p, col_norm_a)
        delta_d[delta_d < 1e-12] = 1.0
        delta_d = 1.0 / np.sqrt(delta_d)
        row_norm_a = np.asarray(abs(As).max(axis=1).todense()).ravel() if m else np.zeros(0)
        delta_e = row_norm_a.copy()
        delta_e[delta_e < 1e-12] = 1.0
        delta_e = 1.0 / np.sqrt(delta_e)

        Ps = Ps * delta_d[:, None] * delta_d[None, :]
        qs = qs * delta_d
        As = sp.diags(delta_e) @ As @ sp.diags(delta_d)
        d *= delta_d
        e *= delta_e

        # cost scaling keeps the objective block balanced with the constraints
        p_cols = np.mean(np.max(np.abs(Ps), axis=0)) if n else 0.0
        scale = max(p_cols, np.max(np.abs(qs)) if n else 0.0)
        if scale > 1e-12:
            gamma_c = 1.0 / scale
            Ps *= gamma_c
            qs *= gamma_c
            c *= gamma_c
    ls = e * l
    us = e * u
    return Ps, qs, As.tocsc(), ls, us, d, e, c


def _factor_kkt(Ps, As, reg, sigma):
    n, m = Ps.shape[0], As.shape[0]
    K = sp.bmat([
        [sp.csc_matrix(Ps + reg * np.eye(n)), As.T],
        [As, -sp.identity(m, format="csc") / sigma],
    ], format="csc")
    return spla.splu(K)


def solve_admm(qp: CanonicalQP, settings: ADMMSettings | None = None) -> FlowSolution:
    """Operator-splitting solve of l <= Ay <= u box QPs.

    Alternates a regularized KKT solve with projection onto the constraint
    box, in Ruiz-equilibrated coordinates, with residual-balancing penalty
    adaptation. An optional polish step solves the KKT system restricted to
    the detected active set and keeps the result when it is feasible and at
    least as good.
    """
    settings = settings or ADMMSettings()
    P, q, A, l, u = qp.P, qp.q, qp.A, qp.l, qp.u
    n, m = P.shape[0], A.shape[0]

    if np.any(l > u):
        return _finish(qp, np.zeros(n), np.zeros(m), "infeasible", 0, np.inf, np.inf,
                       settings.sigma, False, [])

    Ps, qs, As, ls, us, D, E, c = _ruiz_equilibrate(P, q, A, l, u, settings.scaling_iters)

    sigma = settings.sigma
    solver = _factor_kkt(Ps, As, settings.reg, sigma)

    x = np.zeros(n)
    z = np.zeros(m)
    yd = np.zeros(m)
    alpha = settings.relaxation
    r_prim = r_dual = np.inf
    history: list[tuple[int, float, float]] = []

    def iterate(k_start: int, k_end: int, eps_abs: float, eps_rel: float) -> tuple[str, int]:
        nonlocal x, z, yd, sigma, solver, r_prim, r_dual
        for k in range(k_start, k_end + 1):
            rhs = np.concatenate([settings.reg * x - qs, z - yd / sigma])
            sol = solver.solve(rhs)
            x_tilde = sol[:n]
            nu = sol[n:]
            z_tilde = z + (nu - yd) / sigma
            x = alpha * x_tilde + (1.0 - alpha) * x
            z_relaxed = alpha * z_tilde + (1.0 - alpha) * z
            z_new = np.clip(z_relaxed + yd / sigma, ls, us)
            yd = yd + sigma * (z_relaxed - z_new)
            z = z_new

            if k % settings.check_interval == 0 or k == k_end:
                x_us = D * x
                z_us = z / E
                y_us = (E * yd) / c
                Ax = A @ x_us
                Px = P @ x_us
                Aty = A.T @ y_us
                r_prim = float(np.max(np.abs(Ax - z_us))) if m else 0.0
                r_dual = float(np.max(np.abs(Px + q + Aty)))
                history.append((k, r_prim, r_dual))
                prim_scale = max(_inf(Ax), _inf(z_us))
                dual_scale = max(_inf(Px), _inf(Aty), _inf(q))
                if r_prim <= eps_abs + eps_rel * prim_scale and \
                        r_dual <= eps_abs + eps_rel * dual_scale:
                    return "solved", k
                if k % settings.adapt_interval == 0:
                    num = r_prim / max(prim_scale, 1e-12)
                    den = r_dual / max(dual_scale, 1e-12)
                    ratio = np.sqrt(num / max(den, 1e-18))
                    if ratio > 5.0 or ratio < 0.2:
                        sigma = float(np.clip(sigma * ratio, 1e-6, 1e6))
                        solver = _factor_kkt(Ps, As, settings.reg, sigma)
        return "max_iter", k_end

    status, iters = iterate(1, settings.max_iter, settings.eps_abs, settings.eps_rel)

    def unscaled() -> tuple[np.ndarray, np.ndarray]:
        return D * x, (E * yd) / c

    y_final, y_dual = unscaled()
    polished = False
    if settings.polish and status == "solved":
        pol = _polish(qp, y_final, y_dual)
        if pol is None and iters < settings.max_iter:
            # drive the iterate closer before re-detecting the active set
            _, iters = iterate(iters + 1, settings.max_iter,
                               settings.eps_abs * 1e-3, settings.eps_rel * 1e-3)
            y_final, y_dual = unscaled()
            pol = _polish(qp, y_final, y_dual)
        if pol is not None:
            y_final, y_dual = pol
            polished = True
            Ax = A @ y_final
            r_prim = float(np.max(np.clip(qp.l - Ax, 0, None) + np.clip(Ax - qp.u, 0, None))) if m else 0.0
            r_dual = float(np.max(np.abs(P @ y_final + q + A.T @ y_dual)))

    return _finish(qp, y_final, y_dual, status, iters, r_prim, r_dual, sigma, polished, history)


def _inf(v) -> float:
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def _polish(qp: CanonicalQP, y: np.ndarray, duals: np.ndarray,
            delta: float = 1e-9, max_rounds: int = 15):
    """Active-set refinement of a converged iterate.

    Seeds the active set from the dual signs, then repairs it: a row whose
    multiplier has the wrong sign is released, a violated inactive row is
    pinned at the violated side. Returns a verified KKT point (y, duals), or
    None when the repair loop does not settle within its budget."""
    P, q, A, l, u = qp.P, qp.q, qp.A, qp.l, qp.u
    n, m = P.shape[0], A.shape[0]
    span = 1.0 + np.abs(u) + np.abs(l)
    feas_tol = 1e-7 * span

    # side per row: 0 inactive, -1 pinned at lower, +1 pinned at upper
    side = np.zeros(m, dtype=int)
    side[duals < 0] = -1
    side[duals > 0] = +1

    for _ in range(max_rounds):
        act = np.flatnonzero(side != 0)
        na = len(act)
        b_act = np.where(side[act] < 0, l[act], u[act])
        if na:
            A_act = A[act, :]
            K = sp.bmat([
                [sp.csc_matrix(P + delta * np.eye(n)), A_act.T],
                [A_act, -delta * sp.identity(na, format="csc")],
            ], format="csc")
            K0 = sp.bmat([[sp.csc_matrix(P), A_act.T], [A_act, None]], format="csc")
        else:
            K = sp.csc_matrix(P + delta * np.eye(n))
            K0 = sp.csc_matrix(P)
        rhs = np.concatenate([-q, b_act])
        try:
            solver = spla.splu(K)
        except RuntimeError:
            return None
        sol = solver.solve(rhs)
        for _ in range(3):  # refinement against the unregularized system
            sol = sol + solver.solve(rhs - K0 @ sol)
        if not np.all(np.isfinite(sol)):
            return None
        y_pol = sol[:n]
        lam = sol[n:]

        lam_tol = 1e-8 * (1.0 + _inf(lam))
        sign_viol = np.where(side[act] < 0, lam, -lam)  # must be <= 0
        worst_sign = int(np.argmax(sign_viol)) if na else -1
        if na and sign_viol[worst_sign] > lam_tol:
            side[act[worst_sign]] = 0
            continue

        Axp = A @ y_pol
        viol_low = (l - Axp) / span
        viol_upp = (Axp - u) / span
        worst_low = int(np.argmax(viol_low))
        worst_upp = int(np.argmax(viol_upp))
        if max(viol_low[worst_low], viol_upp[worst_upp]) > 1e-7:
            if viol_low[worst_low] >= viol_upp[worst_upp]:
                side[worst_low] = -1
            else:
                side[worst_upp] = +1
            continue

        duals_pol = np.zeros(m)
        if na:
            duals_pol[act] = lam
        stat = P @ y_pol + q + A.T @ duals_pol
        if np.max(np.abs(stat)) > 1e-7 * (1.0 + _inf(q) + _inf(P @ y_pol)):
            return None
        return y_pol, duals_pol
    return None


def _finish(qp, y, duals, status, iters, r_prim, r_dual, sigma, polished, history) -> FlowSolution:
    if qp.incidence is not None:
        x, z = recover_flows(y, qp.incidence)
        beta = qp.u[:qp.n_paths]
    else:
        x = np.zeros(0)
        z = np.zeros(0)
        beta = qp.u[:len(y)] if len(qp.u) >= len(y) else None
    return FlowSolution(
        y=y, x=x, z=z, objective=qp.objective(y),
        primal_residual=r_prim, dual_residual=r_dual,
        status=status, iterations=iters, duals=duals,
        path_upper=beta, polished=polished, sigma_final=sigma,
        residual_history=history,
    )


def recover_flows(y: np.ndarray, incidence: IncidenceSet) -> tuple[np.ndarray, np.ndarray]:
    """OD and link flows implied by path flows: x = Phi y, z = Omega y."""
    x = np.asarray(incidence.phi @ y).ravel()
    z = np.asarray(incidence.omega @ y).ravel()
    return x, z


def round_path_flows(solution: FlowSolution) -> tuple[np.ndarray, float]:
    """Round path flows half-up to integers, clamp into [0, floor(beta)],
    and report the total-trips drift |sum(y_int) - sum(y)|."""
    if solution.status not in ("solved", "max_iter"):
        raise ValueError(f"cannot round flows from status {solution.status!r}")
    y = solution.y
    y_int = np.floor(y + 0.5)
    y_int = np.maximum(y_int, 0.0)
    if solution.path_upper is not None:
        y_int = np.minimum(y_int, np.floor(solution.path_upper))
    drift = float(abs(y_int.sum() - y.sum()))
    return y_int.astype(np.int64), drift


def solve_flow_problem(problem: FlowProblem, settings: ADMMSettings | None = None) -> FlowSolution:
    return solve_admm(build_qp(problem), settings)


def estimate_all_tods(problems: dict[int, FlowProblem],
                      settings: ADMMSettings | None = None
                      ) -> tuple[dict[int, FlowSolution], dict[int, dict]]:
    """Independent solves per TOD interval. Failures are reported per
    interval without aborting the others."""
    solutions: dict[int, FlowSolution] = {}
    report: dict[int, dict] = {}
    for tod in sorted(problems):
        try:
            sol = solve_flow_problem(problems[tod], settings)
            solutions[tod] = sol
            report[tod] = {
                "status": sol.status,
                "objective": sol.objective,
                "iterations": sol.iterations,
                "primal_residual": sol.primal_residual,
                "dual_residual": sol.dual_residual,
                "total_flow": float(sol.x.sum()) if sol.x.size else 0.0,
            }
        except Exception as exc:  # isolate failures per interval
            logger.warning("flow estimation failed for interval %s: %s", tod, exc)
            report[tod] = {"status": "error", "error": str(exc)}
    return solutions, report


def problem_for_assignment(incidence: IncidenceSet, assignment: AssignmentMap, tod: int,
                           x_tilde: float, weight_diag: np.ndarray, z_tilde: np.ndarray,
                           capacity: np.ndarray, gamma: float = 1.0, rho: float = 1.0) -> FlowProblem:
    """Convenience constructor pulling one TOD's shares out of an AssignmentMap."""
    return FlowProblem(
        incidence=incidence, G=assignment.shares(tod), weight_diag=weight_diag,
        x_tilde=x_tilde, z_tilde=z_tilde, capacity=capacity, gamma=gamma, rho=rho,
    )
