"""Centralized reference solver used as ground truth on small instances.

The quadratic program is handed to an interior-point solver (Clarabel via
cvxpy) and the result is then polished by an active-set iteration on the
exact KKT system, which brings the solution to machine precision whenever
the active set is identified correctly. Nothing here shares code with the
distributed solver except the problem evaluation routines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import InfeasibleError
from .problem import ValleyFillingProblem


@dataclass
class ReferenceResult:
    C: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    objective: float
    kkt: dict
    polished: bool
    status: str = "optimal"
    info: dict = field(default_factory=dict)


def _build(prob: ValleyFillingProblem, extra_margin=None):
    s, T = prob.s, prob.T
    C = cp.Variable((s, T))
    load = prob.P_b + prob.p_max @ C
    # objective scaled to O(1) for the conic solver
    w = prob.load_weight
    scale = 1.0 / max(1.0, w * float(np.abs(prob.P_b).max() * np.abs(prob.p_max).max()))
    obj = 0.5 * w * cp.sum_squares(load)
    if prob.delta > 0:
        obj = obj + 0.5 * prob.delta * cp.sum_squares(C)
    for g in prob.goals:
        inner = sum(cp.multiply(g.weights[j], C[a]) for j, a in enumerate(g.agents)) - g.offset
        obj = obj + g.omega * cp.sum_squares(inner)
    cons = {
        "lower": C >= prob.lower,
        "upper": C <= prob.upper,
        "energy": cp.sum(cp.multiply(prob.coeff, C), axis=1) == prob.rhs,
    }
    if prob.n:
        cons["coupling"] = C.T @ prob.D.T >= prob.Y_b
    if prob.D_eq is not None:
        cons["balance"] = C.T @ prob.D_eq.T == prob.b_eq
    return C, cp.Problem(cp.Minimize(scale * obj), list(cons.values())), cons, scale


def feasibility_probe(prob: ValleyFillingProblem) -> float:
    """Largest uniform slack ``t`` with ``sum_i D_i c_i >= Y_b + t`` over local sets.

    A positive value certifies a Slater point for the coupling inequality.
    Returns ``-inf`` when the local sets or the equality coupling are
    infeasible, ``+inf`` when there is no inequality coupling.
    """
    s, T = prob.s, prob.T
    C = cp.Variable((s, T))
    t = cp.Variable()
    cons = [C >= prob.lower, C <= prob.upper, cp.sum(cp.multiply(prob.coeff, C), axis=1) == prob.rhs]
    if prob.D_eq is not None:
        cons.append(C.T @ prob.D_eq.T == prob.b_eq)
    if not prob.n:
        p = cp.Problem(cp.Minimize(0), cons)
        p.solve(solver=cp.CLARABEL)
        return np.inf if p.status in ("optimal", "optimal_inaccurate") else -np.inf
    yscale = max(1e-12, float(np.abs(prob.Y_b).max()))
    cons.append(C.T @ prob.D.T >= prob.Y_b + t)
    cons.append(t <= yscale)
    p = cp.Problem(cp.Maximize(t / yscale), cons)
    p.solve(solver=cp.CLARABEL)
    if p.status not in ("optimal", "optimal_inaccurate"):
        return -np.inf
    return float(t.value)


def kkt_residuals(prob: ValleyFillingProblem, C, mu, lam=None) -> dict:
    """KKT violation measures for ``(C, mu, lam)``.

    ``stationarity`` is the norm of ``C - Pi(C - grad L / L_F) `` scaled by
    ``L_F``: it vanishes exactly when every block ``c_i`` minimizes the
    Lagrangian over its local set. ``complementarity`` is
    ``max |mu * residual|`` over the coupling rows.
    """
    C = prob.check_profile(C)
    mu = prob.check_mu(mu)
    lam_arr = prob.check_lam(lam)
    L = prob.hessian_norm()
    grad = prob.lagrangian_grad(C, mu, lam_arr)
    step = C - prob.project(C - grad / L)
    res = prob.coupling_residual(C)
    gscale = max(1.0, float(np.abs(prob.objective_gradient(C)).max()))
    out = {
        "stationarity": float(L * np.linalg.norm(step)),
        "stationarity_rel": float(L * np.linalg.norm(step) / gscale),
        "box": float(max(0.0, np.max(prob.lower - C), np.max(C - prob.upper))),
        "energy": float(np.max(np.abs(np.sum(prob.coeff * C, axis=1) - prob.rhs))),
        "coupling": float(max(0.0, res.max())) if res.size else 0.0,
        "dual_sign": float(max(0.0, -mu.min())) if mu.size else 0.0,
        "complementarity": float(np.max(np.abs(mu * res))) if res.size else 0.0,
        "balance": float(np.abs(prob.balance_residual(C)).max()) if prob.n_eq else 0.0,
    }
    return out


def _polish(prob: ValleyFillingProblem, C0: np.ndarray, mu0: np.ndarray, tol: float, max_rounds: int = 25):
    """Active-set refinement of an approximate solution on the exact KKT system."""
    s, T = prob.s, prob.T
    N = s * T
    if N > 3000:
        return None
    H = prob.hessian()
    f = prob.linear_term()
    x0 = C0.ravel()
    lo, up = prob.lower.ravel(), prob.upper.ravel()
    band = 1e-7
    at_lo = (x0 - lo <= band) & (lo < up)
    at_up = (up - x0 <= band) & (lo < up)
    fixed_pin = lo == up
    energy_rows = np.zeros((s, N))
    for i in range(s):
        energy_rows[i, i * T:(i + 1) * T] = prob.coeff[i]
    # coupling row (t, l): sum_i D[l, i] c_i(t) >= Y_b[t, l]
    coup = np.zeros((T * prob.n, N))
    for t in range(T):
        for l in range(prob.n):
            coup[t * prob.n + l, t::T] = prob.D[l]
    ybound = prob.Y_b.ravel()
    res0 = ybound - coup @ x0
    yscale = max(1e-12, float(np.abs(ybound).max()) if ybound.size else 1.0)
    act_c = (res0 >= -band * yscale) & (mu0.ravel() > 0) if ybound.size else np.zeros(0, bool)
    bal = np.zeros((T * prob.n_eq, N))
    for t in range(T):
        for l in range(prob.n_eq):
            bal[t * prob.n_eq + l, t::T] = prob.D_eq[l]
    bal_rhs = prob.b_eq.ravel() if prob.n_eq else np.zeros(0)

    for _ in range(max_rounds):
        fix = at_lo | at_up | fixed_pin
        rows = [energy_rows, np.eye(N)[fix], coup[act_c], bal]
        rhs = [prob.rhs, np.where(at_up, up, lo)[fix], ybound[act_c], bal_rhs]
        A = np.vstack(rows)
        b = np.concatenate(rhs)
        m = A.shape[0]
        K = np.block([[H, A.T], [A, np.zeros((m, m))]])
        sol, *_ = np.linalg.lstsq(K, np.concatenate([-f, b]), rcond=None)
        x, nu = sol[:N], sol[N:]
        nu_fix = nu[s:s + fix.sum()]
        nu_coup = nu[s + fix.sum():s + fix.sum() + act_c.sum()]
        z = np.zeros(N)
        z[fix] = nu_fix
        changed = False
        # lower bound active needs nu <= 0, upper needs nu >= 0; release wrong signs
        wrong_lo = at_lo & (z > tol)
        wrong_up = at_up & (z < -tol)
        if wrong_lo.any() or wrong_up.any():
            at_lo &= ~wrong_lo
            at_up &= ~wrong_up
            changed = True
        if act_c.any():
            idx = np.flatnonzero(act_c)
            wrong_c = nu_coup > tol
            if wrong_c.any():
                act_c[idx[wrong_c]] = False
                changed = True
        viol_lo = (x < lo - 1e-12) & ~fix
        viol_up = (x > up + 1e-12) & ~fix
        if viol_lo.any() or viol_up.any():
            at_lo |= viol_lo
            at_up |= viol_up
            changed = True
        if ybound.size:
            viol_c = (ybound - coup @ x > 1e-12 * yscale) & ~act_c
            if viol_c.any():
                act_c |= viol_c
                changed = True
        if not changed:
            mu = np.zeros(T * prob.n)
            mu[act_c] = -nu_coup
            lam = nu[s + fix.sum() + act_c.sum():]
            C = np.clip(x.reshape(s, T), prob.lower, prob.upper)
            return C, mu.reshape(T, prob.n), lam.reshape(T, prob.n_eq)
    return None


def reference_solve(prob: ValleyFillingProblem, tol: float = 1e-8, polish: bool = True) -> ReferenceResult:
    """Solve ``min F + sum omega g`` subject to local and coupling constraints.

    Raises
    ------
    InfeasibleError
        If the local sets, the coupling inequality or the equality coupling
        admit no common point; the message carries the probe margin.
    """
    C, problem, cons, scale = _build(prob)
    try:
        problem.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12, max_iter=500)
    except cp.SolverError:
        problem.solve(solver=cp.CLARABEL)
    if problem.status in ("infeasible", "infeasible_inaccurate") or C.value is None:
        margin = feasibility_probe(prob)
        raise InfeasibleError(f"reference problem infeasible (solver status {problem.status}, probe margin {margin:.3g})")
    Cv = np.clip(np.asarray(C.value), prob.lower, prob.upper)
    mu = np.zeros((prob.T, prob.n))
    if "coupling" in cons and cons["coupling"].dual_value is not None:
        mu = np.maximum(np.asarray(cons["coupling"].dual_value) / scale, 0.0)
    lam = np.zeros((prob.T, prob.n_eq))
    if "balance" in cons and cons["balance"].dual_value is not None:
        # cvxpy reports the multiplier of ``lhs - rhs == 0`` with sign convention lhs - rhs
        lam = -np.asarray(cons["balance"].dual_value) / scale
    kkt = kkt_residuals(prob, Cv, mu, lam)
    best = (Cv, mu, lam, kkt)
    polished = False
    if polish:
        out = _polish(prob, Cv, mu, tol=1e-9 * max(1.0, prob.hessian_norm()))
        if out is not None:
            kk = kkt_residuals(prob, *out)
            feas_ok = kk["box"] <= 1e-12 and kk["coupling"] <= 1e-9 * max(1.0, np.abs(prob.Y_b).max() if prob.Y_b.size else 1.0)
            if feas_ok and kk["stationarity_rel"] <= best[3]["stationarity_rel"] + 1e-14:
                best = (*out, kk)
                polished = True
    Cv, mu, lam, kkt = best
    return ReferenceResult(
        C=Cv,
        mu=mu,
        lam=lam,
        objective=prob.total_objective(Cv),
        kkt=kkt,
        polished=polished,
        status=problem.status,
    )


class ReferenceSolver(BaseEstimator):
    """Estimator wrapper around :func:`reference_solve`.

    After ``fit(problem)`` the optimizer is in ``solution_`` and the KKT
    report in ``kkt_``.
    """

    def __init__(self, tol=1e-8, polish=True):
        self.tol = tol
        self.polish = polish

    def fit(self, problem, y=None):
        res = reference_solve(problem, tol=self.tol, polish=self.polish)
        self.result_ = res
        self.solution_ = res.C
        self.mu_ = res.mu
        self.lam_ = res.lam
        self.objective_ = res.objective
        self.kkt_ = res.kkt
        return self
