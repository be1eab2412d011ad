"""Deviation bounds under attack and scenario metrics.

The bound checks compare two reference solutions, the attack-free optimum
``C*`` and the optimum ``C_A*`` of ``F + sum omega g``. The quantities are

* ``m`` the certified strong-convexity modulus of ``F``,
* ``B = sqrt(sum omega_i L_gi^2)`` the aggregate subgradient bound,
* ``sigma* = sum omega_i grad g_i(C*)``,
* the projection of the descent direction ``-sigma*`` on the tangent cone
  ``psi(C*)`` of the feasible set.

The chain ``m ||Delta||^2 <= -Delta^T sigma* <= ||Pi_psi(-sigma*)|| ||Delta||``
uses the descent direction: ``Delta`` is a feasible direction, so its inner
product with the polar part of ``-sigma*`` is nonpositive. The norm of
``Pi_psi(sigma*)`` is reported as well; the two agree when ``psi(C*)`` is a
subspace (no active inequality) but not in general.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import cvxpy as cp
import numpy as np
from scipy.linalg import null_space
from scipy.optimize import nnls

from .exceptions import ConfigurationError
from .problem import QuadraticGoal, ValleyFillingProblem, hessian_norm_estimate, strong_convexity_modulus
from .reference import ReferenceResult, reference_solve

TAU_ACT = 1e-6
AMBIGUITY_FACTOR = 100.0


# -- deviation bounds under strong convexity ------------------------------------


def deviation_bound(omegas: Sequence[float], lipschitz: Sequence[float], m_cert: float) -> float:
    """``sqrt(sum omega_i L_i^2) / m``.

    Raises
    ------
    ConfigurationError
        When ``m_cert <= 0``; use :func:`weak_sharp_check` instead.
    """
    if not m_cert > 0:
        raise ConfigurationError("strong-convexity modulus must be positive; use the weak-sharp check instead")
    omegas = np.asarray(omegas, dtype=float)
    L = np.asarray(lipschitz, dtype=float)
    if omegas.shape != L.shape:
        raise ConfigurationError("one Lipschitz constant per attack weight is required")
    return float(np.sqrt(np.sum(omegas * L**2)) / m_cert)


def aggregate_bound(goals: Sequence[QuadraticGoal], squared_weights: bool = False) -> float:
    """``B`` over a goal list; ``squared_weights`` gives ``sqrt(sum omega^2 L^2)``."""
    w = np.array([g.omega for g in goals], dtype=float)
    L = np.array([g.gradient_bound() for g in goals], dtype=float)
    if squared_weights:
        w = w**2
    return float(np.sqrt(np.sum(w * L**2)))


def tangent_cone_projection(sigma, eq_rows=None, ineq_rows=None) -> np.ndarray:
    """Project ``sigma`` on ``{d : E d = 0, A d <= 0}``.

    Uses the Moreau decomposition: restricted to the null space of ``E``,
    the polar cone is generated by the rows of ``A``, and the polar part is
    a nonnegative least-squares fit.
    """
    sigma = np.asarray(sigma, dtype=float).ravel()
    N = sigma.size
    E = np.zeros((0, N)) if eq_rows is None else np.atleast_2d(np.asarray(eq_rows, dtype=float))
    A = np.zeros((0, N)) if ineq_rows is None else np.atleast_2d(np.asarray(ineq_rows, dtype=float))
    if E.size and np.any(E):
        Z = null_space(E)
    else:
        Z = np.eye(N)
    if Z.shape[1] == 0:
        return np.zeros(N)
    b = Z.T @ sigma
    if A.shape[0] == 0:
        return Z @ b
    M = Z.T @ A.T
    y, _ = nnls(M, b, maxiter=50 * max(M.shape))
    return Z @ (b - M @ y)


@dataclass
class ActiveSet:
    """Constraint rows at a point, in stacked (agent-major) coordinates."""

    eq: np.ndarray
    sure: np.ndarray
    ambiguous: np.ndarray


def active_constraints(prob: ValleyFillingProblem, C, tau_act: float = TAU_ACT,
                       agents: Sequence[int] | None = None) -> ActiveSet:
    """Tangent-cone rows at ``C``.

    Box faces use ``tau_act`` directly; coupling rows use ``tau_act`` times
    the largest ``|Y_b|``. Rows with slack in ``(tau, 100 tau]`` are
    ambiguous. With ``agents`` only those blocks' local constraints are
    returned (coupling rows are skipped).
    """
    C = prob.check_profile(C)
    s, T = prob.s, prob.T
    blocks = range(s) if agents is None else list(agents)
    cols = {i: np.arange(i * T, (i + 1) * T) for i in range(s)}
    N = s * T
    eq, sure, amb = [], [], []

    def unit(j, sign):
        r = np.zeros(N)
        r[j] = sign
        return r

    for i in blocks:
        r = np.zeros(N)
        r[cols[i]] = prob.coeff[i]
        eq.append(r)
        for t in range(T):
            j = i * T + t
            for slack, sign in ((C[i, t] - prob.lower[i, t], -1.0), (prob.upper[i, t] - C[i, t], 1.0)):
                if slack <= tau_act:
                    sure.append(unit(j, sign))
                elif slack <= AMBIGUITY_FACTOR * tau_act:
                    amb.append(unit(j, sign))
    if agents is None:
        if prob.n:
            scale = max(1e-300, float(np.abs(prob.Y_b).max()))
            slack = -prob.coupling_residual(C)
            for t in range(T):
                for b in range(prob.n):
                    if slack[t, b] > AMBIGUITY_FACTOR * tau_act * scale:
                        continue
                    r = np.zeros(N)
                    r[[i * T + t for i in range(s)]] = -prob.D[b]
                    (sure if slack[t, b] <= tau_act * scale else amb).append(r)
        if prob.D_eq is not None:
            for t in range(T):
                for e in range(prob.n_eq):
                    r = np.zeros(N)
                    r[[i * T + t for i in range(s)]] = prob.D_eq[e]
                    eq.append(r)

    def stack(rows):
        return np.array(rows) if rows else np.zeros((0, N))

    return ActiveSet(stack(eq), stack(sure), stack(amb))


def tangent_projection_norms(prob: ValleyFillingProblem, C, sigma, tau_act: float = TAU_ACT,
                             agents: Sequence[int] | None = None) -> tuple[float, float, int]:
    """``(smallest, largest, n_ambiguous)`` projection norm over the ambiguous rows.

    Treating every ambiguous row as active shrinks the cone and gives the
    smallest norm; treating none as active gives the largest.
    """
    act = active_constraints(prob, C, tau_act, agents)
    sigma = np.asarray(sigma, dtype=float)
    if agents is not None:
        full = np.zeros((prob.s, prob.T))
        full[list(agents)] = sigma.reshape(prob.s, prob.T)[list(agents)]
        sigma = full
    big = np.linalg.norm(tangent_cone_projection(sigma, act.eq, act.sure))
    if act.ambiguous.shape[0] == 0:
        return float(big), float(big), 0
    small = np.linalg.norm(tangent_cone_projection(sigma, act.eq, np.vstack([act.sure, act.ambiguous])))
    return float(small), float(big), int(act.ambiguous.shape[0])


@dataclass
class BoundsReport:
    """Measured deviations under attack against their bounds.

    ``bound_ok`` maps check names to pass flags and ``slack`` to
    ``bound - measured`` (nonnegative when the check passes).
    """

    m_cert: float
    B: float
    B_squared_weights: float
    L_F: float
    sigma_star_norm: float
    tangent_proj: float
    tangent_proj_min: float
    tangent_proj_literal: float
    n_ambiguous: int
    dev: float
    obj_gap: float
    per_agent_dev: list
    per_agent_bound: list
    per_agent_tangent: list
    goal_agents: list
    slack: dict = field(default_factory=dict)
    bound_ok: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    sigma_star: np.ndarray | None = None

    @property
    def all_ok(self) -> bool:
        return all(self.bound_ok.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_star"] = None if self.sigma_star is None else np.asarray(self.sigma_star).tolist()
        d["all_ok"] = self.all_ok
        return _clean(d)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _check(report: BoundsReport, name: str, bound: float, value: float, tol: float) -> None:
    report.slack[name] = float(bound - value)
    report.bound_ok[name] = bool(bound - value >= -tol * max(1.0, abs(bound), abs(value)))


def objective_gap_check(prob: ValleyFillingProblem, C_star, C_A_star, tangent_proj: float, L_F: float,
                        m_cert: float, tol: float = 1e-9) -> dict:
    """Rows for ``0 <= gap <= tp^2/(2m)`` and ``gap <= L_F/2 ||Delta||^2``.

    A gap below ``-tol`` means the reference optimum is not optimal and is
    flagged as an oracle failure rather than a bound violation.
    """
    gap = prob.objective(C_A_star) - prob.objective(C_star)
    dev = float(np.linalg.norm(np.asarray(C_A_star) - np.asarray(C_star)))
    scale = max(1.0, abs(prob.objective(C_star)))
    rows = {
        "gap": gap,
        "oracle_failure": bool(gap < -tol * scale),
        "gap_nonnegative": bool(gap >= -tol * scale),
        "gap_bound_tangent": tangent_proj**2 / (2.0 * m_cert),
        "gap_bound_smooth": 0.5 * L_F * dev**2,
    }
    return rows


def bounds_report(problem: ValleyFillingProblem, goals: Sequence[QuadraticGoal], tau_act: float = TAU_ACT,
                  ref_free: ReferenceResult | None = None, ref_attack: ReferenceResult | None = None,
                  tol: float = 1e-9) -> BoundsReport:
    """Evaluate the deviation and objective-gap bounds for one goal set.

    Parameters
    ----------
    problem : attack-free problem; existing goals are dropped.
    goals : the attack terms ``omega g`` (see :func:`evdmao.attacks.attack_goals`).
    ref_free, ref_attack : precomputed reference solutions, optional.
    """
    base = problem.without_goals()
    m = strong_convexity_modulus(base)
    if not m > 0:
        raise ConfigurationError("problem is not strongly convex (delta = 0); use weak_sharp_check")
    attacked = base.with_goals(goals)
    r0 = ref_free or reference_solve(base)
    ra = ref_attack or reference_solve(attacked)
    C0, CA = r0.C, ra.C
    sigma = attacked.goal_gradient(C0)
    L_F = hessian_norm_estimate(base)
    tp_min, tp, n_amb = tangent_projection_norms(base, C0, -sigma, tau_act)
    tp_lit = tangent_projection_norms(base, C0, sigma, tau_act)[1]
    B = aggregate_bound(goals)
    B2 = aggregate_bound(goals, squared_weights=True)
    dev = float(np.linalg.norm(CA - C0))
    gap_rows = objective_gap_check(base, C0, CA, tp, L_F, m, tol)

    goal_agents = sorted({a for g in goals for a in g.agents})
    per_dev = [float(np.linalg.norm(CA[i] - C0[i])) for i in range(base.s)]
    per_bound, per_tan = [], []
    for i in range(base.s):
        if i not in goal_agents:
            per_bound.append(None)
            per_tan.append(None)
            continue
        # bound on ||sigma_i||: weighted gradient bounds of the goals touching block i
        per_bound.append(float(sum(g.omega * g.gradient_bound() for g in goals if i in g.agents)) / m)
        per_tan.append(tangent_projection_norms(base, C0, -sigma, tau_act, agents=[i])[1] / m)

    rep = BoundsReport(
        m_cert=m, B=B, B_squared_weights=B2, L_F=L_F, sigma_star_norm=float(np.linalg.norm(sigma)),
        tangent_proj=tp, tangent_proj_min=tp_min, tangent_proj_literal=tp_lit, n_ambiguous=n_amb,
        dev=dev, obj_gap=gap_rows["gap"], per_agent_dev=per_dev, per_agent_bound=per_bound,
        per_agent_tangent=per_tan, goal_agents=goal_agents, sigma_star=sigma,
    )
    _check(rep, "deviation_tangent", tp / m, dev, tol)
    _check(rep, "deviation_B", B / m, dev, tol)
    _check(rep, "tangent_within_B", B, tp, tol)
    rep.slack["gap_nonnegative"] = gap_rows["gap"]
    rep.bound_ok["gap_nonnegative"] = gap_rows["gap_nonnegative"]
    _check(rep, "gap_tangent", gap_rows["gap_bound_tangent"], gap_rows["gap"], tol)
    _check(rep, "gap_smooth", gap_rows["gap_bound_smooth"], gap_rows["gap"], tol)
    for i in goal_agents:
        _check(rep, f"agent_tangent_{base.ids[i]}", per_tan[i], per_dev[i], tol)
        _check(rep, f"agent_lipschitz_{base.ids[i]}", per_bound[i], per_dev[i], tol)
    if gap_rows["oracle_failure"]:
        rep.notes.append("negative objective gap: reference solution not optimal")
    rep.notes.append(f"B = sqrt(sum omega * L^2); with omega^2 * L^2 weights B = {B2!r}")
    if n_amb:
        rep.notes.append(f"{n_amb} constraint rows within the ambiguity band; bounds use the larger cone")
    honest = [i for i in range(base.s) if i not in goal_agents and per_dev[i] > 0]
    if honest:
        rep.notes.append("honest blocks move with the shared load; the per-block bound is reported for goal agents only")
    return rep


# -- weak sharp minima --------------------------------------------------------


def _feasible_projection(prob: ValleyFillingProblem, X, load_target=None):
    """Euclidean projection on the full feasible set (optionally on ``S*``)."""
    s, T = prob.s, prob.T
    Y = cp.Variable((s, T))
    cons = [Y >= prob.lower, Y <= prob.upper, cp.sum(cp.multiply(prob.coeff, Y), axis=1) == prob.rhs]
    if prob.n:
        cons.append(Y.T @ prob.D.T >= prob.Y_b)
    if prob.D_eq is not None:
        cons.append(Y.T @ prob.D_eq.T == prob.b_eq)
    if load_target is not None:
        cons.append(prob.p_max @ Y == load_target)
    p = cp.Problem(cp.Minimize(cp.sum_squares(Y - X)), cons)
    p.solve(solver=cp.CLARABEL)
    if Y.value is None:
        return None
    return np.clip(np.asarray(Y.value), prob.lower, prob.upper)


@dataclass
class WeakSharpReport:
    """Empirical weak-sharp check; ``alpha_est`` is a sampled estimate, not a certificate."""

    alpha_est: float
    F_star: float
    dist: float
    B: float
    tangent_proj: float
    bound_B: float | None
    bound_tangent: float | None
    status: str
    samples: int
    label: str = "empirical"

    def to_dict(self) -> dict:
        return _clean(asdict(self))


def distance_to_solution_set(prob: ValleyFillingProblem, X, ref: ReferenceResult) -> tuple[float, np.ndarray]:
    """``dist(X, S*)`` and the nearest point.

    With ``delta = 0`` every optimum shares the total load (``F`` is strictly
    convex in the load), so ``S*`` is the feasible set cut by that load.
    """
    if prob.delta > 0:
        return float(np.linalg.norm(np.asarray(X) - ref.C)), ref.C
    Y = _feasible_projection(prob.without_goals(), np.asarray(X), prob.p_max @ ref.C)
    if Y is None:
        return float(np.linalg.norm(np.asarray(X) - ref.C)), ref.C
    return float(np.linalg.norm(np.asarray(X) - Y)), Y


def estimate_weak_sharp_modulus(prob: ValleyFillingProblem, ref: ReferenceResult, samples: int = 24,
                                radii=(1e-2, 1e-1, 0.3), seed: int = 0) -> float:
    """``min (F(x) - F*) / dist(x, S*)`` over feasible points sampled around ``S*``.

    Points are random perturbations of ``C*`` at the given radii, projected
    back on the feasible set. The minimum over a finite sample overestimates
    the true modulus; it is a heuristic.
    """
    base = prob.without_goals()
    rng = np.random.default_rng(seed)
    F_star = base.objective(ref.C)
    ratios = []
    for r in radii:
        for _ in range(max(1, samples // len(radii))):
            xi = rng.standard_normal(ref.C.shape)
            x = _feasible_projection(base, ref.C + r * xi / np.linalg.norm(xi))
            if x is None:
                continue
            d, _ = distance_to_solution_set(base, x, ref)
            if d <= 1e-7:
                continue
            ratios.append(max(0.0, base.objective(x) - F_star) / d)
    return float(min(ratios)) if ratios else 0.0


def weak_sharp_check(problem: ValleyFillingProblem, goals: Sequence[QuadraticGoal], alpha_est: float | None = None,
                     ref_free: ReferenceResult | None = None, tau_act: float = TAU_ACT, seed: int = 0,
                     alpha_floor: float = 1e-8) -> WeakSharpReport:
    """Compare ``dist(C_A*, S*)`` with ``B / alpha`` for an unregularized problem."""
    base = problem.without_goals()
    r0 = ref_free or reference_solve(base)
    ra = reference_solve(base.with_goals(goals))
    dist, near = distance_to_solution_set(base, ra.C, r0)
    sigma = base.with_goals(goals).goal_gradient(near)
    tp = tangent_projection_norms(base, near, -sigma, tau_act)[1]
    B = aggregate_bound(goals) if goals else 0.0
    alpha = estimate_weak_sharp_modulus(base, r0, seed=seed) if alpha_est is None else float(alpha_est)
    scale = max(1.0, abs(base.objective(r0.C)))
    if alpha <= alpha_floor * scale:
        return WeakSharpReport(alpha, base.objective(r0.C), dist, B, tp, None, None, "no weak-sharp certificate", 0)
    ok = dist <= B / alpha * (1 + 1e-9) and dist <= tp / alpha * (1 + 1e-9) + 1e-9
    return WeakSharpReport(alpha, base.objective(r0.C), dist, B, tp, B / alpha, tp / alpha,
                           "holds" if ok else "violated", 24)


# -- scenario metrics ---------------------------------------------------------


def profile_deviation(a, b) -> tuple[float, float]:
    """Relative mean and relative l2 deviation of profile ``a`` from ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    mb = float(np.mean(b))
    nb = float(np.linalg.norm(b))
    mean_dev = abs(float(np.mean(a)) - mb) / abs(mb) if mb else float(abs(np.mean(a)))
    l2 = float(np.linalg.norm(a - b)) / nb if nb else float(np.linalg.norm(a))
    return mean_dev, l2


def default_window(prob: ValleyFillingProblem, C, rel: float = 1e-3) -> tuple[int, int]:
    """Span of slots where the fleet draws more than ``rel`` of its peak power."""
    ev = prob.p_max @ np.asarray(C)
    on = np.flatnonzero(ev > rel * max(ev.max(), 1e-300))
    if on.size == 0:
        return 0, prob.T
    return int(on[0]), int(on[-1]) + 1


def oscillation_score(c, t_f: int, rel_amp: float = 0.5) -> float:
    """Fraction of class-changing steps that move the expected way by a large amount.

    Slots with 1-based index divisible by ``t_f`` are preferred and should
    sit above their neighbours. Only steps inside the charging span count,
    and a step counts when it moves by at least ``rel_amp`` times the
    profile range.
    """
    c = np.asarray(c, dtype=float)
    T = c.size
    pref = (np.arange(1, T + 1) % int(t_f)) == 0
    if t_f == 1 or T < 2:
        return 1.0
    on = np.flatnonzero(c > 1e-6)
    if on.size == 0:
        return 0.0
    lo, hi = max(0, on[0] - 1), min(T - 1, on[-1] + 1)
    amp = rel_amp * (c.max() - c.min())
    hits = total = 0
    for t in range(lo, hi):
        if pref[t] == pref[t + 1]:
            continue
        total += 1
        step = c[t + 1] - c[t]
        want = 1.0 if pref[t + 1] else -1.0
        if want * step >= amp and amp > 0:
            hits += 1
    return hits / total if total else 0.0


def energy_in_window(c, p_max: float, theta: Sequence[int]) -> float:
    """Share of the delivered energy that falls in the 1-based slot set ``theta``."""
    c = np.asarray(c, dtype=float)
    idx = np.asarray(sorted(theta), dtype=int) - 1
    total = float(np.sum(p_max * c))
    return float(np.sum(p_max * c[idx])) / total if total > 0 else 0.0


@dataclass
class ScenarioMetrics:
    converged: bool
    iterations: int
    valley_window: tuple
    valley_flatness: float
    valley_level: float
    min_voltage_pu: float | None
    v_floor_pu: float | None
    voltage_violations: int
    attacker_flatness: dict = field(default_factory=dict)
    attacker_mean: dict = field(default_factory=dict)
    oscillation_score: dict = field(default_factory=dict)
    energy_in_theta: dict = field(default_factory=dict)
    attack_deviation: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, object]]:
        out = [
            ("converged", int(self.converged)),
            ("iterations", self.iterations),
            ("valley_window_start", self.valley_window[0]),
            ("valley_window_end", self.valley_window[1]),
            ("valley_flatness", self.valley_flatness),
            ("valley_level_kw", self.valley_level),
            ("min_voltage_pu", self.min_voltage_pu),
            ("v_floor_pu", self.v_floor_pu),
            ("voltage_violations", self.voltage_violations),
        ]
        for name in ("attacker_flatness", "attacker_mean", "oscillation_score", "energy_in_theta", "attack_deviation"):
            for k, v in getattr(self, name).items():
                out.append((f"{name}:{k}", v))
        return out


def scenario_metrics(result, problem: ValleyFillingProblem, attacks: Sequence = (), window=None,
                     reference=None) -> ScenarioMetrics:
    """Metrics of a finished run.

    Parameters
    ----------
    result : :class:`evdmao.spds.SpdsResult`
    attacks : the specs the run used
    window : ``(start, end)`` slot range for the valley flatness; defaults to
        the span where the fleet charges.
    reference : optional profile (s, T) to measure attack deviations against,
        for example the primal-attack counterpart of a dual run.
    """
    from .attacks import BatteryDamage, DualFull, DualPowerBalance, SmoothCharging, Stealthy, TimeTuning

    C = np.asarray(result.C)
    prob = problem
    lo, hi = window if window is not None else default_window(prob, C)
    load = prob.total_load(C)[lo:hi]
    mean = float(load.mean()) if load.size else float("nan")
    flat = float(load.std() / mean) if load.size and mean else float("nan")
    v = prob.voltage_pu(C)
    vmin = float(v.min()) if v is not None and v.size else None
    vf = prob.network.v_floor if prob.network is not None else None
    viol = int(np.sum(v < vf - 1e-9)) if vmin is not None and vf is not None else 0
    m = ScenarioMetrics(bool(result.converged), int(result.iterations), (int(lo), int(hi)), flat, mean, vmin, vf, viol)

    for spec in attacks:
        inner = spec.inner if isinstance(spec, Stealthy) else spec
        goal = inner.goal if isinstance(inner, DualFull) else inner
        if isinstance(inner, DualPowerBalance):
            goal = inner.goal or SmoothCharging(inner.attacker, inner.omega)
        owner = inner.attacker if not isinstance(inner, BatteryDamage) else None
        if isinstance(goal, SmoothCharging) and owner is not None:
            c = C[prob.ids.index(owner)]
            m.attacker_flatness[str(owner)] = float(c.std() / c.mean()) if c.mean() else float("nan")
            m.attacker_mean[str(owner)] = float(c.mean())
        if isinstance(goal, TimeTuning) and owner is not None:
            i = prob.ids.index(owner)
            m.energy_in_theta[str(owner)] = energy_in_window(C[i], prob.p_max[i], goal.theta)
        if isinstance(goal, BatteryDamage):
            scores = [oscillation_score(C[prob.ids.index(vid)], goal.t_f) for vid in goal.victims]
            m.oscillation_score["mean"] = float(np.mean(scores))
            m.oscillation_score["min"] = float(np.min(scores))
    if reference is not None:
        R = np.asarray(reference)
        if R.shape != C.shape:
            raise ConfigurationError("reference profile has different dimensions")
        for spec in attacks:
            inner = spec.inner if isinstance(spec, Stealthy) else spec
            owner = getattr(inner, "attacker", None)
            if owner is None:
                continue
            i = prob.ids.index(owner)
            md, l2 = profile_deviation(C[i], R[i])
            m.attack_deviation[f"attacker_{owner}_mean"] = md
            m.attack_deviation[f"attacker_{owner}_l2"] = l2
            for vid in getattr(inner, "victims", ()):
                j = prob.ids.index(vid)
                md, l2 = profile_deviation(C[j], R[j])
                m.attack_deviation[f"victim_{vid}_mean"] = md
                m.attack_deviation[f"victim_{vid}_l2"] = l2
    return m


# -- writers ------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics_csv(metrics: ScenarioMetrics, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in metrics.rows():
            w.writerow([k, _fmt(v)])


def write_json(data: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(data), fh, indent=2, sort_keys=True)
        fh.write("\n")
