"""Shrunken primal-dual subgradient (SPDS) solver.

Each round the operator collects the reports ``c_i^(k)``, computes the
Lagrangian gradients and broadcasts them with ``mu^(k)``; every agent then
applies::

    c_i^(k+1) = Pi_i( Pi_i(tau_c c_i^(k) - alpha_{i,k} g_i) / tau_c )

and the operator updates::

    mu^(k+1) = Pi_D( Pi_D(tau_mu mu^(k) + beta_k grad_mu L) / tau_mu )

with ``D = [0, mu_max]``. The run stops when ``||C^(k+1) - C^(k)|| <= eps``.
With no message bus the same round is executed in memory; a bus without
taps produces bit-identical results.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .attacks import AttackRuntime, bind_attacks
from .comms import Batch, MessageBus, RoundLog
from .exceptions import ConfigurationError
from .fleet import FeasibleSet, project_feasible
from .problem import DualState, ValleyFillingProblem, hessian_norm_estimate


@dataclass(frozen=True)
class SpdsConfig:
    """Solver settings. ``None`` entries are resolved per problem.

    Step sizes follow ``alpha_{i,k} = a0_i / (1 + k a1)`` and
    ``beta_k = b0 / (1 + k b1)``. By default ``a0 = 1 / L_hat`` with
    ``L_hat`` a power-iteration estimate of the objective's Hessian norm,
    ``b0 = 0.5 L_hat / sigma_max(D)^2`` and ``eps = 1e-4 sqrt(s T)``.
    """

    tau_c: float = 0.99
    tau_mu: float = 0.99
    a0: float | None = None
    a1: float = 1e-3
    b0: float | None = None
    b1: float = 1e-3
    eps: float | None = None
    max_iter: int = 50_000
    mu_max: float = 1e4
    lam_max: float = 1e4
    dual_eps: float | None = None
    adapt_attacker_steps: bool = True
    record_every: int = 0

    def __post_init__(self):
        for name in ("tau_c", "tau_mu"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigurationError(f"{name} must lie in (0, 1], got {v}")
        for name in ("a0", "b0", "eps", "dual_eps"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigurationError(f"{name} must be positive, got {v}")
        for name in ("a1", "b1"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ConfigurationError("max_iter must be a positive integer")
        if not self.mu_max > 0 or not self.lam_max > 0:
            raise ConfigurationError("multiplier caps must be positive")
        if self.record_every < 0:
            raise ConfigurationError("record_every must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ResolvedSteps:
    """Resolved schedule constants. ``a0`` includes the attacker adaptation;
    ``a0_honest`` is what every agent uses while no attack is active."""

    a0: np.ndarray
    b0: float
    eps: float
    L_hat: float
    a0_honest: np.ndarray | None = None

    def honest(self) -> np.ndarray:
        return self.a0 if self.a0_honest is None else self.a0_honest


def resolve_steps(prob: ValleyFillingProblem, cfg: SpdsConfig, extra_curvature=None) -> ResolvedSteps:
    L_hat = hessian_norm_estimate(prob)
    base = cfg.a0 if cfg.a0 is not None else 1.0 / L_hat
    a0 = np.full(prob.s, base)
    honest = a0.copy()
    if extra_curvature is not None and cfg.adapt_attacker_steps:
        extra = np.asarray(extra_curvature, dtype=float)
        hit = extra > 0
        a0[hit] = 1.0 / (1.0 / base + extra[hit])
    if cfg.b0 is not None:
        b0 = cfg.b0
    else:
        blocks = [prob.D] + ([prob.D_eq] if prob.D_eq is not None else [])
        sigma = float(np.linalg.norm(np.vstack(blocks), 2)) if any(b.size for b in blocks) else 0.0
        b0 = 0.5 * L_hat / sigma**2 if sigma > 0 else 0.1 * base
    eps = cfg.eps if cfg.eps is not None else 1e-4 * math.sqrt(prob.s * prob.T)
    return ResolvedSteps(a0, float(b0), float(eps), float(L_hat), honest)


def primal_update(c, grad, fset: FeasibleSet, alpha: float, tau: float = 0.99) -> np.ndarray:
    """Single-agent SPDS step ``Pi(Pi(tau c - alpha grad) / tau)``."""
    inner = project_feasible(tau * np.asarray(c, dtype=float) - alpha * np.asarray(grad, dtype=float), fset)
    return project_feasible(inner / tau, fset)


def dual_update(mu, grad, beta: float, tau: float = 0.99, mu_max: float = 1e4, mu_min: float = 0.0) -> np.ndarray:
    """``Pi_D(Pi_D(tau mu + beta grad) / tau)`` on the box ``[mu_min, mu_max]``."""
    inner = np.clip(tau * np.asarray(mu, dtype=float) + beta * np.asarray(grad, dtype=float), mu_min, mu_max)
    return np.clip(inner / tau, mu_min, mu_max)


@dataclass
class IterationTrace:
    """Per-round record of a run. Index ``k`` describes the step ``C^(k) -> C^(k+1)``."""

    residual: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    min_voltage: list = field(default_factory=list)
    dual_change: list = field(default_factory=list)
    injection: dict = field(default_factory=dict)
    gate: dict = field(default_factory=dict)
    activation: dict = field(default_factory=dict)
    states: list = field(default_factory=list)
    converged: bool = False
    eps: float = float("nan")

    @property
    def iterations(self) -> int:
        return len(self.residual)

    @property
    def final_residual(self) -> float:
        return self.residual[-1] if self.residual else float("inf")

    def columns(self) -> list[str]:
        cols = ["iteration", "residual", "objective", "min_voltage_pu"]
        for label in self.injection:
            cols += [f"{label}_gate", f"{label}_injection_norm"]
        return cols

    def rows(self):
        for k in range(self.iterations):
            row = [k, self.residual[k], self.objective[k], self.min_voltage[k]]
            for label in self.injection:
                row += [int(self.gate[label][k]), self.injection[label][k]]
            yield row

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns())
            for row in self.rows():
                w.writerow([_fmt(v) for v in row])

    def dump_states(self, path) -> None:
        """Binary dump of the recorded states (``record_every`` > 0)."""
        data = {}
        for k, C, mu, lam in self.states:
            data[f"C_{k}"] = C
            data[f"mu_{k}"] = mu
            data[f"lam_{k}"] = lam
        np.savez_compressed(path, **data)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class SpdsResult:
    C: np.ndarray
    dual: DualState
    trace: IterationTrace
    steps: ResolvedSteps
    attacks: list = field(default_factory=list)
    log: RoundLog | None = None

    @property
    def converged(self) -> bool:
        return self.trace.converged

    @property
    def iterations(self) -> int:
        return self.trace.iterations


class _Operator:
    """Operator side: Lagrangian gradients out, dual ascent on the reports."""

    def __init__(self, prob: ValleyFillingProblem, cfg: SpdsConfig, steps: ResolvedSteps):
        self.prob = prob
        self.cfg = cfg
        self.steps = steps
        self.mu = np.zeros((prob.T, prob.n))
        self.lam = np.zeros((prob.T, prob.n_eq))
        self.prev: np.ndarray | None = None

    def operate(self, k: int, reports: Batch) -> Batch:
        prob, cfg = self.prob, self.cfg
        C = reports.field("c")
        residual = math.inf if self.prev is None else float(np.linalg.norm(C - self.prev))
        self.prev = np.array(C, copy=True)
        load = prob.total_load(C)
        grad = prob.lagrangian_grad(C, self.mu, self.lam)
        out = Batch(
            {"grad": grad},
            {"mu": self.mu.ravel().copy(), "lam": self.lam.ravel().copy(), "load": load,
             "residual": np.array([residual])},
        )
        beta = self.steps.b0 / (1.0 + k * cfg.b1)
        self.mu = dual_update(self.mu, prob.coupling_residual(C), beta, cfg.tau_mu, cfg.mu_max)
        if prob.n_eq:
            self.lam = dual_update(self.lam, prob.balance_residual(C), beta, cfg.tau_mu, cfg.lam_max, -cfg.lam_max)
        return out


class _Agents:
    """Agent side, vectorized over the fleet; primal attacks act here."""

    def __init__(self, prob: ValleyFillingProblem, cfg: SpdsConfig, steps: ResolvedSteps,
                 attacks: list[AttackRuntime], C0: np.ndarray):
        self.prob = prob
        self.cfg = cfg
        self.steps = steps
        self.ids = prob.ids
        self.attacks = [a for a in attacks if a.is_primal]
        self.C = C0

    def report(self, k: int) -> dict:
        return {"c": self.C}

    def update(self, k: int, broadcast: Batch) -> None:
        prob, cfg = self.prob, self.cfg
        G = broadcast.field("grad")
        # every agent sees the same residual in its broadcast; take the first
        residual = float(np.asarray(broadcast.message(0)["residual"]).reshape(-1)[0])
        a0 = self.steps.honest().copy()
        for rt in self.attacks:
            term = rt.primal_term(self.C, k, residual)
            if term is not None:
                G = G + term
                # a hibernating attacker keeps the honest step until its gate opens
                a0[rt.rows] = self.steps.a0[rt.rows]
        alpha = a0 / (1.0 + k * cfg.a1)
        tau = cfg.tau_c
        inner = prob.project(tau * self.C - alpha[:, None] * G)
        self.C = prob.project(inner / tau)


def run(problem: ValleyFillingProblem, cfg: SpdsConfig | None = None, attacks=(), bus: MessageBus | None = None,
        C0=None, log: RoundLog | None = None, use_bus: bool | None = None) -> SpdsResult:
    """Run SPDS, optionally under attack.

    Parameters
    ----------
    attacks : sequence of attack specs (see :mod:`evdmao.attacks`)
    bus : message bus to route rounds through. Created automatically when a
        dual attack is present or ``use_bus`` is true.
    C0 : starting profile; defaults to each EV's flat feasible profile.

    Returns
    -------
    SpdsResult
        Non-convergence is reported through ``result.converged``; the trace
        is complete either way.
    """
    cfg = cfg or SpdsConfig()
    prob = problem
    eps = cfg.eps if cfg.eps is not None else 1e-4 * math.sqrt(prob.s * prob.T)
    runtimes = bind_attacks(list(attacks), prob, eps=eps)
    curvature = np.zeros(prob.s)
    for rt in runtimes:
        curvature += rt.curvature()
    steps = resolve_steps(prob, cfg, curvature)
    need_bus = any(rt.is_dual for rt in runtimes)
    if bus is None and (need_bus or use_bus):
        bus = MessageBus(prob.ids, log if log is not None else RoundLog("mutations"))
    if bus is not None:
        for rt in runtimes:
            rt.install(bus)

    C = prob.initial_profile() if C0 is None else prob.project(prob.check_profile(C0))
    agents = _Agents(prob, cfg, steps, runtimes, C)
    operator = _Operator(prob, cfg, steps)
    trace = IterationTrace(eps=steps.eps)
    for rt in runtimes:
        trace.injection[rt.label] = []
        trace.gate[rt.label] = []
    v_floor = prob.network.v_floor if prob.network is not None else None
    mu_prev = operator.mu

    for k in range(cfg.max_iter):
        for rt in runtimes:
            rt.last_norm = 0.0
        C_old = agents.C
        if bus is not None:
            bus.run_round(k, agents, operator)
        else:
            agents.update(k, operator.operate(k, Batch(agents.report(k))))
        C_new = agents.C
        res = float(np.linalg.norm(C_new - C_old))
        trace.residual.append(res)
        trace.objective.append(prob.objective(C_new))
        v = prob.voltage_pu(C_new)
        trace.min_voltage.append(float(v.min()) if v is not None and v.size else float("nan"))
        dchange = float(np.linalg.norm(operator.mu - mu_prev))
        trace.dual_change.append(dchange)
        mu_prev = operator.mu
        for rt in runtimes:
            trace.injection[rt.label].append(rt.last_norm)
            trace.gate[rt.label].append(rt.gate_open)
        if cfg.record_every and k % cfg.record_every == 0:
            trace.states.append((k, C_new.copy(), operator.mu.copy(), operator.lam.copy()))
        if res <= steps.eps and (cfg.dual_eps is None or dchange <= cfg.dual_eps):
            trace.converged = True
            break
    for rt in runtimes:
        trace.activation[rt.label] = None if rt.gate is None else rt.gate.activation_round
    if cfg.record_every:
        k_last = trace.iterations - 1
        if not trace.states or trace.states[-1][0] != k_last:
            trace.states.append((k_last, agents.C.copy(), operator.mu.copy(), operator.lam.copy()))
    dual = DualState(operator.mu, cfg.mu_max, operator.lam if prob.n_eq else None, cfg.lam_max)
    return SpdsResult(agents.C, dual, trace, steps, runtimes, bus.log if bus is not None else None)


class SPDSSolver(BaseEstimator):
    """Estimator interface to :func:`run`.

    ``fit(problem)`` sets ``solution_``, ``mu_``, ``lam_``, ``trace_``,
    ``converged_`` and ``n_iter_``.
    """

    def __init__(self, tau_c=0.99, tau_mu=0.99, a0=None, a1=1e-3, b0=None, b1=1e-3, eps=None,
                 max_iter=50_000, mu_max=1e4, attacks=(), use_bus=False):
        self.tau_c = tau_c
        self.tau_mu = tau_mu
        self.a0 = a0
        self.a1 = a1
        self.b0 = b0
        self.b1 = b1
        self.eps = eps
        self.max_iter = max_iter
        self.mu_max = mu_max
        self.attacks = attacks
        self.use_bus = use_bus

    def config(self) -> SpdsConfig:
        return SpdsConfig(tau_c=self.tau_c, tau_mu=self.tau_mu, a0=self.a0, a1=self.a1, b0=self.b0, b1=self.b1,
                          eps=self.eps, max_iter=self.max_iter, mu_max=self.mu_max)

    def fit(self, problem, y=None):
        res = run(problem, self.config(), attacks=self.attacks, use_bus=self.use_bus)
        self.result_ = res
        self.solution_ = res.C
        self.mu_ = res.dual.mu
        self.lam_ = res.dual.lam
        self.trace_ = res.trace
        self.converged_ = res.converged
        self.n_iter_ = res.iterations
        return self

    def score(self, problem, y=None) -> float:
        """Negative objective of the fitted profile (higher is better)."""
        return -problem.objective(self.solution_)
