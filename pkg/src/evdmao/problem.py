"""Valley-filling problem: objective, coupling constraints and Lagrangian.

Profiles are handled as arrays of shape (s, T), one row per EV; the stacked
vector is ``C.ravel()``. Coupling multipliers have shape (T, n) and stack
time-major, matching ``[y(0); y(1); ...]``.

The inequality coupling is ``Y_b - sum_i D_i c_i <= 0``; for the voltage
case ``Y_b = v_floor^2 V0 - y_d``. An optional equality coupling
``sum_i E_i c_i - b_eq = 0`` (multiplier ``lam``) is supported for problems
whose operator enforces a balance row.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError
from .fleet import EvSpec, FeasibleSet, project_rows
from .netmodel import BaselineProfile, DistributionNetwork, InjectionModel, build_injection_model


@dataclass(frozen=True, eq=False)
class QuadraticGoal:
    """Goal ``g(C) = || sum_j w_j * c_{agents[j]} - offset ||^2`` scaled by ``omega``.

    ``weights`` has one row per listed agent; all products are elementwise,
    so the induced Hessian is diagonal per agent pair.
    """

    agents: tuple
    weights: np.ndarray
    offset: np.ndarray
    omega: float = 1.0
    label: str = ""

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.weights, dtype=float))
        r = np.asarray(self.offset, dtype=float)
        if W.shape[0] != len(self.agents):
            raise ConfigurationError("goal needs one weight row per agent")
        if r.shape != (W.shape[1],):
            raise ConfigurationError("goal offset length must equal the horizon")
        if not self.omega > 0:
            raise ConfigurationError(f"goal weight omega must be positive, got {self.omega}")
        object.__setattr__(self, "agents", tuple(int(a) for a in self.agents))
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "offset", r)

    @classmethod
    def diagonal(cls, agent: int, diag, omega: float = 1.0, label: str = "") -> "QuadraticGoal":
        """``||diag * c_agent||^2``, the reshape-matrix goal ``||A c||^2``."""
        diag = np.asarray(diag, dtype=float)
        return cls((agent,), diag[None, :], np.zeros(diag.size), omega, label)

    def inner(self, C) -> np.ndarray:
        C = np.asarray(C)
        return np.einsum("jt,jt->t", self.weights, C[list(self.agents)]) - self.offset

    def value(self, C) -> float:
        """Unweighted ``g(C)``."""
        r = self.inner(C)
        return float(r @ r)

    def gradient(self, C) -> np.ndarray:
        """Unweighted ``grad g(C)``, shape (s, T)."""
        C = np.asarray(C)
        out = np.zeros_like(C, dtype=float)
        r = self.inner(C)
        for j, a in enumerate(self.agents):
            out[a] += 2.0 * self.weights[j] * r
        return out

    def hessian_norm(self) -> float:
        """Lipschitz constant of ``grad g`` (spectral norm of its Hessian)."""
        # Hessian is 2 * K^T K with K = [diag(w_1) ... diag(w_k)] acting per time step
        return float(2.0 * np.max(np.sum(self.weights**2, axis=0)))

    def gradient_bound(self) -> float:
        """Bound on ``||grad g||`` over the unit box.

        For a single-agent ``||A c||^2`` this is ``2 ||A^T A|| sqrt(T)``.
        """
        T = self.weights.shape[1]
        if len(self.agents) == 1 and not np.any(self.offset):
            return float(2.0 * np.max(self.weights**2) * np.sqrt(T))
        # |inner| <= sum_j |w_j| + |offset| per step
        inner_max = np.sum(np.abs(self.weights), axis=0) + np.abs(self.offset)
        return float(2.0 * np.sqrt(np.sum(self.weights**2, axis=0).max()) * np.linalg.norm(inner_max))


@dataclass(frozen=True, eq=False)
class DualState:
    """Coupling multipliers and their projection box ``[0, mu_max]``."""

    mu: np.ndarray
    mu_max: float = 1e4
    lam: np.ndarray | None = None
    lam_max: float = 1e4

    @property
    def saturated(self) -> bool:
        hit = np.any(self.mu >= self.mu_max)
        if self.lam is not None:
            hit = hit or np.any(np.abs(self.lam) >= self.lam_max)
        return bool(hit)


@dataclass(frozen=True, eq=False)
class ValleyFillingProblem:
    """Valley filling over an EV fleet with linear coupling constraints.

    Parameters
    ----------
    p_max : ndarray (s,)
        Charger ratings in kW.
    P_b : ndarray (T,)
        Aggregated baseline load in kW.
    lower, upper, coeff : ndarray (s, T)
        Local box bounds and energy-row coefficients.
    rhs : ndarray (s,)
        Requested energies.
    D : ndarray (n, s)
        Per-step coupling matrix; ``D_i`` is column i.
    Y_b : ndarray (T, n)
        Coupling bound, constraint ``Y_b - C^T D^T <= 0``.
    delta : float
        Tikhonov weight of ``delta/2 ||C||^2``.
    power_base : float
        Power base ``S`` (kW) of the objective; the load term is
        ``1/2 ||load / S||^2``. With the default of 1 the objective is in kW^2.
    """

    p_max: np.ndarray
    P_b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    coeff: np.ndarray
    rhs: np.ndarray
    D: np.ndarray
    Y_b: np.ndarray
    delta: float = 0.0
    power_base: float = 1.0
    D_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    goals: tuple = ()
    ids: tuple = ()
    injection: InjectionModel | None = None
    network: DistributionNetwork | None = None
    buses: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        p_max = np.asarray(self.p_max, dtype=float)
        s = p_max.size
        P_b = np.asarray(self.P_b, dtype=float)
        T = P_b.size
        arrays = {"p_max": p_max, "P_b": P_b}
        for name in ("lower", "upper", "coeff"):
            a = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (s, T)).copy()
            arrays[name] = a
        rhs = np.asarray(self.rhs, dtype=float).reshape(-1)
        if rhs.shape != (s,):
            raise ConfigurationError(f"rhs must have {s} entries")
        arrays["rhs"] = rhs
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        if D.shape[1] != s:
            raise ConfigurationError(f"D has {D.shape[1]} columns, fleet has {s} EVs")
        Y_b = np.asarray(self.Y_b, dtype=float).reshape(T, D.shape[0])
        arrays.update(D=D, Y_b=Y_b)
        if (self.D_eq is None) != (self.b_eq is None):
            raise ConfigurationError("D_eq and b_eq must be given together")
        if self.D_eq is not None:
            D_eq = np.atleast_2d(np.asarray(self.D_eq, dtype=float))
            if D_eq.shape[1] != s:
                raise ConfigurationError("D_eq column count must equal the fleet size")
            arrays["D_eq"] = D_eq
            arrays["b_eq"] = np.asarray(self.b_eq, dtype=float).reshape(T, D_eq.shape[0])
        if self.delta < 0:
            raise ConfigurationError("delta must be nonnegative")
        if not self.power_base > 0:
            raise ConfigurationError("power_base must be positive")
        for g in self.goals:
            if max(g.agents) >= s or g.weights.shape[1] != T:
                raise ConfigurationError(f"goal {g.label!r} does not fit the problem dimensions")
        for name, a in arrays.items():
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if not self.ids:
            object.__setattr__(self, "ids", tuple(range(s)))

    # -- construction --------------------------------------------------------

    @classmethod
    def from_network(cls, net: DistributionNetwork, fleet: Sequence[EvSpec], base: BaselineProfile,
                     delta: float = 0.0, windows=None, meta=None,
                     power_base: float = 1.0) -> "ValleyFillingProblem":
        """Assemble the voltage-constrained valley-filling problem."""
        T = base.T
        sets = [
            FeasibleSet.from_spec(ev, T, None if windows is None else windows.get(ev.id))
            for ev in fleet
        ]
        inj = build_injection_model(net, fleet, base)
        Y_b = net.v_floor**2 * net.V0[None, :] - inj.y_d
        return cls(
            p_max=inj.p_max,
            P_b=base.agg_load,
            lower=np.stack([f.lower for f in sets]),
            upper=np.stack([f.upper for f in sets]),
            coeff=np.stack([f.eq_coeff for f in sets]),
            rhs=np.array([f.eq_rhs for f in sets]),
            D=inj.D,
            Y_b=Y_b,
            delta=delta,
            power_base=power_base,
            ids=tuple(ev.id for ev in fleet),
            injection=inj,
            network=net,
            buses=tuple(ev.bus for ev in fleet),
            meta=dict(meta or {}),
        )

    def with_goals(self, goals) -> "ValleyFillingProblem":
        """Same problem with ``sum omega g`` added to the objective."""
        return replace(self, goals=tuple(self.goals) + tuple(goals))

    def without_goals(self) -> "ValleyFillingProblem":
        return replace(self, goals=())

    def with_delta(self, delta: float) -> "ValleyFillingProblem":
        return replace(self, delta=float(delta))

    # -- dimensions ----------------------------------------------------------

    @property
    def load_weight(self) -> float:
        """``1 / S^2``, the weight of the load term."""
        return 1.0 / self.power_base**2

    @property
    def s(self) -> int:
        return self.p_max.size

    @property
    def T(self) -> int:
        return self.P_b.size

    @property
    def n(self) -> int:
        return self.D.shape[0]

    @property
    def n_eq(self) -> int:
        return 0 if self.D_eq is None else self.D_eq.shape[0]

    def feasible_set(self, i: int) -> FeasibleSet:
        return FeasibleSet(self.lower[i], self.upper[i], self.coeff[i], self.rhs[i], agent=self.ids[i])

    def check_profile(self, C) -> np.ndarray:
        """Coerce ``C`` to an (s, T) float array, accepting the stacked form."""
        C = np.asarray(C, dtype=float)
        if C.shape == (self.s * self.T,):
            C = C.reshape(self.s, self.T)
        if C.shape != (self.s, self.T):
            raise ConfigurationError(f"profile must have shape {(self.s, self.T)} or ({self.s * self.T},), got {C.shape}")
        return C

    def check_mu(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if mu.size != self.T * self.n:
            raise ConfigurationError(f"mu must have {self.T * self.n} entries, got {mu.size}")
        return mu.reshape(self.T, self.n)

    def check_lam(self, lam) -> np.ndarray:
        if self.D_eq is None:
            return np.zeros((self.T, 0))
        if lam is None:
            return np.zeros((self.T, self.n_eq))
        lam = np.asarray(lam, dtype=float)
        if lam.size != self.T * self.n_eq:
            raise ConfigurationError(f"lam must have {self.T * self.n_eq} entries")
        return lam.reshape(self.T, self.n_eq)

    # -- evaluation ----------------------------------------------------------

    def total_load(self, C) -> np.ndarray:
        """``P_b + sum_i p_max_i c_i`` (kW)."""
        return self.P_b + self.p_max @ self.check_profile(C)

    def objective(self, C) -> float:
        """``F(C) = 1/2 ||P_b + sum_i p_max_i c_i||^2 / S^2 + delta/2 ||C||^2``."""
        C = self.check_profile(C)
        load = self.P_b + self.p_max @ C
        return 0.5 * self.load_weight * float(load @ load) + 0.5 * self.delta * float(np.sum(C * C))

    def goal_value(self, C) -> float:
        C = self.check_profile(C)
        return float(sum(g.omega * g.value(C) for g in self.goals))

    def total_objective(self, C) -> float:
        return self.objective(C) + self.goal_value(C)

    def objective_gradient(self, C) -> np.ndarray:
        """Gradient of ``F`` only (no goals), shape (s, T)."""
        C = self.check_profile(C)
        load = self.P_b + self.p_max @ C
        return self.load_weight * self.p_max[:, None] * load[None, :] + self.delta * C

    def goal_gradient(self, C) -> np.ndarray:
        C = self.check_profile(C)
        out = np.zeros_like(C)
        for g in self.goals:
            out += g.omega * g.gradient(C)
        return out

    def coupling_residual(self, C) -> np.ndarray:
        """``Y_b - sum_i D_i c_i`` as a (T, n) array; feasible iff all <= 0."""
        C = self.check_profile(C)
        return self.Y_b - C.T @ self.D.T

    def balance_residual(self, C) -> np.ndarray:
        """``sum_i E_i c_i - b_eq``, shape (T, n_eq)."""
        C = self.check_profile(C)
        if self.D_eq is None:
            return np.zeros((self.T, 0))
        return C.T @ self.D_eq.T - self.b_eq

    def lagrangian(self, C, mu, lam=None) -> float:
        C = self.check_profile(C)
        val = self.total_objective(C) + float(np.sum(self.check_mu(mu) * self.coupling_residual(C)))
        if self.D_eq is not None:
            val += float(np.sum(self.check_lam(lam) * self.balance_residual(C)))
        return val

    def lagrangian_grad(self, C, mu, lam=None) -> np.ndarray:
        """Full primal gradient of the Lagrangian, shape (s, T)."""
        C = self.check_profile(C)
        g = self.objective_gradient(C) - (self.check_mu(mu) @ self.D).T
        if self.goals:
            g = g + self.goal_gradient(C)
        if self.D_eq is not None:
            g = g + (self.check_lam(lam) @ self.D_eq).T
        return g

    def lagrangian_grad_primal(self, C, mu, i: int, lam=None) -> np.ndarray:
        """``grad_{c_i} L = p_i (P_b + sum_j p_j c_j) / S^2 - D_i^T mu (+ delta c_i)``."""
        C = self.check_profile(C)
        load = self.P_b + self.p_max @ C
        g = self.load_weight * self.p_max[i] * load + self.delta * C[i] - self.check_mu(mu) @ self.D[:, i]
        for goal in self.goals:
            if i in goal.agents:
                g = g + goal.omega * goal.gradient(C)[i]
        if self.D_eq is not None:
            g = g + self.check_lam(lam) @ self.D_eq[:, i]
        return g

    def lagrangian_grad_dual(self, C) -> np.ndarray:
        """``grad_mu L = Y_b - sum_i D_i c_i``, stacked time-major (length nT)."""
        return self.coupling_residual(C).ravel()

    def lagrangian_grad_lam(self, C) -> np.ndarray:
        return self.balance_residual(C).ravel()

    # -- structure -----------------------------------------------------------

    def hessian_norm(self) -> float:
        """Spectral norm of the Hessian of ``F + sum omega g``.

        ``F`` contributes ``||p_max||^2 / S^2 + delta``; goal Hessians are
        added as an upper bound.
        """
        return float(self.load_weight * (self.p_max @ self.p_max) + self.delta + sum(g.omega * g.hessian_norm() for g in self.goals))

    def hessian(self) -> np.ndarray:
        """Dense Hessian of ``F + sum omega g`` in stacked coordinates."""
        s, T = self.s, self.T
        M = np.kron(self.p_max[None, :], np.eye(T))
        H = self.load_weight * (M.T @ M) + self.delta * np.eye(s * T)
        for g in self.goals:
            K = np.zeros((T, s * T))
            for j, a in enumerate(g.agents):
                K[:, a * T:(a + 1) * T] += np.diag(g.weights[j])
            H += 2.0 * g.omega * K.T @ K
        return H

    def linear_term(self) -> np.ndarray:
        """Linear coefficient ``f`` with ``F + G = 1/2 x^T H x + f^T x + const``."""
        s, T = self.s, self.T
        f = self.load_weight * np.kron(self.p_max, self.P_b)
        for g in self.goals:
            for j, a in enumerate(g.agents):
                f[a * T:(a + 1) * T] += -2.0 * g.omega * g.weights[j] * g.offset
        return f

    def project(self, Z) -> np.ndarray:
        """Agent-wise projection onto ``C_1 x ... x C_s``."""
        return project_rows(self.check_profile(Z), self.lower, self.upper, self.coeff, self.rhs, agents=self.ids)

    def initial_profile(self) -> np.ndarray:
        """Flat feasible start: each EV spreads its energy evenly."""
        return self.project(np.zeros((self.s, self.T)))

    def voltage_pu(self, C) -> np.ndarray | None:
        """Voltage magnitudes (T, n) when built from a network, else None."""
        if self.injection is None:
            return None
        y = self.injection.y_d + self.check_profile(C).T @ self.injection.D.T
        return np.sqrt(np.maximum(y, 0.0))


def objective(prob: ValleyFillingProblem, C) -> float:
    return prob.objective(C)


def lagrangian_grad_primal(prob: ValleyFillingProblem, C, mu, i: int, lam=None) -> np.ndarray:
    return prob.lagrangian_grad_primal(C, mu, i, lam)


def lagrangian_grad_dual(prob: ValleyFillingProblem, C) -> np.ndarray:
    return prob.lagrangian_grad_dual(C)


def strong_convexity_modulus(prob: ValleyFillingProblem) -> float:
    """Certified modulus ``delta + lambda_min(M^T M)`` of ``F``.

    ``M^T M`` (M = [p_1 I ... p_s I]) has eigenvalues ``||p_max||^2`` and, for
    s > 1, zero; goals only add positive semidefinite curvature and are not
    credited.
    """
    lam_min = prob.load_weight * float(prob.p_max @ prob.p_max) if prob.s == 1 else 0.0
    return prob.delta + lam_min


def power_iteration(matvec, dim: int, iters: int = 200, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD operator given as a matvec."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = matvec(v)
        lam_new = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
        if abs(lam_new - lam) <= 1e-12 * max(1.0, abs(lam_new)):
            lam = lam_new
            break
        lam = lam_new
    return lam


def hessian_norm_estimate(prob: ValleyFillingProblem, iters: int = 200) -> float:
    """Power-iteration estimate of the objective Hessian norm (``L_F``)."""
    s, T = prob.s, prob.T

    def matvec(v):
        V = v.reshape(s, T)
        out = prob.load_weight * prob.p_max[:, None] * (prob.p_max @ V)[None, :] + prob.delta * V
        for g in prob.goals:
            r = np.einsum("jt,jt->t", g.weights, V[list(g.agents)])
            for j, a in enumerate(g.agents):
                out[a] += 2.0 * g.omega * g.weights[j] * r
        return out.ravel()

    return power_iteration(matvec, s * T, iters)
