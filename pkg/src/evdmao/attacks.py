"""Attack engine: primal gradient injections, stealth gating and dual attacks.

Primal attacks add ``omega * grad g(c)`` to the update direction of the
compromised agents; by construction SPDS then solves ``F + omega g`` instead
of ``F``. Dual attacks reach the same effect without touching the
attacker's own update, by rewriting data on the message bus:

* :class:`DualFull` falsifies the operator's equality-coupling data with
  ``Phi = omega g(C) lam / ||lam||^2``. The operator's broadcast gradient
  then carries ``grad_C(lam^T Phi) = omega grad g``.
* :class:`DualPowerBalance` hibernates until the residual drops below
  ``eps_s``, snapshots the bus balance from wiretapped reports and feeds the
  victims the gradient of ``omega ||cbar - sum_l rho_l c_l||^2``.

Time indices in ``theta`` and the battery-damage pattern are 1-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .comms import DOWNLINK, UPLINK, ChannelTap, MessageBus
from .exceptions import ConfigurationError
from .fleet import project_rows
from .problem import QuadraticGoal, ValleyFillingProblem

DEFAULT_M_SMALL = 0.2
DEFAULT_M_LARGE = 1e5


def _check_omega(omega, name="omega"):
    if not (np.isfinite(omega) and omega > 0):
        raise ConfigurationError(f"{name} must be a positive finite number, got {omega}")


def _check_weights(m, M):
    if not (0 < m < M and np.isfinite(M)):
        raise ConfigurationError(f"reshape weights need 0 < m < M, got m={m}, M={M}")


# -- reshape matrices ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReshapeMatrix:
    """Diagonal weighting ``A`` of a goal ``||A c||^2``."""

    diag: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.diag, dtype=float).reshape(-1)
        if d.size == 0 or np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise ConfigurationError("reshape matrix needs a positive finite diagonal")
        d.setflags(write=False)
        object.__setattr__(self, "diag", d)

    @property
    def T(self) -> int:
        return self.diag.size

    def as_matrix(self) -> np.ndarray:
        return np.diag(self.diag)

    def value(self, c) -> float:
        r = self.diag * np.asarray(c, dtype=float)
        return float(r @ r)

    def gradient(self, c) -> np.ndarray:
        return 2.0 * self.diag**2 * np.asarray(c, dtype=float)

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant of the gradient, ``2 max(diag)^2``."""
        return float(2.0 * np.max(self.diag) ** 2)

    @property
    def gradient_bound(self) -> float:
        """Bound of ``||grad g||`` over ``[0, 1]^T``: ``2 ||A^T A|| sqrt(T)``."""
        return float(2.0 * np.max(self.diag) ** 2 * np.sqrt(self.T))

    def goal(self, agent: int, omega: float, label: str = "") -> QuadraticGoal:
        return QuadraticGoal.diagonal(agent, self.diag, omega, label)


def time_tuning_matrix(theta: Sequence[int], m: float = DEFAULT_M_SMALL, M: float = DEFAULT_M_LARGE,
                       T: int | None = None) -> ReshapeMatrix:
    """``A`` with ``m`` on the preferred 1-based slots ``theta`` and ``M`` elsewhere."""
    _check_weights(m, M)
    if T is None or T < 1:
        raise ConfigurationError("horizon T must be a positive integer")
    theta = sorted(set(int(t) for t in theta))
    if not theta:
        raise ConfigurationError("time tuning needs a nonempty preferred set theta")
    if theta[0] < 1 or theta[-1] > T:
        raise ConfigurationError(f"theta entries must lie in 1..{T}")
    d = np.full(T, float(M))
    d[np.asarray(theta) - 1] = m
    return ReshapeMatrix(d)


def battery_damage_matrix(t_f: int, m: float = DEFAULT_M_SMALL, M: float = DEFAULT_M_LARGE,
                          T: int | None = None) -> ReshapeMatrix:
    """``A_hat`` with ``m`` at 1-based slots that are multiples of ``t_f``."""
    _check_weights(m, M)
    if int(t_f) != t_f or t_f < 1:
        raise ConfigurationError(f"oscillation period t_f must be an integer >= 1, got {t_f}")
    if T is None or T < 1:
        raise ConfigurationError("horizon T must be a positive integer")
    t_hat = np.arange(1, T + 1)
    return ReshapeMatrix(np.where(t_hat % int(t_f) == 0, float(m), float(M)))


def rush_charging_theta(coeff, rhs: float, upper=None) -> tuple:
    """Shortest 1-based prefix ``{1..L}`` able to deliver ``rhs`` at full rate.

    Rush charging is time tuning with this prefix as the preferred set.
    """
    coeff = np.asarray(coeff, dtype=float)
    cap = coeff if upper is None else coeff * np.asarray(upper, dtype=float)
    cum = np.cumsum(cap)
    L = int(np.searchsorted(cum, rhs * (1 - 1e-12)) + 1)
    if L > coeff.size:
        raise ConfigurationError("energy request cannot be met even at full rate")
    return tuple(range(1, L + 1))


# -- attack specifications ----------------------------------------------------


@dataclass(frozen=True)
class SmoothCharging:
    attacker: int
    omega: float = 1.0
    kind = "smooth"

    def __post_init__(self):
        _check_omega(self.omega)

    def reshape(self, T: int) -> ReshapeMatrix:
        return ReshapeMatrix(np.ones(T))

    @property
    def agents(self) -> tuple:
        return (self.attacker,)

    @property
    def owner(self):
        return self.attacker


@dataclass(frozen=True)
class TimeTuning:
    attacker: int
    theta: tuple
    omega: float = 1.0
    m: float = DEFAULT_M_SMALL
    M: float = DEFAULT_M_LARGE
    kind = "time_tuning"

    def __post_init__(self):
        _check_omega(self.omega)
        _check_weights(self.m, self.M)
        object.__setattr__(self, "theta", tuple(int(t) for t in self.theta))
        if not self.theta:
            raise ConfigurationError("time tuning needs a nonempty preferred set theta")

    def reshape(self, T: int) -> ReshapeMatrix:
        return time_tuning_matrix(self.theta, self.m, self.M, T)

    @property
    def agents(self) -> tuple:
        return (self.attacker,)

    @property
    def owner(self):
        return self.attacker


@dataclass(frozen=True)
class BatteryDamage:
    victims: tuple
    omega: float = 1.0
    t_f: int = 2
    m: float = DEFAULT_M_SMALL
    M: float = DEFAULT_M_LARGE
    attacker: object = None
    kind = "battery_damage"

    def __post_init__(self):
        _check_omega(self.omega)
        _check_weights(self.m, self.M)
        object.__setattr__(self, "victims", tuple(int(v) for v in self.victims))
        if int(self.t_f) != self.t_f or self.t_f < 1:
            raise ConfigurationError(f"oscillation period t_f must be an integer >= 1, got {self.t_f}")

    def reshape(self, T: int) -> ReshapeMatrix:
        return battery_damage_matrix(self.t_f, self.m, self.M, T)

    @property
    def agents(self) -> tuple:
        return self.victims

    @property
    def owner(self):
        return self.attacker if self.attacker is not None else "battery_damage"


PrimalSpec = Union[SmoothCharging, TimeTuning, BatteryDamage]


@dataclass(frozen=True)
class Stealthy:
    """Wraps an attack so it hibernates until the residual drops below ``eps_s``.

    ``eps_s=None`` resolves to ten times the solver's ``eps`` at bind time.
    """

    inner: object
    eps_s: float | None = None
    kind = "stealthy"

    def __post_init__(self):
        if isinstance(self.inner, Stealthy):
            raise ConfigurationError("Stealthy wrappers do not nest")
        if self.eps_s is not None and not self.eps_s >= 0:
            raise ConfigurationError("eps_s must be nonnegative")

    @property
    def owner(self):
        return self.inner.owner


@dataclass(frozen=True)
class DualFull:
    """Operator-side falsification reproducing the primal goal of ``goal``."""

    attacker: int
    goal: PrimalSpec
    omega: float = 1.0
    kind = "dual_full"

    def __post_init__(self):
        _check_omega(self.omega)
        if not isinstance(self.goal, (SmoothCharging, TimeTuning, BatteryDamage)):
            raise ConfigurationError("DualFull goal must be a primal attack descriptor")

    @property
    def owner(self):
        return self.attacker


@dataclass(frozen=True)
class DualPowerBalance:
    """Power-balance falsification through the channels of same-bus victims.

    ``cbar`` selects the balance target: ``"snapshot"`` uses the wiretapped
    ``c_i + sum_l rho_l c_l`` at gate activation; ``"goal"`` replaces the
    attacker's own part by its goal-optimal profile (flat for smooth
    charging); an array is used verbatim.
    """

    attacker: int
    victims: tuple
    omega: float = 0.1
    eps_s: float | None = None
    cbar: object = "snapshot"
    goal: PrimalSpec | None = None
    kind = "dual_power_balance"

    def __post_init__(self):
        _check_omega(self.omega)
        object.__setattr__(self, "victims", tuple(int(v) for v in self.victims))
        if self.attacker in self.victims:
            raise ConfigurationError("the attacker cannot be its own victim")
        if self.eps_s is not None and not self.eps_s >= 0:
            raise ConfigurationError("eps_s must be nonnegative")
        if isinstance(self.cbar, str) and self.cbar not in ("snapshot", "goal"):
            raise ConfigurationError(f"cbar must be 'snapshot', 'goal' or a vector, got {self.cbar!r}")

    @property
    def owner(self):
        return self.attacker


AttackSpec = Union[SmoothCharging, TimeTuning, BatteryDamage, Stealthy, DualFull, DualPowerBalance]
PRIMAL_KINDS = (SmoothCharging, TimeTuning, BatteryDamage)


def attack_label(spec) -> str:
    if isinstance(spec, Stealthy):
        return "stealthy_" + attack_label(spec.inner)
    return spec.kind if spec.owner == spec.kind else f"{spec.kind}_{spec.owner}"


# -- validation and goals -----------------------------------------------------


def _index(prob: ValleyFillingProblem, agent_id) -> int:
    try:
        return prob.ids.index(agent_id)
    except ValueError:
        raise ConfigurationError(f"attack refers to unknown EV id {agent_id!r}") from None


def validate_attack(spec, prob: ValleyFillingProblem) -> None:
    """Check an attack spec against problem dimensions and topology."""
    if isinstance(spec, Stealthy):
        if isinstance(spec.inner, (DualFull, DualPowerBalance)):
            raise ConfigurationError("wrap primal attacks only; dual attacks carry their own gate")
        validate_attack(spec.inner, prob)
        return
    if isinstance(spec, PRIMAL_KINDS):
        for a in spec.agents:
            _index(prob, a)
        spec.reshape(prob.T)
        if isinstance(spec, BatteryDamage) and not spec.victims:
            raise ConfigurationError("battery damage needs at least one victim")
        return
    if isinstance(spec, DualFull):
        _index(prob, spec.attacker)
        validate_attack(spec.goal, prob)
        if prob.D_eq is None:
            raise ConfigurationError("DualFull needs a problem with an equality coupling to falsify")
        return
    if isinstance(spec, DualPowerBalance):
        i = _index(prob, spec.attacker)
        for v in spec.victims:
            j = _index(prob, v)
            if prob.buses and prob.buses[j] != prob.buses[i]:
                raise ConfigurationError(
                    f"victim {v} sits on bus {prob.buses[j]}, attacker {spec.attacker} on bus {prob.buses[i]}"
                )
        if not isinstance(spec.cbar, str) and np.asarray(spec.cbar).shape != (prob.T,):
            raise ConfigurationError(f"cbar vector must have length {prob.T}")
        if spec.goal is not None:
            validate_attack(spec.goal, prob)
        return
    raise ConfigurationError(f"unknown attack spec {type(spec).__name__}")


def attack_goals(spec, prob: ValleyFillingProblem) -> list[QuadraticGoal]:
    """The objective terms ``omega g`` a spec adds, in problem index space.

    This is the reference form of primal attacks. Power-balance
    falsification has no fixed goal before its snapshot and returns none.
    """
    if isinstance(spec, Stealthy):
        return attack_goals(spec.inner, prob)
    if isinstance(spec, PRIMAL_KINDS):
        A = spec.reshape(prob.T)
        label = attack_label(spec)
        return [A.goal(_index(prob, a), spec.omega, label) for a in spec.agents]
    if isinstance(spec, DualFull):
        return [replace(g, omega=spec.omega) for g in attack_goals(spec.goal, prob)]
    return []


def primal_injection(spec, c, k: int | None = None) -> np.ndarray:
    """``omega grad g(c)`` for one compromised agent's profile ``c``.

    SmoothCharging gives ``2 omega c``; TimeTuning and BatteryDamage give
    ``2 omega A^T A c``.
    """
    if isinstance(spec, Stealthy):
        spec = spec.inner
    if not isinstance(spec, PRIMAL_KINDS):
        raise ConfigurationError(f"{type(spec).__name__} is not a primal attack")
    c = np.asarray(c, dtype=float)
    return spec.omega * spec.reshape(c.size).gradient(c)


def goal_target_profile(A: ReshapeMatrix, lower, upper, coeff, rhs) -> np.ndarray:
    """Minimizer of ``||A c||^2`` over ``{lower <= c <= upper, coeff . c = rhs}``.

    Substituting ``y = A c`` turns this into the projection of the origin
    onto a box intersected with a hyperplane.
    """
    d = A.diag
    y = project_rows(np.zeros((1, d.size)), (d * lower)[None], (d * upper)[None], (coeff / d)[None],
                     np.array([rhs]))[0]
    return y / d


# -- dual attack formulas -----------------------------------------------------


def dual_injection_full(C, lam, goals: Sequence[QuadraticGoal], omega: float | None = None) -> np.ndarray:
    """Falsification term ``Phi = G(C) lam / ||lam||^2`` (zero when ``lam = 0``).

    ``G = sum omega_j g_j`` over ``goals``; passing ``omega`` rescales a
    single unweighted goal set instead.
    """
    lam = np.asarray(lam, dtype=float)
    nrm2 = float(np.sum(lam * lam))
    if nrm2 == 0.0:
        return np.zeros_like(lam)
    G = sum((g.omega if omega is None else omega) * g.value(C) for g in goals)
    return G * lam / nrm2


def dual_full_gradient(C, lam, goals: Sequence[QuadraticGoal], omega: float | None = None) -> np.ndarray:
    """``grad_C (lam^T Phi(C, lam))``, equal to ``grad G(C)`` for ``lam != 0``."""
    C = np.asarray(C, dtype=float)
    if not np.any(np.asarray(lam)):
        return np.zeros_like(C)
    out = np.zeros_like(C)
    for g in goals:
        out += (g.omega if omega is None else omega) * g.gradient(C)
    return out


def power_balance_falsification(omega: float, rho, cbar, victim_profiles) -> np.ndarray:
    """Per-victim perturbations ``omega grad ||cbar - sum_l rho_l c_l||^2``.

    Parameters
    ----------
    rho : (v,) coupling weights of the victims relative to the attacker
    victim_profiles : (v, T) current victim reports

    Returns
    -------
    (v, T) array; row l is added to victim l's received gradient.
    """
    rho = np.asarray(rho, dtype=float)
    V = np.asarray(victim_profiles, dtype=float).reshape(rho.size, -1)
    if rho.size == 0:
        return V.copy()
    r = np.asarray(cbar, dtype=float) - rho @ V
    return -2.0 * omega * rho[:, None] * r[None, :]


def balance_weights(prob: ValleyFillingProblem, i: int, victims: Sequence[int]) -> np.ndarray:
    """Victim weights ``rho_l = D[r, l] / D[r, i]`` on the attacker's strongest coupling row (inequality rows first, then balance rows).

    For EVs sharing a bus this is ``p_max_l / p_max_i``.
    """
    victims = list(victims)
    if not victims:
        return np.zeros(0)
    rows = np.vstack([prob.D] + ([prob.D_eq] if prob.D_eq is not None else []))
    col = rows[:, i]
    if not col.size or not np.any(col):
        return prob.p_max[victims] / prob.p_max[i]
    r = int(np.argmax(np.abs(col)))
    return rows[r, victims] / col[r]


# -- stealth gate -------------------------------------------------------------


@dataclass(eq=False)
class StealthGate:
    """Latched activation on the observed residual.

    At round ``k`` the attacker observes ``res[k-1]`` (the primal change of
    the previous round). The gate opens at the first observation strictly
    below ``eps_s``; ``activation_round`` is that trace index ``l`` and
    injections happen for rounds ``k > l``.
    """

    eps_s: float
    is_open: bool = False
    activation_round: int | None = None
    snapshot: dict = field(default_factory=dict)
    _last_k: int = -1

    def observe(self, k: int, residual: float) -> bool:
        if k != self._last_k:
            self._last_k = k
            if not self.is_open and residual < self.eps_s:
                self.is_open = True
                self.activation_round = k - 1
        return self.is_open


def stealth_filter(gate: StealthGate, residual: float, k: int) -> bool:
    """Feed the residual observed at round ``k`` to ``gate``; True when open."""
    return gate.observe(k, residual)


def activation_round_from_trace(residuals: Sequence[float], eps_s: float) -> int | None:
    """Replay prediction: first index ``l`` with ``residuals[l] < eps_s``."""
    for l, r in enumerate(residuals):
        if r < eps_s:
            return l
    return None


# -- runtime binding ----------------------------------------------------------


class AttackRuntime:
    """An attack bound to a problem: latched state, injections and taps.

    ``primal_term`` is evaluated by the compromised agents during their own
    update; ``taps`` go on the message bus. ``last_norm`` is the norm of the
    perturbation applied in the current round (reset by the solver).
    """

    def __init__(self, spec, prob: ValleyFillingProblem, eps: float):
        validate_attack(spec, prob)
        self.spec = spec
        self.label = attack_label(spec)
        self.owner = spec.owner
        self.problem = prob
        self.last_norm = 0.0
        inner = spec.inner if isinstance(spec, Stealthy) else spec
        self.inner = inner
        self.gate: StealthGate | None = None
        if isinstance(spec, Stealthy):
            self.gate = StealthGate(10.0 * eps if spec.eps_s is None else spec.eps_s)
        elif isinstance(spec, DualPowerBalance):
            self.gate = StealthGate(10.0 * eps if spec.eps_s is None else spec.eps_s)
        self.is_primal = isinstance(inner, PRIMAL_KINDS)
        if self.is_primal:
            self.rows = np.array([_index(prob, a) for a in inner.agents], dtype=int)
            self.diag2 = inner.reshape(prob.T).diag ** 2
        self.goals = attack_goals(spec, prob)
        self.phi_norm = 0.0
        if isinstance(spec, DualPowerBalance):
            i = _index(prob, spec.attacker)
            self.rho = balance_weights(prob, i, [_index(prob, v) for v in spec.victims])

    def open(self, k: int, residual: float) -> bool:
        return True if self.gate is None else self.gate.observe(k, residual)

    @property
    def gate_open(self) -> bool:
        return True if self.gate is None else self.gate.is_open

    def curvature(self) -> np.ndarray:
        """Extra curvature the compromised agents add to their own update.

        Compromised agents know the term they inject, so their step sizes
        account for it; honest agents and dual-attack victims do not.
        """
        out = np.zeros(self.problem.s)
        if self.is_primal:
            out[self.rows] += 2.0 * self.inner.omega * float(self.diag2.max())
        return out

    def primal_term(self, C: np.ndarray, k: int, residual: float) -> np.ndarray | None:
        if not self.is_primal or not self.open(k, residual):
            return None
        term = np.zeros_like(C)
        term[self.rows] = 2.0 * self.inner.omega * self.diag2[None, :] * C[self.rows]
        self.last_norm = float(np.linalg.norm(term[self.rows]))
        return term

    # dual attacks ------------------------------------------------------------

    def install(self, bus: MessageBus) -> list[int]:
        if isinstance(self.spec, DualFull):
            return self._install_full(bus)
        if isinstance(self.spec, DualPowerBalance):
            return self._install_balance(bus)
        return []

    def _install_full(self, bus: MessageBus) -> list[int]:
        prob, spec = self.problem, self.spec
        goals = self.goals
        agents = sorted({a for g in goals for a in g.agents})
        seen: dict[int, np.ndarray] = {}
        handles = []
        rt = self

        def record(j):
            def f(k, payload, state):
                seen[j] = np.array(payload["c"], copy=True)
                return None
            return f

        def inject(j):
            def f(k, payload, state):
                C = np.zeros((prob.s, prob.T))
                for a, c in seen.items():
                    C[a] = c
                lam = payload["lam"]
                rt.phi_norm = float(np.linalg.norm(dual_injection_full(C, lam, goals)))
                grad = dual_full_gradient(C, lam, goals)[j]
                if not np.any(grad):
                    return None
                payload["grad"] = payload["grad"] + grad
                rt.last_norm = float(np.hypot(rt.last_norm, np.linalg.norm(grad)))
                return payload
            return f

        for j in agents:
            aid = prob.ids[j]
            handles.append(bus.register_tap(ChannelTap(aid, UPLINK, record(j), spec.attacker,
                                                       label=f"{self.label}:wiretap:{aid}")))
        for j in agents:
            aid = prob.ids[j]
            handles.append(bus.register_tap(ChannelTap(aid, DOWNLINK, inject(j), spec.attacker,
                                                       label=f"{self.label}:inject:{aid}")))
        return handles

    def balance_target(self, c_att: np.ndarray, victims_now: np.ndarray) -> np.ndarray:
        """``cbar`` from the wiretapped reports at activation."""
        spec, prob = self.spec, self.problem
        if not isinstance(spec.cbar, str):
            return np.asarray(spec.cbar, dtype=float)
        own = c_att
        if spec.cbar == "goal":
            goal = spec.goal or SmoothCharging(spec.attacker)
            i = _index(prob, spec.attacker)
            own = goal_target_profile(goal.reshape(prob.T), prob.lower[i], prob.upper[i], prob.coeff[i], prob.rhs[i])
        return own + self.rho @ victims_now

    def _install_balance(self, bus: MessageBus) -> list[int]:
        prob, spec = self.problem, self.spec
        i = _index(prob, spec.attacker)
        vidx = [_index(prob, v) for v in spec.victims]
        seen: dict[int, np.ndarray] = {}
        gate = self.gate
        rt = self
        handles = []
        if not vidx:
            return handles

        def record(j):
            def f(k, payload, state):
                seen[j] = np.array(payload["c"], copy=True)
                return None
            return f

        def inject(pos):
            def f(k, payload, state):
                if not gate.observe(k, float(np.asarray(payload["residual"]).reshape(-1)[0])):
                    return None
                V = np.stack([seen[j] for j in vidx])
                if "cbar" not in gate.snapshot:
                    gate.snapshot["cbar"] = rt.balance_target(seen[i], V)
                    gate.snapshot["round"] = k
                    gate.snapshot["c_attacker"] = seen[i].copy()
                    gate.snapshot["c_victims"] = V.copy()
                pert = power_balance_falsification(spec.omega, rt.rho, gate.snapshot["cbar"], V)[pos]
                payload["grad"] = payload["grad"] + pert
                rt.last_norm = float(np.hypot(rt.last_norm, np.linalg.norm(pert)))
                return payload
            return f

        # wiretaps on the attacker's own report and the victims' reports
        for j in [i, *vidx]:
            aid = prob.ids[j]
            handles.append(bus.register_tap(ChannelTap(aid, UPLINK, record(j), spec.attacker,
                                                       label=f"{self.label}:wiretap:{aid}")))
        for pos, j in enumerate(vidx):
            aid = prob.ids[j]
            handles.append(bus.register_tap(ChannelTap(aid, DOWNLINK, inject(pos), spec.attacker,
                                                       label=f"{self.label}:inject:{aid}")))
        return handles

    @property
    def is_dual(self) -> bool:
        return isinstance(self.spec, (DualFull, DualPowerBalance))


def bind_attacks(specs: Sequence, prob: ValleyFillingProblem, eps: float) -> list[AttackRuntime]:
    runtimes = [AttackRuntime(s, prob, eps) for s in specs]
    labels = [r.label for r in runtimes]
    dup = {l for l in labels if labels.count(l) > 1}
    if dup:
        raise ConfigurationError(f"duplicate attack labels {sorted(dup)}")
    return runtimes
