"""EV specifications, local feasible sets and their Euclidean projection.

Each EV charges at a percentage rate ``c(t)`` in ``[0, 1]`` and must receive
its requested energy over the horizon::

    C_i = {c : lower <= c <= upper, sum_t coeff(t) c(t) = E_req}

with ``coeff(t) = eta * dt * p_max``. The projection onto ``C_i`` is a
continuous quadratic knapsack problem; it is solved exactly by a breakpoint
search on the scalar multiplier of the energy row, vectorized across agents.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError, InfeasibleError

FLEET_HEADER = ["id", "bus", "p_max_kw", "eta", "cap_kwh", "soc_ini", "soc_des"]


@dataclass(frozen=True)
class EvSpec:
    """Charging physics of a single EV (kW, kWh, hours)."""

    id: int
    bus: int
    p_max: float
    eta: float
    cap: float
    soc_ini: float
    soc_des: float
    dt: float = 0.25

    def __post_init__(self):
        if not 0 <= self.soc_ini <= self.soc_des <= 1:
            raise ConfigurationError(f"EV {self.id}: need 0 <= soc_ini <= soc_des <= 1")
        if not self.p_max > 0:
            raise ConfigurationError(f"EV {self.id}: p_max must be positive")
        if not 0 < self.eta <= 1:
            raise ConfigurationError(f"EV {self.id}: eta must lie in (0, 1]")
        if not self.dt > 0:
            raise ConfigurationError(f"EV {self.id}: dt must be positive")
        if not self.cap >= 0:
            raise ConfigurationError(f"EV {self.id}: cap must be nonnegative")


def energy_requirement(spec: EvSpec) -> float:
    """Energy still to be delivered, ``cap * (soc_des - soc_ini)`` in kWh."""
    return spec.cap * (spec.soc_des - spec.soc_ini)


@dataclass(frozen=True, eq=False)
class FeasibleSet:
    """Box intersected with one energy hyperplane, for a horizon of length T."""

    lower: np.ndarray
    upper: np.ndarray
    eq_coeff: np.ndarray
    eq_rhs: float
    agent: int | None = None

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=float).copy() for a in (self.lower, self.upper, self.eq_coeff)]
        if len({a.shape for a in arrs}) != 1 or arrs[0].ndim != 1:
            raise ConfigurationError("lower, upper and eq_coeff must be 1-d of equal length")
        lo, up, a = arrs
        if np.any(lo > up):
            raise ConfigurationError(f"agent {self.agent}: lower bound exceeds upper bound")
        if np.any(a < 0):
            raise ConfigurationError(f"agent {self.agent}: energy coefficients must be nonnegative")
        for arr in arrs:
            arr.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)
        object.__setattr__(self, "eq_coeff", a)
        object.__setattr__(self, "eq_rhs", float(self.eq_rhs))

    @property
    def T(self) -> int:
        return self.lower.size

    @property
    def energy_range(self) -> tuple[float, float]:
        return float(self.eq_coeff @ self.lower), float(self.eq_coeff @ self.upper)

    def is_empty(self, rtol: float = 1e-12) -> bool:
        lo, hi = self.energy_range
        slack = rtol * max(1.0, abs(self.eq_rhs))
        return not (lo - slack <= self.eq_rhs <= hi + slack)

    def contains(self, c, tol: float = 1e-9) -> bool:
        c = np.asarray(c, dtype=float)
        box = np.all(c >= self.lower - tol) and np.all(c <= self.upper + tol)
        return bool(box and abs(self.eq_coeff @ c - self.eq_rhs) <= tol * max(1.0, abs(self.eq_rhs)))

    @classmethod
    def from_spec(cls, spec: EvSpec, T: int, window: tuple[int, int] | None = None) -> "FeasibleSet":
        """Feasible set of ``spec`` over ``T`` steps.

        ``window=(start, stop)`` optionally pins the rate to zero outside the
        plug-in interval ``[start, stop)``.
        """
        upper = np.ones(T)
        if window is not None:
            start, stop = window
            if not 0 <= start < stop <= T:
                raise ConfigurationError(f"EV {spec.id}: plug-in window {window} outside horizon")
            upper[:start] = 0.0
            upper[stop:] = 0.0
        coeff = np.full(T, spec.eta * spec.dt * spec.p_max)
        fs = cls(np.zeros(T), upper, coeff, energy_requirement(spec), agent=spec.id)
        if fs.is_empty():
            lo, hi = fs.energy_range
            raise InfeasibleError(
                f"EV {spec.id}: requested {fs.eq_rhs:.6g} kWh outside deliverable range [{lo:.6g}, {hi:.6g}]",
                agent=spec.id,
            )
        return fs


def stacked_energy_row(fleet: Sequence[EvSpec], i: int, T: int) -> np.ndarray:
    """Energy row of agent ``i`` built from the stacked direct-sum matrices.

    ``B = diag(-eta_j dt p_max_j)``, ``B_i,l`` repeats the i-th column of B
    over T columns, and the row is ``1_s^T B_i,l``. Used to check that the
    scalar form ``-eq_coeff`` is the same object.
    """
    B = np.diag([-ev.eta * ev.dt * ev.p_max for ev in fleet])
    B_il = np.repeat(B[:, [i]], T, axis=1)
    return np.ones(len(fleet)) @ B_il


# -- projection ----------------------------------------------------------------

def project_rows(Z, lower, upper, coeff, rhs, agents=None) -> np.ndarray:
    """Row-wise Euclidean projection onto ``{l <= x <= u, a.x = b}``.

    All array arguments are broadcast to shape (s, T) except ``rhs`` (s,).
    For each row the solution is ``clip(z + theta * a, l, u)`` where the
    scalar ``theta`` zeroes the energy residual; ``theta`` is located among
    the sorted breakpoints of this piecewise-linear monotone map and then
    recovered exactly by linear interpolation.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    s, T = Z.shape
    L = np.broadcast_to(np.asarray(lower, dtype=float), (s, T))
    U = np.broadcast_to(np.asarray(upper, dtype=float), (s, T))
    A = np.broadcast_to(np.asarray(coeff, dtype=float), (s, T))
    b = np.broadcast_to(np.asarray(rhs, dtype=float), (s,))

    e_lo = np.einsum("ij,ij->i", A, L)
    e_hi = np.einsum("ij,ij->i", A, U)
    slack = 1e-12 * np.maximum(1.0, np.abs(b))
    bad = (b < e_lo - slack) | (b > e_hi + slack)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        who = agents[k] if agents is not None else k
        raise InfeasibleError(
            f"agent {who}: energy {b[k]:.6g} outside deliverable range [{e_lo[k]:.6g}, {e_hi[k]:.6g}]",
            agent=who,
        )

    active = A > 0
    safe = np.where(active, A, 1.0)
    # theta at which each coordinate leaves its lower bound / reaches its upper bound
    b_lo = np.where(active, (L - Z) / safe, 0.0)
    b_hi = np.where(active, (U - Z) / safe, 0.0)
    bp = np.concatenate([b_lo, b_hi], axis=1)
    dslope = np.concatenate([np.where(active, A * A, 0.0), np.where(active, -A * A, 0.0)], axis=1)
    order = np.argsort(bp, axis=1, kind="stable")
    bp = np.take_along_axis(bp, order, axis=1)
    slope = np.cumsum(np.take_along_axis(dslope, order, axis=1), axis=1)
    # energy delivered at each breakpoint; coordinates with a == 0 carry no energy
    h = np.empty_like(bp)
    h[:, 0] = e_lo
    h[:, 1:] = e_lo[:, None] + np.cumsum(slope[:, :-1] * np.diff(bp, axis=1), axis=1)

    k = np.sum(h <= b[:, None], axis=1) - 1
    k = np.clip(k, 0, 2 * T - 1)
    rows = np.arange(s)
    hk = h[rows, k]
    sk = slope[rows, k]
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = bp[rows, k] + np.where(sk > 0, (b - hk) / np.where(sk > 0, sk, 1.0), 0.0)
    X = np.clip(Z + theta[:, None] * A, L, U)
    # clamp away rounding: coordinates with zero coefficient are plain clips
    X = np.where(active, X, np.clip(Z, L, U))
    return X


def project_feasible(c, fset: FeasibleSet) -> np.ndarray:
    """Euclidean projection of ``c`` onto ``fset``.

    Raises
    ------
    InfeasibleError
        If ``fset`` is empty; the error names the agent.
    """
    c = np.asarray(c, dtype=float)
    if c.shape != (fset.T,):
        raise ConfigurationError(f"profile has shape {c.shape}, expected ({fset.T},)")
    return project_rows(
        c[None, :], fset.lower, fset.upper, fset.eq_coeff, [fset.eq_rhs], agents=[fset.agent]
    )[0]


# -- fleet files ---------------------------------------------------------------

def load_fleet(path, dt: float = 0.25) -> list[EvSpec]:
    """Read a fleet CSV with header ``id,bus,p_max_kw,eta,cap_kwh,soc_ini,soc_des``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in FLEET_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigurationError(f"{path}: fleet header missing columns {missing}")
        fleet = []
        for lineno, row in enumerate(reader, start=2):
            try:
                fleet.append(
                    EvSpec(
                        id=int(row["id"]),
                        bus=int(row["bus"]),
                        p_max=float(row["p_max_kw"]),
                        eta=float(row["eta"]),
                        cap=float(row["cap_kwh"]),
                        soc_ini=float(row["soc_ini"]),
                        soc_des=float(row["soc_des"]),
                        dt=dt,
                    )
                )
            except ValueError as exc:
                raise ConfigurationError(f"{path}:{lineno}: {exc}") from None
    return fleet


def write_fleet(path_or_file, fleet: Sequence[EvSpec]) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FLEET_HEADER)
        for ev in fleet:
            w.writerow([ev.id, ev.bus, repr(ev.p_max), repr(ev.eta), repr(ev.cap), repr(ev.soc_ini), repr(ev.soc_des)])
    finally:
        if own:
            fh.close()


def generate_fleet(seed: int, count: int, buses: Sequence[int], dt: float = 0.25,
                   horizon: int = 48, first_bus: int | None = None, first_count: int = 0) -> list[EvSpec]:
    """Draw a synthetic fleet.

    Charger ratings come from {3.3, 6.6, 7.2} kW, capacities from 40-80 kWh
    and state-of-charge targets are chosen so that every EV needs between
    8% and 32% of its full-horizon deliverable energy. The first
    ``first_count`` EVs are placed on ``first_bus``; the rest are spread
    uniformly over ``buses``.
    """
    rng = np.random.default_rng(seed)
    fleet = []
    for k in range(count):
        p_max = float(rng.choice([3.3, 6.6, 7.2], p=[0.2, 0.5, 0.3]))
        eta = float(np.round(rng.uniform(0.88, 0.95), 4))
        cap = float(np.round(rng.uniform(40.0, 80.0), 2))
        deliverable = eta * dt * p_max * horizon
        need = rng.uniform(0.08, 0.32) * min(deliverable, 0.85 * cap)
        soc_des = float(np.round(rng.uniform(0.85, 0.95), 4))
        soc_ini = float(np.round(max(soc_des - need / cap, 0.0), 4))
        bus = first_bus if (first_bus is not None and k < first_count) else int(rng.choice(buses))
        fleet.append(EvSpec(k, int(bus), p_max, eta, cap, soc_ini, soc_des, dt))
    return fleet
