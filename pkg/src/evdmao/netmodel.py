"""Linearized single-phase distribution feeder (LinDistFlow).

Voltages are tracked as squared magnitudes in p.u.^2::

    V(t) = V0 - 2 R P(t) - 2 X Q(t)

with ``R`` and ``X`` the shared-path impedance matrices of a radial feeder.
Per-unit conversion is carried by ``DistributionNetwork.scale`` which maps
ohm * kW to p.u.^2 (``1 / (1000 * base_kv**2)`` for a line-to-neutral base
voltage in kV; 1.0 when impedances are already expressed per unit).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError, InfeasibleError


@dataclass(frozen=True, eq=False)
class DistributionNetwork:
    """Bus topology reduced to the impedance matrices LinDistFlow needs.

    Parameters
    ----------
    R, X : ndarray of shape (n, n)
        Resistance / reactance matrices in ohm.
    v0_pu : float
        Feeder-head voltage magnitude (p.u.).
    v_floor : float
        Lower bound on nodal voltage magnitudes (p.u.).
    scale : float
        Conversion factor from ohm * kW to p.u.^2.
    """

    R: np.ndarray
    X: np.ndarray
    v0_pu: float = 1.0
    v_floor: float = 0.95
    scale: float = 1.0
    names: tuple = field(default=())

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if R.ndim != 2 or R.shape[0] != R.shape[1] or R.shape[0] < 1:
            raise ConfigurationError(f"R must be a non-empty square matrix, got {R.shape}")
        if X.shape != R.shape:
            raise ConfigurationError(f"X shape {X.shape} does not match R shape {R.shape}")
        for name, M in (("R", R), ("X", X)):
            if not np.all(np.isfinite(M)):
                raise ConfigurationError(f"{name} has non-finite entries")
            if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
                raise ConfigurationError(f"{name} must be symmetric")
            if np.any(M < 0):
                raise ConfigurationError(f"{name} must be entrywise nonnegative")
        if not self.v0_pu > 0:
            raise ConfigurationError("v0_pu must be positive")
        if not 0 < self.v_floor < 1:
            raise ConfigurationError("v_floor must lie in (0, 1)")
        if not self.scale > 0:
            raise ConfigurationError("scale must be positive")
        R.setflags(write=False)
        X.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.R.shape[0]

    @property
    def V0(self) -> np.ndarray:
        """Squared slack voltage replicated over buses."""
        return np.full(self.n, self.v0_pu**2)


@dataclass(frozen=True, eq=False)
class BaselineProfile:
    """Uncontrollable per-bus load, shape (n, T), kW and kvar."""

    p_base: np.ndarray
    q_base: np.ndarray | None = None

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.p_base, dtype=float))
        q = np.zeros_like(p) if self.q_base is None else np.atleast_2d(np.asarray(self.q_base, dtype=float))
        if q.shape != p.shape:
            raise ConfigurationError(f"q_base shape {q.shape} does not match p_base shape {p.shape}")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ConfigurationError("baseline profiles must be finite")
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "p_base", p)
        object.__setattr__(self, "q_base", q)

    @property
    def n(self) -> int:
        return self.p_base.shape[0]

    @property
    def T(self) -> int:
        return self.p_base.shape[1]

    @property
    def agg_load(self) -> np.ndarray:
        """Network-wide baseline ``P_b(t) = sum_l p_base(l, t)``."""
        return self.p_base.sum(axis=0)


@dataclass(frozen=True, eq=False)
class InjectionModel:
    """Affine map from fleet charging rates to squared nodal voltages.

    ``y(t) = y_d[t] + D @ C(t)`` where ``y_d`` has shape (T, n).
    """

    G: np.ndarray
    p_max: np.ndarray
    D: np.ndarray
    y_d: np.ndarray

    @property
    def Pbar(self) -> np.ndarray:
        return np.diag(self.p_max)

    @property
    def n(self) -> int:
        return self.D.shape[0]

    @property
    def s(self) -> int:
        return self.D.shape[1]

    @property
    def T(self) -> int:
        return self.y_d.shape[0]

    def stacked_y_d(self) -> np.ndarray:
        """Time-major stacking ``[y_d(0); y_d(1); ...]`` of length nT."""
        return self.y_d.ravel()

    def lifted_block(self, i: int) -> np.ndarray:
        """Time-block-diagonal lift of column ``i`` of D, shape (nT, T)."""
        return np.kron(np.eye(self.T), self.D[:, [i]])


def _check_net_base(net: DistributionNetwork, base: BaselineProfile) -> None:
    if base.n != net.n:
        raise ConfigurationError(f"baseline has {base.n} buses, network has {net.n}")


def baseline_voltage_drop(net: DistributionNetwork, base: BaselineProfile, t: int) -> np.ndarray:
    """Squared-voltage drop ``V_b(t) = 2 R p_base(t) + 2 X q_base(t)``.

    Raises
    ------
    ConfigurationError
        On dimension mismatch or an out-of-range time index.
    InfeasibleError
        If the baseline alone pulls some bus to a nonpositive squared voltage.
    """
    _check_net_base(net, base)
    if not 0 <= t < base.T:
        raise ConfigurationError(f"time index {t} outside [0, {base.T})")
    vb = 2.0 * net.scale * (net.R @ base.p_base[:, t] + net.X @ base.q_base[:, t])
    if np.any(net.V0 - vb <= 0):
        bad = int(np.argmin(net.V0 - vb))
        raise InfeasibleError(f"baseline load drives bus {bad} to nonpositive voltage at t={t}")
    return vb


def aggregation_matrix(buses: Sequence[int], n: int) -> np.ndarray:
    """Bus-EV incidence ``G`` (n x s) with a single 1 per column."""
    buses = np.asarray(buses, dtype=int)
    if buses.size and (buses.min() < 0 or buses.max() >= n):
        bad = int(buses[(buses < 0) | (buses >= n)][0])
        raise ConfigurationError(f"EV assigned to nonexistent bus {bad} (network has {n} buses)")
    G = np.zeros((n, buses.size))
    G[buses, np.arange(buses.size)] = 1.0
    return G


def build_injection_model(net: DistributionNetwork, fleet, base: BaselineProfile) -> InjectionModel:
    """Assemble ``D = -2 R G Pbar`` and the baseline-adjusted voltages ``y_d``."""
    _check_net_base(net, base)
    G = aggregation_matrix([ev.bus for ev in fleet], net.n)
    p_max = np.array([ev.p_max for ev in fleet], dtype=float)
    D = -2.0 * net.scale * (net.R @ G) * p_max[None, :]
    y_d = np.stack([net.V0 - baseline_voltage_drop(net, base, t) for t in range(base.T)])
    for arr in (G, p_max, D, y_d):
        arr.setflags(write=False)
    return InjectionModel(G=G, p_max=p_max, D=D, y_d=y_d)


def nodal_voltages(inj: InjectionModel, C: np.ndarray, t: int | None = None) -> np.ndarray:
    """Squared nodal voltages.

    ``C`` is the fleet profile of shape (s, T). With ``t`` given returns the
    n-vector ``y(t)``; otherwise the (T, n) array for every time step.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape != (inj.s, inj.T):
        raise ConfigurationError(f"fleet profile must have shape {(inj.s, inj.T)}, got {C.shape}")
    if t is None:
        return inj.y_d + C.T @ inj.D.T
    if not 0 <= t < inj.T:
        raise ConfigurationError(f"time index {t} outside [0, {inj.T})")
    return inj.y_d[t] + inj.D @ C[:, t]


def voltage_magnitudes(inj: InjectionModel, C: np.ndarray) -> np.ndarray:
    """Voltage magnitudes in p.u. (square root taken at output time)."""
    return np.sqrt(np.maximum(nodal_voltages(inj, C), 0.0))


# -- feeder files --------------------------------------------------------------

def path_impedance_matrices(n: int, lines: Sequence[dict], root: int = 0):
    """Shared-path impedance matrices of a radial feeder.

    ``R[i, j]`` is the total resistance of the lines common to the paths from
    ``root`` to buses ``i`` and ``j``; likewise for ``X``.
    """
    parent = {root: None}
    adj = {b: [] for b in range(n)}
    for k, ln in enumerate(lines):
        a, b = int(ln["from"]), int(ln["to"])
        if not (0 <= a < n and 0 <= b < n):
            raise ConfigurationError(f"line {k} references a bus outside [0, {n})")
        adj[a].append((b, k))
        adj[b].append((a, k))
    if len(lines) != n - 1:
        raise ConfigurationError(f"radial feeder with {n} buses needs {n - 1} lines, got {len(lines)}")
    order = [root]
    via = {root: None}
    for bus in order:
        for nxt, k in adj[bus]:
            if nxt not in via:
                via[nxt] = k
                parent[nxt] = bus
                order.append(nxt)
    if len(order) != n:
        raise ConfigurationError("feeder is not connected")
    paths = {root: []}
    for bus in order[1:]:
        paths[bus] = paths[parent[bus]] + [via[bus]]
    r = np.array([float(ln["r_ohm"]) for ln in lines])
    x = np.array([float(ln["x_ohm"]) for ln in lines])
    R = np.zeros((n, n))
    X = np.zeros((n, n))
    for i in range(n):
        pi = set(paths[i])
        for j in range(i, n):
            common = list(pi.intersection(paths[j]))
            R[i, j] = R[j, i] = r[common].sum()
            X[i, j] = X[j, i] = x[common].sum()
    return R, X


def load_network(path) -> DistributionNetwork:
    """Read a feeder JSON file ``{n, lines, v0_pu, v_floor_pu[, base_kv]}``."""
    doc = json.loads(Path(path).read_text())
    try:
        n = int(doc["n"])
        R, X = path_impedance_matrices(n, doc["lines"], root=int(doc.get("root", 0)))
        base_kv = doc.get("base_kv")
        scale = 1.0 if base_kv is None else 1.0 / (1000.0 * float(base_kv) ** 2)
        return DistributionNetwork(
            R=R,
            X=X,
            v0_pu=float(doc["v0_pu"]),
            v_floor=float(doc["v_floor_pu"]),
            scale=scale,
            names=tuple(doc.get("names", ())),
        )
    except KeyError as exc:
        raise ConfigurationError(f"network file {path} missing field {exc}") from None


def load_baseline(path, q_path=None, n: int | None = None) -> BaselineProfile:
    """Read per-bus baseline CSV(s) with header ``bus,t0,t1,...``."""

    def read(p):
        with open(p, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], [r for r in rows[1:] if r]
        if not header or header[0].strip() != "bus":
            raise ConfigurationError(f"{p}: header must start with 'bus'")
        T = len(header) - 1
        size = n if n is not None else 1 + max(int(r[0]) for r in body)
        out = np.zeros((size, T))
        for r in body:
            if len(r) != T + 1:
                raise ConfigurationError(f"{p}: row for bus {r[0]} has {len(r) - 1} values, expected {T}")
            b = int(r[0])
            if not 0 <= b < size:
                raise ConfigurationError(f"{p}: bus {b} outside [0, {size})")
            out[b] = [float(v) for v in r[1:]]
        return out

    p = read(path)
    q = read(q_path) if q_path is not None else None
    return BaselineProfile(p_base=p, q_base=q)


def write_baseline(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bus"] + [f"t{t}" for t in range(values.shape[1])])
        for b, row in enumerate(values):
            w.writerow([b] + [repr(float(v)) for v in row])
