"""Round-based message bus between EV agents and the system operator.

One round is a lock-step exchange::

    agents --PrimalReport--> operator --DualBroadcast--> agents

Every agent sends exactly one report and receives exactly one broadcast per
round. Channel taps sit on individual channels and may read (wiretap) or
rewrite the payload in flight; the round log keeps pre- and post-tap digests
of every message together with the owner of each mutation.

Payloads are dicts of arrays. For speed the bus moves a whole round as one
batch: field ``f`` of the batch has one row per agent (``batch[f][j]`` is
agent j's message) unless the field is shared, in which case every recipient
sees the same value. Taps act on a single agent's message.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, Protocol

import numpy as np

from .exceptions import ConfigurationError, ProtocolError


class MessageKind(str, Enum):
    PRIMAL_REPORT = "primal_report"
    DUAL_BROADCAST = "dual_broadcast"


UPLINK = "uplink"  # agent -> operator
DOWNLINK = "downlink"  # operator -> agent
OPERATOR = "operator"


@dataclass(frozen=True)
class Message:
    """A single logical message, materialized for inspection and logging."""

    kind: MessageKind
    round: int
    sender: object
    recipient: object
    payload: dict


@dataclass(eq=False)
class ChannelTap:
    """Interception point on one channel.

    Parameters
    ----------
    agent : agent id whose channel is tapped
    direction : ``"uplink"`` (the agent's report) or ``"downlink"`` (the
        broadcast the agent receives)
    transform : callable ``(round, payload, state) -> payload or None``.
        Returning None leaves the message untouched (wiretap only). The
        payload handed in is a private copy, so in-place edits are allowed
        as long as the dict is returned.
    owner : attacker id used for audit attribution
    """

    agent: object
    direction: str
    transform: Callable[[int, dict, dict], dict | None]
    owner: object
    state: dict = field(default_factory=dict)
    label: str = ""

    @property
    def channel(self) -> tuple:
        return (self.agent, self.direction)


def wiretap(agent, direction: str, owner, store_key: str = "seen", label: str = "") -> ChannelTap:
    """Identity tap that keeps the latest payload in ``state[store_key]``."""

    def record(k, payload, state):
        state[store_key] = {f: np.array(v, copy=True) for f, v in payload.items()}
        state["round"] = k
        return None

    return ChannelTap(agent, direction, record, owner, label=label or f"wiretap:{agent}:{direction}")


def digest(payload: Mapping[str, np.ndarray]) -> str:
    """Content digest of a payload (field names and raw float64 bytes)."""
    h = hashlib.blake2b(digest_size=16)
    for key in sorted(payload):
        h.update(key.encode())
        a = np.ascontiguousarray(payload[key], dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class MessageRecord:
    round: int
    kind: str
    sender: object
    recipient: object
    pre_tap_digest: str
    post_tap_digest: str
    mutated_by: tuple = ()
    pre_payload: dict | None = None
    post_payload: dict | None = None

    def to_json(self, payloads: bool = False) -> dict:
        out = {
            "round": self.round,
            "kind": self.kind,
            "from": self.sender,
            "to": self.recipient,
            "pre_tap_digest": self.pre_tap_digest,
            "post_tap_digest": self.post_tap_digest,
            "mutated_by": list(self.mutated_by),
        }
        if payloads and self.post_payload is not None:
            out["payload"] = {k: np.asarray(v).tolist() for k, v in self.post_payload.items()}
            if self.mutated_by and self.pre_payload is not None:
                out["pre_payload"] = {k: np.asarray(v).tolist() for k, v in self.pre_payload.items()}
        return out


class RoundLog:
    """Append-only log of message records.

    ``detail="messages"`` keeps one record per message (the audit trail);
    ``detail="mutations"`` keeps only the records of tapped-and-changed
    messages plus one summary record per round and direction, which is what
    long runs use. ``payloads=True`` additionally stores payload copies.
    """

    def __init__(self, detail: str = "messages", payloads: bool = False):
        if detail not in ("messages", "mutations"):
            raise ConfigurationError(f"unknown log detail {detail!r}")
        self.detail = detail
        self.payloads = payloads
        self.records: list[MessageRecord] = []
        self.summaries: list[dict] = []

    def __len__(self) -> int:
        return len(self.records)

    def mutations(self, owner=None) -> list[MessageRecord]:
        return [r for r in self.records if r.mutated_by and (owner is None or owner in r.mutated_by)]

    def for_round(self, k: int) -> list[MessageRecord]:
        return [r for r in self.records if r.round == k]

    def iter_json(self) -> Iterable[dict]:
        # records and summaries interleaved by round for a stable export order
        by_round: dict[int, list] = {}
        for rec in self.records:
            by_round.setdefault(rec.round, []).append(rec.to_json(self.payloads))
        for summ in self.summaries:
            by_round.setdefault(summ["round"], []).append(summ)
        for k in sorted(by_round):
            yield from by_round[k]

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.iter_json():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


class AgentPool(Protocol):
    """What the bus needs from the agent side of a round."""

    ids: tuple

    def report(self, k: int) -> dict: ...

    def update(self, k: int, broadcast: "Batch") -> None: ...


class Operator(Protocol):
    def operate(self, k: int, reports: "Batch") -> "Batch": ...


class Batch:
    """All messages of one direction in one round.

    ``rows`` holds per-agent fields (first axis indexes agents in pool
    order); ``shared`` holds fields every agent receives unchanged. Tapped
    messages get a full private payload in ``overrides``.
    """

    def __init__(self, rows: Mapping[str, np.ndarray], shared: Mapping[str, np.ndarray] | None = None):
        self.rows = dict(rows)
        self.shared = dict(shared or {})
        self.overrides: dict[int, dict] = {}

    def message(self, j: int) -> dict:
        """Payload seen by (or sent from) the agent at position j."""
        if j in self.overrides:
            return self.overrides[j]
        out = {f: v[j] for f, v in self.rows.items()}
        out.update(self.shared)
        return out

    def field(self, name: str) -> np.ndarray:
        """Per-agent stack of ``name`` after overrides (rows fields only)."""
        base = self.rows[name]
        if not self.overrides:
            return base
        out = np.array(base, copy=True)
        for j, payload in self.overrides.items():
            out[j] = payload[name]
        return out

    def observed(self, name: str, j: int) -> np.ndarray:
        return np.asarray(self.message(j)[name])


class MessageBus:
    """Synchronous lock-step bus with deterministic tap composition.

    Taps on the same channel compose in registration order; at most one tap
    per ``(owner, channel)``. A tap registered between rounds is active
    from the next round on.
    """

    def __init__(self, agent_ids: Iterable, log: RoundLog | None = None):
        self.agent_ids = tuple(agent_ids)
        if len(set(self.agent_ids)) != len(self.agent_ids):
            raise ConfigurationError("agent ids must be unique")
        self._pos = {a: j for j, a in enumerate(self.agent_ids)}
        self.log = log if log is not None else RoundLog()
        self._taps: dict[int, ChannelTap] = {}
        self._next_handle = 0
        self.rounds_completed = 0

    # -- taps ----------------------------------------------------------------

    def register_tap(self, tap: ChannelTap) -> int:
        """Install ``tap`` and return a handle for :meth:`remove_tap`."""
        if tap.direction not in (UPLINK, DOWNLINK):
            raise ConfigurationError(f"unknown channel direction {tap.direction!r}")
        if tap.agent not in self._pos:
            raise ConfigurationError(f"no channel for agent {tap.agent!r}")
        for other in self._taps.values():
            if other.owner == tap.owner and other.channel == tap.channel:
                raise ConfigurationError(f"owner {tap.owner!r} already taps channel {tap.channel}")
        handle = self._next_handle
        self._next_handle += 1
        self._taps[handle] = tap
        return handle

    def remove_tap(self, handle: int) -> ChannelTap:
        try:
            return self._taps.pop(handle)
        except KeyError:
            raise ConfigurationError(f"unknown tap handle {handle}") from None

    @property
    def taps(self) -> tuple:
        return tuple(self._taps[h] for h in sorted(self._taps))

    def _channel_taps(self, direction: str) -> dict[int, list[ChannelTap]]:
        out: dict[int, list[ChannelTap]] = {}
        for h in sorted(self._taps):
            tap = self._taps[h]
            if tap.direction == direction:
                out.setdefault(self._pos[tap.agent], []).append(tap)
        return out

    # -- rounds --------------------------------------------------------------

    def _apply(self, k: int, batch: Batch, direction: str, kind: MessageKind) -> None:
        taps = self._channel_taps(direction)
        mutated: dict[int, tuple] = {}
        pre: dict[int, dict] = {}
        for j, chain in taps.items():
            original = batch.message(j)
            payload = {f: np.array(v, copy=True) for f, v in original.items()}
            owners = []
            for tap in chain:
                work = {f: np.array(v, copy=True) for f, v in payload.items()}
                out = tap.transform(k, work, tap.state)
                if out is None:
                    continue
                changed = any(
                    f not in payload or not np.array_equal(np.asarray(out[f]), payload[f]) for f in out
                )
                payload = {f: np.asarray(v, dtype=float) for f, v in out.items()}
                if changed:
                    owners.append(tap.owner)
            if owners:
                pre[j] = original
                batch.overrides[j] = payload
                mutated[j] = tuple(owners)
        self._record(k, batch, kind, direction, mutated, pre)

    def _record(self, k, batch: Batch, kind: MessageKind, direction: str, mutated: dict, pre: dict) -> None:
        log = self.log
        ends = lambda a: (a, OPERATOR) if direction == UPLINK else (OPERATOR, a)  # noqa: E731
        if log.detail == "messages":
            for j, a in enumerate(self.agent_ids):
                post = batch.message(j)
                d_post = digest(post)
                d_pre = digest(pre[j]) if j in pre else d_post
                log.records.append(MessageRecord(
                    k, kind.value, *ends(a), d_pre, d_post, mutated.get(j, ()),
                    pre.get(j) if log.payloads else None, post if log.payloads else None,
                ))
            return
        for j in sorted(mutated):
            post = batch.message(j)
            log.records.append(MessageRecord(
                k, kind.value, *ends(self.agent_ids[j]), digest(pre[j]), digest(post), mutated[j],
                pre[j] if log.payloads else None, post if log.payloads else None,
            ))
        log.summaries.append({
            "round": k,
            "kind": kind.value,
            "summary": True,
            "messages": len(self.agent_ids),
            "mutated": len(mutated),
            "post_tap_digest": digest({**{f: batch.field(f) for f in batch.rows}, **batch.shared}),
        })

    def run_round(self, k: int, agents: AgentPool, operator: Operator) -> None:
        """collect -> uplink taps -> operate -> downlink taps -> update."""
        if k != self.rounds_completed:
            raise ProtocolError(f"round {k} requested but {self.rounds_completed} rounds completed")
        if tuple(agents.ids) != self.agent_ids:
            raise ProtocolError("agent pool does not match the registered agents")
        rows = agents.report(k)
        if not isinstance(rows, Mapping) or not rows:
            raise ProtocolError(f"round {k}: agents sent no report")
        n = len(self.agent_ids)
        for f, v in rows.items():
            v = np.asarray(v, dtype=float)
            if v.shape[:1] != (n,):
                got = v.shape[0] if v.ndim else 0
                raise ProtocolError(f"round {k}: field {f!r} carries {got} reports for {n} agents")
            # a NaN row stands for a report that never arrived
            bad = ~np.isfinite(v.reshape(n, -1)).all(axis=1)
            if bad.any():
                raise ProtocolError(f"round {k}: missing report from agent {self.agent_ids[int(np.argmax(bad))]!r}")
        reports = Batch(rows)
        self._apply(k, reports, UPLINK, MessageKind.PRIMAL_REPORT)
        broadcast = operator.operate(k, reports)
        self._apply(k, broadcast, DOWNLINK, MessageKind.DUAL_BROADCAST)
        agents.update(k, broadcast)
        self.rounds_completed = k + 1
