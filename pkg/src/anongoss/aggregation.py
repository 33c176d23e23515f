"""Phase II: aggregation among delegates, behind a small plugin interface.

Two plugins ship: :class:`IdentityAggregator` hands each profile straight
back (useful for end-to-end tests), and :class:`AveragingAggregator` runs
push-pull averaging over all delegated profiles.

Averaging exchanges are atomic pairwise means: an initiator that is waiting
for a reply refuses incoming exchanges, so every completed exchange replaces
two groups of values by their weighted mean. That keeps the total mass fixed
and never raises the variance.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Protocol

import numpy as np

from .crypto import Malformed, PeerId

if TYPE_CHECKING:  # pragma: no cover
    from .delegation import DelegatedTask
    from .node import Peer


class AlreadyRegistered(Exception):
    pass


class UnknownTask(KeyError):
    pass


@dataclass(frozen=True)
class AggregateResult:
    values: tuple[float, ...]
    rounds_used: int

    def to_bytes(self) -> bytes:
        return struct.pack(f"<HI{len(self.values)}d", len(self.values), self.rounds_used, *self.values)

    @classmethod
    def from_bytes(cls, data: bytes) -> "AggregateResult":
        if len(data) < 6:
            raise Malformed("short aggregate")
        dim, rounds = struct.unpack_from("<HI", data)
        if len(data) != 6 + 8 * dim:
            raise Malformed("aggregate length mismatch")
        return cls(struct.unpack_from(f"<{dim}d", data, 6), rounds)


class AggregatorPlugin(Protocol):
    def on_task(self, peer: "Peer", task: "DelegatedTask") -> None: ...

    def on_gossip_round(self, peer: "Peer") -> None: ...

    def on_message(self, peer: "Peer", frm: PeerId, kind: str, payload: bytes) -> None: ...

    def poll_result(self, peer: "Peer", task: "DelegatedTask") -> AggregateResult | None: ...


class IdentityAggregator:
    """Returns every profile unchanged as its own aggregate."""

    def on_task(self, peer, task) -> None:
        pass

    def on_gossip_round(self, peer) -> None:
        pass

    def on_message(self, peer, frm, kind, payload) -> None:
        pass

    def poll_result(self, peer, task) -> AggregateResult | None:
        if task not in peer.tasks:
            raise UnknownTask(task)
        return AggregateResult(tuple(task.profile.values), 0)


@dataclass
class _Slot:
    task: "DelegatedTask"
    value: np.ndarray
    history: list[np.ndarray] = field(default_factory=list)


@dataclass
class _NodeState:
    slots: list[_Slot] = field(default_factory=list)
    busy: int = 0  # exchange id in flight, 0 when idle
    in_flight: list[_Slot] = field(default_factory=list)
    exchanges: int = 0


def _pack(count: int, value: np.ndarray, xid: int) -> bytes:
    return struct.pack("<IIH", xid, count, len(value)) + np.asarray(value, dtype="<f8").tobytes()


def _unpack(data: bytes) -> tuple[int, int, np.ndarray]:
    if len(data) < 10:
        raise Malformed("short averaging message")
    xid, count, dim = struct.unpack_from("<IIH", data)
    if len(data) != 10 + 8 * dim:
        raise Malformed("averaging message length")
    return xid, count, np.frombuffer(data, dtype="<f8", offset=10).copy()


class AveragingAggregator:
    """Uniform push-pull averaging across every delegated task.

    Partners are drawn from the node's sampled-peer history, restricted to
    nodes known to hold tasks; the ``holders`` directory stands in for
    delegate discovery, which is outside this protocol.
    """

    def __init__(self, epsilon: float = 1e-8, window_rounds: int = 5, timeout: int = 50):
        self.epsilon = epsilon
        self.window = window_rounds
        self.timeout = timeout
        self.holders: dict[PeerId, None] = {}
        self.state: dict[PeerId, _NodeState] = {}
        self._xid = 0

    def _node(self, peer: "Peer") -> _NodeState:
        return self.state.setdefault(peer.id, _NodeState())

    def estimates(self) -> list[float]:
        """Scalar view of every task's working estimate (first coordinate)."""
        return [float(s.value[0]) for st in self.state.values() for s in st.slots]

    def vectors(self) -> list[np.ndarray]:
        return [s.value for st in self.state.values() for s in st.slots]

    def on_task(self, peer, task) -> None:
        st = self._node(peer)
        st.slots.append(_Slot(task, np.array(task.profile.values, dtype=float)))
        self.holders.setdefault(peer.id)

    def _equalize(self, slots: list[_Slot]) -> tuple[int, np.ndarray]:
        mean = np.mean([s.value for s in slots], axis=0)
        for s in slots:
            s.value = mean.copy()
        return len(slots), mean

    def on_gossip_round(self, peer) -> None:
        st = self.state.get(peer.id)
        if st is None or not st.slots:
            return
        for s in st.slots:
            s.history.append(s.value.copy())
        if st.busy:
            return
        candidates = [p for p in peer.sampler.history if p in self.holders and p != peer.id]
        if not candidates:
            return
        partner = peer.rng.choice(candidates)
        count, mean = self._equalize(st.slots)
        self._xid += 1
        st.busy = self._xid
        st.in_flight = list(st.slots)
        peer.send(partner, "agg_push", _pack(count, mean, self._xid))
        peer.set_timer(self.timeout, ("agg_timeout", self._xid))

    def on_timeout(self, peer, xid: int) -> None:
        st = self._node(peer)
        if st.busy == xid:
            st.busy = 0
            st.in_flight = []

    def on_message(self, peer, frm, kind, payload) -> None:
        st = self._node(peer)
        if kind == "agg_push":
            xid, count, value = _unpack(payload)
            if st.busy or not st.slots:
                peer.send(frm, "agg_busy", struct.pack("<I", xid))
                return
            mine, mean = self._equalize(st.slots)
            merged = (count * value + mine * mean) / (count + mine)
            for s in st.slots:
                s.value = merged.copy()
            st.exchanges += 1
            peer.send(frm, "agg_resp", _pack(count + mine, merged, xid))
        elif kind == "agg_resp":
            xid, _, merged = _unpack(payload)
            if st.busy != xid:
                return
            for s in st.in_flight:
                s.value = merged.copy()
            st.busy = 0
            st.in_flight = []
            st.exchanges += 1
        elif kind == "agg_busy":
            (xid,) = struct.unpack("<I", payload[:4])
            if st.busy == xid:
                st.busy = 0
                st.in_flight = []

    def poll_result(self, peer, task) -> AggregateResult | None:
        st = self.state.get(peer.id)
        slot = None
        if st is not None:
            slot = next((s for s in st.slots if s.task is task), None)
        if slot is None:
            raise UnknownTask(task)
        hist = slot.history
        if not hist:
            return None
        if math.isinf(self.epsilon):
            return AggregateResult(tuple(float(v) for v in slot.value), len(hist))
        if len(hist) <= self.window:
            return None
        recent = hist[-self.window - 1 :]
        scale = max(float(np.max(np.abs(recent[-1]))), 1e-300)
        drift = max(float(np.max(np.abs(h - recent[-1]))) for h in recent)
        if drift / scale < self.epsilon:
            return AggregateResult(tuple(float(v) for v in recent[-1]), len(hist))
        return None


def make_aggregator(name: str, epsilon: float = 1e-8, window_rounds: int = 5) -> AggregatorPlugin:
    if name == "identity":
        return IdentityAggregator()
    if name == "average":
        return AveragingAggregator(epsilon, window_rounds)
    raise ValueError(f"unknown aggregator {name!r}")
