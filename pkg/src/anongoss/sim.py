"""Deterministic discrete-event simulator.

Time is integer ticks. Events run in (time, sequence) order, so two events
scheduled for the same tick execute in the order they were scheduled. All
randomness comes from generators derived from the run seed.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Protocol

log = logging.getLogger(__name__)

NodeId = bytes


class SimError(Exception):
    pass


class PastEvent(SimError):
    pass


class InvalidSpec(SimError):
    pass


class Node(Protocol):
    def on_message(self, frm: NodeId, kind: str, circuit: bytes, payload: bytes) -> None: ...

    def on_gossip_round(self) -> None: ...

    def on_timer(self, token: Any) -> None: ...

    def on_leave(self) -> None: ...

    def on_join(self) -> None: ...


@dataclass(frozen=True)
class Deliver:
    frm: NodeId
    to: NodeId
    kind: str
    circuit: bytes
    payload: bytes
    sent_at: int


@dataclass(frozen=True)
class GossipRound:
    node: NodeId
    generation: int = 0


@dataclass(frozen=True)
class Churn:
    action: str  # "join" | "leave"
    node: NodeId


@dataclass(frozen=True)
class TimerFire:
    node: NodeId
    token: Any


@dataclass(frozen=True)
class Callback:
    fn: Any


@dataclass(frozen=True)
class SimEvent:
    at: int
    kind: Deliver | GossipRound | Churn | TimerFire | Callback


@dataclass(frozen=True)
class LinkTransmission:
    """One message on one link, as a passive observer sees it.

    ``circuit`` is the cleartext per-link routing token of reply frames;
    ``wire_bytes`` is the message body (or its digest when the simulator
    runs with ``keep_wire_bytes=False``; equality is preserved either way).
    ``arrive_at`` is the scheduled delivery tick, None if the message was lost.
    """

    frm: NodeId
    to: NodeId
    at: int
    kind: str
    circuit: bytes
    wire_bytes: bytes
    arrive_at: int | None = None


@dataclass
class ChurnSpec:
    leave_rate: float = 0.0  # per live node per tick
    join_rate: float = 0.0  # per departed node per tick
    script: list[tuple[int, str, NodeId]] = field(default_factory=list)


@dataclass
class SimStats:
    time: int = 0
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    lost: int = 0
    by_kind: Counter = field(default_factory=Counter)
    node_sent: Counter = field(default_factory=Counter)
    node_received: Counter = field(default_factory=Counter)
    counters: Counter = field(default_factory=Counter)
    joins: int = 0
    leaves: int = 0

    @property
    def in_flight(self) -> int:
        return self.sent - self.delivered - self.dropped - self.lost

    def to_records(self) -> list[dict]:
        t = self.time
        recs = [
            {"name": "messages_sent", "time": t, "value": self.sent},
            {"name": "messages_delivered", "time": t, "value": self.delivered},
            {"name": "messages_dropped", "time": t, "value": self.dropped},
            {"name": "messages_lost", "time": t, "value": self.lost},
            {"name": "churn_joins", "time": t, "value": self.joins},
            {"name": "churn_leaves", "time": t, "value": self.leaves},
        ]
        recs += [{"name": f"sent.{k}", "time": t, "value": v} for k, v in sorted(self.by_kind.items())]
        recs += [{"name": f"counter.{k}", "time": t, "value": v} for k, v in sorted(self.counters.items())]
        return recs

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())


def derive_rng(seed: int, label: str) -> random.Random:
    return random.Random(f"{seed}/{label}")


def geometric(rng: random.Random, p: float) -> int:
    """Ticks until the first success of a per-tick Bernoulli(p); always >= 1."""
    if p >= 1.0:
        return 1
    u = rng.random()
    return max(1, math.ceil(math.log1p(-u) / math.log1p(-p)))


class Simulator:
    def __init__(
        self,
        seed: int,
        latency: tuple[int, int] = (1, 10),
        loss: float = 0.0,
        keep_wire_bytes: bool = True,
    ):
        lo, hi = latency
        if lo < 1 or hi < lo:
            raise InvalidSpec(f"latency range {latency!r}")
        self.seed = seed
        self.latency = (lo, hi)
        self.loss = loss
        self.keep_wire_bytes = keep_wire_bytes
        self.rng = derive_rng(seed, "sim")
        self._churn_rng = derive_rng(seed, "churn")
        self.now = 0
        self._queue: list[tuple[int, int, SimEvent]] = []
        self._seq = 0
        self.nodes: dict[NodeId, Node] = {}
        self.live: set[NodeId] = set()
        self.trace: list[LinkTransmission] = []
        self.stats = SimStats()
        self._round_interval: dict[NodeId, int] = {}
        self._round_gen: Counter = Counter()
        self._churn: ChurnSpec | None = None

    # -- scheduling ------------------------------------------------------

    def schedule(self, event: SimEvent) -> None:
        if event.at < self.now:
            raise PastEvent(f"event at {event.at} < now {self.now}")
        heapq.heappush(self._queue, (event.at, self._seq, event))
        self._seq += 1

    def call_at(self, at: int, fn) -> None:
        self.schedule(SimEvent(at, Callback(fn)))

    def set_timer(self, node: NodeId, delay: int, token: Any) -> None:
        self.schedule(SimEvent(self.now + delay, TimerFire(node, token)))

    def add_node(self, node_id: NodeId, node: Node, live: bool = True) -> None:
        self.nodes[node_id] = node
        if live:
            self.live.add(node_id)

    def start_gossip(self, node_id: NodeId, interval: int, offset: int) -> None:
        self._round_interval[node_id] = interval
        self.schedule(SimEvent(self.now + offset, GossipRound(node_id, self._round_gen[node_id])))

    def is_live(self, node_id: NodeId) -> bool:
        return node_id in self.live

    # -- messaging ---------------------------------------------------------

    def send(self, frm: NodeId, to: NodeId, msg: bytes, kind: str = "data", circuit: bytes = b"") -> None:
        if frm not in self.live:
            raise SimError("send from a node that is not live")
        wire = msg if self.keep_wire_bytes else hashlib.blake2b(msg, digest_size=16).digest()
        self.stats.sent += 1
        self.stats.by_kind[kind] += 1
        self.stats.node_sent[frm] += 1
        if self.loss and self.rng.random() < self.loss:
            self.stats.lost += 1
            self.trace.append(LinkTransmission(frm, to, self.now, kind, circuit, wire, None))
            return
        arrive = self.now + self.rng.randint(*self.latency)
        self.trace.append(LinkTransmission(frm, to, self.now, kind, circuit, wire, arrive))
        self.schedule(SimEvent(arrive, Deliver(frm, to, kind, circuit, msg, self.now)))

    # -- churn -------------------------------------------------------------

    def churn_schedule(self, spec: ChurnSpec) -> None:
        for name in ("leave_rate", "join_rate"):
            rate = getattr(spec, name)
            if not 0.0 <= rate <= 1.0 or math.isnan(rate):
                raise InvalidSpec(f"{name}={rate} is not a per-tick probability")
        for at, action, node in spec.script:
            if action not in ("join", "leave"):
                raise InvalidSpec(f"unknown churn action {action!r}")
            if node not in self.nodes:
                raise InvalidSpec("scripted churn for unknown node")
            self.schedule(SimEvent(at, Churn(action, node)))
        self._churn = spec
        if spec.leave_rate > 0:
            for node in sorted(self.live):
                self._schedule_next(node, "leave")

    def _schedule_next(self, node: NodeId, action: str) -> None:
        spec = self._churn
        rate = spec.leave_rate if action == "leave" else spec.join_rate
        if rate > 0:
            self.schedule(SimEvent(self.now + geometric(self._churn_rng, rate), Churn(action, node)))

    def _apply_churn(self, ev: Churn, poisson: bool) -> None:
        node = self.nodes[ev.node]
        if ev.action == "leave" and ev.node in self.live:
            self.live.discard(ev.node)
            self.stats.leaves += 1
            node.on_leave()
            if poisson:
                self._schedule_next(ev.node, "join")
        elif ev.action == "join" and ev.node not in self.live:
            self.live.add(ev.node)
            self.stats.joins += 1
            node.on_join()
            interval = self._round_interval.get(ev.node)
            if interval:
                self._round_gen[ev.node] += 1
                offset = 1 + self.rng.randrange(interval)
                self.schedule(SimEvent(self.now + offset, GossipRound(ev.node, self._round_gen[ev.node])))
            if poisson:
                self._schedule_next(ev.node, "leave")

    # -- main loop ---------------------------------------------------------

    def run_until(self, t: int) -> SimStats:
        if t < self.now:
            raise PastEvent(f"run_until({t}) with clock at {self.now}")
        q = self._queue
        while q and q[0][0] <= t:
            at, seq, event = heapq.heappop(q)
            self.now = at
            self._dispatch(event.kind, seq)
        self.now = t
        self.stats.time = t
        return self.stats

    def _dispatch(self, ev, seq: int) -> None:
        if isinstance(ev, Deliver):
            if ev.to not in self.live:
                self.stats.dropped += 1
                return
            self.stats.delivered += 1
            self.stats.node_received[ev.to] += 1
            self.nodes[ev.to].on_message(ev.frm, ev.kind, ev.circuit, ev.payload)
        elif isinstance(ev, GossipRound):
            if ev.node not in self.live or ev.generation != self._round_gen[ev.node]:
                return
            self.nodes[ev.node].on_gossip_round()
            self.schedule(SimEvent(self.now + self._round_interval[ev.node], ev))
        elif isinstance(ev, TimerFire):
            if ev.node in self.live:
                self.nodes[ev.node].on_timer(ev.token)
        elif isinstance(ev, Churn):
            poisson = self._churn is not None and (self._churn.leave_rate > 0 or self._churn.join_rate > 0)
            self._apply_churn(ev, poisson)
        elif isinstance(ev, Callback):
            ev.fn()
        else:  # pragma: no cover
            raise SimError(f"unknown event {ev!r}")
