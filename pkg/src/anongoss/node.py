"""Peers and the network that hosts them.

:class:`Peer` owns one node's protocol state and dispatches frames to the
phase modules. :class:`Network` wires peers to a simulator and a crypto
model and keeps the ground-truth route log used only for evaluation; no
protocol code reads it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any

from . import collection, delegation
from .aggregation import AggregatorPlugin, AlreadyRegistered
from .crypto import CryptoError, CryptoModel, KeyPair, Malformed, PeerId, SealedEnvelope, WrongKey
from .delegation import DelegatedTask, PendingDelegation
from .onion import (
    DeliverLocal,
    OnionPacket,
    RoutePlan,
    RouteTable,
    UnknownRoute,
    expire_routes,
    peel_and_forward,
    reply_payload,
    unwrap_reply,
)
from .sampling import PeerSampler
from .sim import Simulator, derive_rng

log = logging.getLogger(__name__)


@dataclass
class Params:
    latency_min: int = 1
    latency_max: int = 10
    loss: float = 0.0
    view_capacity: int = 20
    shuffle_size: int = 10
    round_interval_ticks: int = 10
    bootstrap_degree: int = 5
    phi_size: int = 50
    k_min: int = 5
    k_max: int = 20
    route_ttl_ticks: float = math.inf
    cell_size: int = 4096
    retry_ticks: int = 1000
    max_retries: int = 3
    return_mode: str = "pull_reenc"
    window_ticks: int = 500
    probe_backoff_ticks: int = 300
    probe_timeout_ticks: int = 600

    @property
    def reply_mode(self) -> str:
        return "naive" if self.return_mode == "pull_naive" else "perhop_reenc"

    @property
    def shuffle_timeout(self) -> int:
        return 2 * self.latency_max + 1


@dataclass(frozen=True)
class RouteRecord:
    """Ground truth for one built onion route (evaluation only)."""

    route_id: int
    purpose: str  # "delegation" | "probe"
    origin: PeerId
    relays: tuple[PeerId, ...]
    delegate: PeerId
    tags: tuple[bytes, ...]
    created_at: int
    delegation_id: int

    @property
    def k(self) -> int:
        return len(self.relays)


class Peer:
    def __init__(self, net: "Network", keys: KeyPair, index: int):
        self.net = net
        self.keys = keys
        self.id: PeerId = keys.public
        self.index = index
        self.rng = derive_rng(net.seed, f"peer/{index}")
        p = net.params
        self.sampler = PeerSampler(self.id, self.rng, p.view_capacity, p.shuffle_size)
        self.routes = RouteTable()
        self.pending: dict[bytes, PendingDelegation] = {}
        self.probes: dict[bytes, tuple[PendingDelegation, bytes, int]] = {}
        self.tasks: list[DelegatedTask] = []
        self.onion_log: list[tuple[int, PeerId]] = []
        self.flood_seen: set[bytes] = set()
        self.flood_log: list[collection.FloodForward] = []
        self.known_down: set[PeerId] = set()

    def __repr__(self) -> str:
        return f"Peer({self.index}:{self.id[:4].hex()})"

    @property
    def now(self) -> int:
        return self.net.sim.now

    @property
    def crypto(self) -> CryptoModel:
        return self.net.crypto

    def send(self, to: PeerId, kind: str, payload: bytes, circuit: bytes = b"") -> None:
        self.net.sim.send(self.id, to, payload, kind, circuit)

    def set_timer(self, delay: int, token: Any) -> None:
        self.net.sim.set_timer(self.id, max(1, int(delay)), token)

    def task_by_tag(self, tag: bytes) -> DelegatedTask | None:
        for task in reversed(self.tasks):
            if task.tag.tag == tag:
                return task
        return None

    # -- event entry points ------------------------------------------------

    def on_message(self, frm: PeerId, kind: str, circuit: bytes, payload: bytes) -> None:
        self.known_down.discard(frm)
        try:
            if kind == "onion":
                self._on_onion(frm, payload)
            elif kind == "reply":
                self._on_reply(circuit, payload)
            elif kind == "flood":
                collection.on_flood(self, payload)
            elif kind == "shuffle_req":
                self.send(frm, "shuffle_resp", self.sampler.on_request(frm, payload))
            elif kind == "shuffle_resp":
                self.sampler.on_response(frm, payload)
            elif kind.startswith("agg_"):
                if self.net.plugin is not None:
                    self.net.plugin.on_message(self, frm, kind, payload)
            else:
                self.net.count("unknown_kind")
        except Malformed:
            self.net.count(f"malformed_{kind}")

    def on_gossip_round(self) -> None:
        p = self.net.params
        started = self.sampler.start_round()
        if started is not None:
            partner, request = started
            self.send(partner, "shuffle_req", request)
            self.set_timer(p.shuffle_timeout, ("shuffle_timeout", partner, self.sampler.rounds))
        if self.net.plugin is not None:
            self.net.plugin.on_gossip_round(self)
        self._poll_tasks()
        if math.isfinite(p.route_ttl_ticks):
            expired = expire_routes(self.routes, self.now, p.route_ttl_ticks)
            if expired:
                self.net.count("routes_expired", expired)
        horizon = self.now - p.window_ticks
        if self.onion_log and self.onion_log[0][0] <= horizon:
            self.onion_log = [e for e in self.onion_log if e[0] > horizon]

    def on_timer(self, token: Any) -> None:
        kind = token[0]
        if kind == "shuffle_timeout":
            if self.sampler.on_timeout(token[1], token[2]):
                self.known_down.add(token[1])
                self.net.count("partner_down")
        elif kind == "agg_timeout":
            self.net.plugin.on_timeout(self, token[1])
        elif kind == "retry":
            pending = self.pending.get(token[1])
            if pending is not None:
                delegation.check_retry(self, pending)
        elif kind == "probe":
            pending = self.pending.get(token[1])
            if pending is not None and not pending.done:
                collection.pull_result(self, pending)
        elif kind == "probe_timeout":
            entry = self.probes.pop(token[1], None)
            if entry is not None:
                self.net.count("probe_timeouts")
                if not entry[0].done:
                    collection.pull_result(self, entry[0])

    def on_leave(self) -> None:
        self.sampler.pending.clear()

    def on_join(self) -> None:
        live = [p for p in self.net.order if p != self.id and self.net.sim.is_live(p)]
        if live:
            seeds = self.rng.sample(live, min(self.net.params.bootstrap_degree, len(live)))
            self.sampler.bootstrap(seeds)
        for tag, pending in self.pending.items():
            if not pending.done:
                self.set_timer(1, ("retry", tag))
        self.probes.clear()

    # -- onion traffic -------------------------------------------------------

    def _on_onion(self, frm: PeerId, wire: bytes) -> None:
        self.onion_log.append((self.now, frm))
        pkt = OnionPacket(SealedEnvelope(self.id, wire))
        try:
            action = peel_and_forward(self.crypto, self.keys.secret, self.routes, frm, pkt, self.now, self.rng)
        except WrongKey:
            self.net.count("wrong_key")
            return
        if isinstance(action, DeliverLocal):
            self._on_terminal(action.payload, action.state.route_tag)
        else:
            self.send(action.next_hop, "onion", action.packet.wire)

    def _on_terminal(self, payload: bytes, route_tag: bytes) -> None:
        head = payload[:1]
        if head == delegation.MSG_DELEGATE:
            task = delegation.on_delegation_received(self, payload, route_tag)
            if task is not None:
                self.net.count("tasks_received")
                self._poll_task(task)
        elif head == collection.MSG_PROBE:
            collection.answer_probe(self, payload, route_tag)
        else:
            self.net.count("malformed_terminal")

    def _on_reply(self, circuit: bytes, payload: bytes) -> None:
        p = self.net.params
        probe = self.probes.get(circuit)
        if probe is not None:
            pending, nonce, _ = probe
            try:
                body = unwrap_reply(self.crypto, self.keys.secret, payload, p.reply_mode)
                outcome = collection.accept_reply(self, pending, nonce, body)
            except collection.BadSignature:
                self.net.count("bad_signature")
                return
            except (CryptoError, Malformed):
                self.net.count("malformed_reply")
                return
            del self.probes[circuit]
            self.net.count(f"reply_{outcome}")
            if outcome == "pending":
                self.set_timer(p.probe_backoff_ticks, ("probe", pending.tag.tag))
            return
        try:
            state = self.routes.by_downstream_tag(circuit)
        except UnknownRoute:
            self.net.count("reply_unknown_route")
            return
        if state.upstream in self.known_down:
            self.net.count("reply_upstream_gone")
            return
        try:
            body = unwrap_reply(self.crypto, self.keys.secret, payload, p.reply_mode)
        except CryptoError:
            self.net.count("malformed_reply")
            return
        out = reply_payload(self.crypto, state.upstream, body, p.reply_mode, self.rng)
        self.send(state.upstream, "reply", out, circuit=state.route_tag)

    # -- delegate side -------------------------------------------------------

    def _poll_tasks(self) -> None:
        for task in self.tasks:
            if task.status == "pending" or (task.status == "aggregated" and not task.pushed):
                self._poll_task(task)

    def _poll_task(self, task: DelegatedTask) -> None:
        plugin = self.net.plugin
        if plugin is None:
            return
        if task.status == "pending":
            result = plugin.poll_result(self, task)
            if result is None:
                return
            task.result = result
            task.status = "aggregated"
            self.net.count("tasks_aggregated")
        if self.net.params.return_mode.startswith("push") and not task.pushed:
            collection.push_result(self, task)

    def stored_state_bytes(self) -> bytes:
        """Everything this node keeps as relay or delegate, serialized."""
        parts = [s.to_bytes() for s in self.routes.states()]
        parts += [t.to_bytes() for t in self.tasks]
        return b"".join(parts)


class Network:
    def __init__(self, params: Params, seed: int, keep_wire_bytes: bool = True):
        self.params = params
        self.seed = seed
        self.sim = Simulator(seed, (params.latency_min, params.latency_max), params.loss, keep_wire_bytes)
        self.crypto = CryptoModel()
        self.rng = derive_rng(seed, "network")
        self._key_rng = derive_rng(seed, "keys")
        self.peers: dict[PeerId, Peer] = {}
        self.order: list[PeerId] = []
        self.plugin: AggregatorPlugin | None = None
        self.routes: list[RouteRecord] = []
        self._delegations = 0

    # -- construction ----------------------------------------------------------

    def add_peers(self, n: int) -> list[Peer]:
        out = []
        for _ in range(n):
            keys = self.crypto.keygen(self._key_rng)
            peer = Peer(self, keys, len(self.order))
            self.peers[peer.id] = peer
            self.order.append(peer.id)
            self.sim.add_node(peer.id, peer)
            out.append(peer)
        return out

    def bootstrap(self) -> None:
        """Seed every view with its ring successor plus random peers, which
        keeps the initial overlay connected."""
        n = len(self.order)
        deg = min(self.params.bootstrap_degree, n - 1)
        for i, pid in enumerate(self.order):
            succ = self.order[(i + 1) % n]
            others = [p for p in self.order if p != pid and p != succ]
            seeds = [succ] + self.rng.sample(others, max(0, deg - 1))
            self.peers[pid].sampler.bootstrap(seeds)

    def start(self) -> None:
        interval = self.params.round_interval_ticks
        for pid in self.order:
            self.sim.start_gossip(pid, interval, self.rng.randrange(interval))

    def register_plugin(self, plugin: AggregatorPlugin) -> None:
        if self.plugin is not None:
            raise AlreadyRegistered("an aggregator is already registered")
        self.plugin = plugin

    def plugin_on_task(self, peer: Peer, task: DelegatedTask) -> None:
        if self.plugin is not None:
            self.plugin.on_task(peer, task)

    # -- bookkeeping -------------------------------------------------------------

    def count(self, name: str, n: int = 1) -> None:
        self.sim.stats.counters[name] += n

    def next_delegation_id(self) -> int:
        self._delegations += 1
        return self._delegations

    def record_route(self, origin: PeerId, plan: RoutePlan, tags, purpose: str, delegation_id: int) -> int:
        rec = RouteRecord(len(self.routes), purpose, origin, plan.relays, plan.delegate, tuple(tags), self.sim.now, delegation_id)
        self.routes.append(rec)
        return rec.route_id

    def peer(self, pid: PeerId) -> Peer:
        return self.peers[pid]

    def run_until(self, t: int):
        return self.sim.run_until(t)

    def warm_up(self, rounds: int) -> None:
        self.run_until(self.sim.now + rounds * self.params.round_interval_ticks)
