"""Phase I: anonymous hand-off of ``(profile, reply key)`` to a delegate.

The origin draws a random peer set from its sampling history, picks a
delegate and an onion route through that set, and sends the serialized
:class:`DelegationMsg` over the route. The message carries no trace of the
origin's identity; the delegate only ever learns its immediate upstream hop.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .crypto import Malformed, MatchTag, PeerId, SymKey
from .onion import PhiTooSmall, RoutePlan, build_onion, new_link_tags, plan_route

if TYPE_CHECKING:  # pragma: no cover
    from .aggregation import AggregateResult
    from .node import Peer

MSG_DELEGATE = b"D"


@dataclass(frozen=True)
class Profile:
    values: tuple[float, ...]

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("profile entries must be finite")

    @property
    def dim(self) -> int:
        return len(self.values)

    def to_bytes(self) -> bytes:
        return struct.pack(f"<H{len(self.values)}d", len(self.values), *self.values)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Profile":
        if len(data) < 2:
            raise Malformed("short profile")
        (dim,) = struct.unpack_from("<H", data)
        if len(data) != 2 + 8 * dim:
            raise Malformed("profile length mismatch")
        values = struct.unpack_from(f"<{dim}d", data, 2)
        if not all(math.isfinite(v) for v in values):
            raise Malformed("non-finite profile entry")
        return cls(values)


@dataclass(frozen=True)
class DelegationMsg:
    profile: Profile
    reply_key: SymKey

    def to_bytes(self) -> bytes:
        return MSG_DELEGATE + self.reply_key.key + self.profile.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DelegationMsg":
        if len(data) < 35 or data[:1] != MSG_DELEGATE:
            raise Malformed("not a delegation message")
        return cls(Profile.from_bytes(data[33:]), SymKey(data[1:33]))


@dataclass(eq=False)
class DelegatedTask:
    """The delegate's record of a task. Holds no origin identity."""

    profile: Profile
    reply_key: SymKey
    route_tag: bytes
    received_at: int
    tag: MatchTag
    status: str = "pending"  # "pending" | "aggregated"
    result: "AggregateResult | None" = None
    pushed: bool = False

    def to_bytes(self) -> bytes:
        parts = [self.profile.to_bytes(), self.reply_key.key, self.route_tag, self.tag.tag,
                 struct.pack("<q", self.received_at), self.status.encode()]
        if self.result is not None:
            parts.append(self.result.to_bytes())
        return b"".join(parts)


@dataclass(eq=False)
class PendingDelegation:
    """Origin-side bookkeeping; never leaves the origin."""

    delegation_id: int
    profile: Profile
    key: SymKey
    tag: MatchTag
    delegate: PeerId
    plan: RoutePlan
    created_at: int
    last_sent: int
    attempts: int = 1
    confirmed: bool = False
    gave_up: bool = False
    result: "AggregateResult | None" = None
    result_at: int | None = None
    result_via: str | None = None
    route_ids: list[int] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.result is not None or self.gave_up


def retry_policy(pending: PendingDelegation, now: int, retry_ticks: int, max_attempts: int) -> str:
    """``wait``, ``rebuild_and_resend`` or ``give_up``."""
    if pending.done or pending.confirmed:
        return "wait"
    if now - pending.last_sent < retry_ticks:
        return "wait"
    if pending.attempts < max_attempts:
        return "rebuild_and_resend"
    return "give_up"


def _send_delegation(peer: "Peer", pending: PendingDelegation, plan: RoutePlan) -> None:
    cfg = peer.net.params
    msg = DelegationMsg(pending.profile, pending.key).to_bytes()
    tags = new_link_tags(plan.k, peer.rng)
    pkt = build_onion(peer.crypto, plan, msg, peer.rng, tags, cfg.cell_size)
    route_id = peer.net.record_route(peer.id, plan, tags, "delegation", pending.delegation_id)
    pending.route_ids.append(route_id)
    peer.send(plan.relays[0], "onion", pkt.wire)


def delegate_task(peer: "Peer", profile: Profile) -> PendingDelegation:
    """Start Phase I from ``peer``. Raises PhiTooSmall if sampling history is short."""
    cfg = peer.net.params
    if peer.sampler.history_size() < cfg.phi_size:
        raise PhiTooSmall(f"history {peer.sampler.history_size()} < phi_size {cfg.phi_size}")
    phi = peer.sampler.sample(cfg.phi_size, peer.now)
    plan = plan_route(phi.peers, peer.rng, cfg.k_min, cfg.k_max, exclude=peer.id)
    key = peer.crypto.sym_keygen(peer.rng)
    pending = PendingDelegation(
        delegation_id=peer.net.next_delegation_id(),
        profile=profile,
        key=key,
        tag=peer.crypto.match_tag(key, profile.to_bytes()),
        delegate=plan.delegate,
        plan=plan,
        created_at=peer.now,
        last_sent=peer.now,
    )
    peer.pending[pending.tag.tag] = pending
    _send_delegation(peer, pending, plan)
    peer.set_timer(cfg.retry_ticks, ("retry", pending.tag.tag))
    if cfg.return_mode.startswith("pull"):
        peer.set_timer(cfg.probe_backoff_ticks, ("probe", pending.tag.tag))
    return pending


def check_retry(peer: "Peer", pending: PendingDelegation) -> str:
    cfg = peer.net.params
    action = retry_policy(pending, peer.now, cfg.retry_ticks, cfg.max_retries)
    if action == "rebuild_and_resend":
        phi = peer.sampler.sample(cfg.phi_size, peer.now)
        plan = plan_route(phi.peers, peer.rng, cfg.k_min, cfg.k_max, exclude=peer.id)
        pending.plan = plan
        pending.delegate = plan.delegate
        pending.attempts += 1
        pending.last_sent = peer.now
        _send_delegation(peer, pending, plan)
        peer.set_timer(cfg.retry_ticks, ("retry", pending.tag.tag))
        peer.net.count("delegation_retries")
    elif action == "give_up":
        pending.gave_up = True
        peer.net.count("delegation_give_ups")
    elif not pending.done and not pending.confirmed:
        peer.set_timer(cfg.retry_ticks - (peer.now - pending.last_sent), ("retry", pending.tag.tag))
    return action


def on_delegation_received(peer: "Peer", data: bytes, route_tag: bytes) -> DelegatedTask | None:
    try:
        msg = DelegationMsg.from_bytes(data)
    except Malformed:
        peer.net.count("malformed_delegations")
        return None
    task = DelegatedTask(
        profile=msg.profile,
        reply_key=msg.reply_key,
        route_tag=route_tag,
        received_at=peer.now,
        tag=peer.crypto.match_tag(msg.reply_key, msg.profile.to_bytes()),
    )
    peer.tasks.append(task)
    peer.net.plugin_on_task(peer, task)
    return task
