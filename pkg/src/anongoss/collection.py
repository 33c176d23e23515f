"""Phase III: getting the aggregate back to an origin nobody can name.

Pull: the origin probes its delegate over a fresh onion route and the
delegate answers upstream along that route, either forwarding the same
bytes at every hop (``pull_naive``) or re-sealing them to each upstream
neighbour (``pull_reenc``).

Push: the delegate floods a signed :class:`FloodMessage` holding the
aggregate encrypted under the origin's reply key plus a match tag. Every
node, the origin included, forwards each flood exactly once with the same
rule; the origin recognises its tag privately. ``push_window`` restricts
forwarding to peers that sent us onion cells within the last
``window_ticks``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .aggregation import AggregateResult
from .crypto import (
    ID_LEN,
    SIGNATURE_LEN,
    CryptoError,
    Malformed,
    MatchTag,
    PeerId,
    Signature,
    SymCiphertext,
)
from .onion import build_onion, new_link_tags, plan_route, reply_payload

if TYPE_CHECKING:  # pragma: no cover
    from .delegation import DelegatedTask, PendingDelegation
    from .node import Peer

MSG_PROBE = b"P"
REPLY_RESULT = b"R"
REPLY_PENDING = b"N"
RETURN_MODES = ("pull_naive", "pull_reenc", "push_full", "push_window")


class BadSignature(Exception):
    pass


@dataclass(frozen=True)
class ProbeMsg:
    task_ref: MatchTag
    nonce: bytes

    def to_bytes(self) -> bytes:
        return MSG_PROBE + self.task_ref.tag + self.nonce

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProbeMsg":
        if len(data) != 1 + 32 + 16 or data[:1] != MSG_PROBE:
            raise Malformed("not a probe")
        return cls(MatchTag(data[1:33]), data[33:])


@dataclass(frozen=True)
class FloodMessage:
    result_ct: SymCiphertext
    delegate: PeerId
    tag: MatchTag
    sig: Signature

    @staticmethod
    def signed_part(result_ct: SymCiphertext, tag: MatchTag) -> bytes:
        return b"flood" + tag.tag + result_ct.payload

    def to_bytes(self) -> bytes:
        ct = self.result_ct.payload
        return struct.pack("<I", len(ct)) + ct + self.delegate + self.tag.tag + self.sig.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FloodMessage":
        if len(data) < 4:
            raise Malformed("short flood")
        (n,) = struct.unpack_from("<I", data)
        if len(data) != 4 + n + ID_LEN + 32 + SIGNATURE_LEN:
            raise Malformed("flood length")
        off = 4 + n
        return cls(
            SymCiphertext(data[4:off]),
            data[off : off + ID_LEN],
            MatchTag(data[off + ID_LEN : off + ID_LEN + 32]),
            Signature.from_bytes(data[off + ID_LEN + 32 :]),
        )


@dataclass(frozen=True)
class FloodForward:
    """One node's handling of one flood message, for trace comparison."""

    node: PeerId
    tag: bytes
    received_at: int
    sent_at: int | None
    recipients: tuple[PeerId, ...]
    duplicate: bool
    valid: bool


# -- pull ---------------------------------------------------------------------


def pull_result(peer: "Peer", pending: "PendingDelegation") -> int:
    """Probe ``pending.delegate`` over a new onion route. Returns the route id."""
    cfg = peer.net.params
    phi = peer.sampler.sample(cfg.phi_size, peer.now)
    plan = plan_route(phi.peers, peer.rng, cfg.k_min, cfg.k_max, delegate=pending.delegate, exclude=peer.id)
    probe = ProbeMsg(pending.tag, peer.rng.randbytes(16))
    tags = new_link_tags(plan.k, peer.rng)
    pkt = build_onion(peer.crypto, plan, probe.to_bytes(), peer.rng, tags, cfg.cell_size)
    route_id = peer.net.record_route(peer.id, plan, tags, "probe", pending.delegation_id)
    peer.probes[tags[0]] = (pending, probe.nonce, route_id)
    peer.send(plan.relays[0], "onion", pkt.wire)
    peer.set_timer(cfg.probe_timeout_ticks, ("probe_timeout", tags[0]))
    peer.net.count("probes_sent")
    return route_id


def answer_probe(peer: "Peer", data: bytes, route_tag: bytes) -> None:
    """Delegate side: reply RESULT or PENDING upstream along the probe route."""
    try:
        probe = ProbeMsg.from_bytes(data)
    except Malformed:
        peer.net.count("malformed_probes")
        return
    task = peer.task_by_tag(probe.task_ref.tag)
    if task is None:
        peer.net.count("probe_unknown_task")
        return
    if task.status == "aggregated":
        ct = peer.crypto.sym_seal(task.reply_key, task.result.to_bytes(), peer.rng)
        sig = peer.crypto.sign(peer.keys.secret, REPLY_RESULT + probe.nonce + ct.payload)
        body = REPLY_RESULT + sig.to_bytes() + ct.payload
    else:
        sig = peer.crypto.sign(peer.keys.secret, REPLY_PENDING + probe.nonce)
        body = REPLY_PENDING + sig.to_bytes()
    state = peer.routes.terminal(route_tag)
    mode = peer.net.params.reply_mode
    peer.send(state.upstream, "reply", reply_payload(peer.crypto, state.upstream, body, mode, peer.rng), circuit=route_tag)


def parse_reply(body: bytes) -> tuple[bytes, Signature, SymCiphertext | None]:
    if len(body) < 1 + SIGNATURE_LEN or body[:1] not in (REPLY_RESULT, REPLY_PENDING):
        raise Malformed("bad reply")
    kind, sig = body[:1], Signature.from_bytes(body[1 : 1 + SIGNATURE_LEN])
    rest = body[1 + SIGNATURE_LEN :]
    if kind == REPLY_PENDING:
        if rest:
            raise Malformed("trailing bytes on PENDING")
        return kind, sig, None
    return kind, sig, SymCiphertext(rest)


def accept_reply(peer: "Peer", pending: "PendingDelegation", nonce: bytes, body: bytes) -> str:
    """Origin side. Returns ``result``, ``pending`` or raises BadSignature/Malformed."""
    kind, sig, ct = parse_reply(body)
    signed = kind + nonce + (ct.payload if ct is not None else b"")
    if not peer.crypto.verify(pending.delegate, signed, sig):
        raise BadSignature("reply not signed by the delegate")
    pending.confirmed = True
    if kind == REPLY_PENDING:
        return "pending"
    result = AggregateResult.from_bytes(peer.crypto.sym_open(ct, pending.key))
    if pending.result is None:
        pending.result = result
        pending.result_at = peer.now
        pending.result_via = "pull"
    return "result"


# -- push ---------------------------------------------------------------------


def make_flood(peer: "Peer", task: "DelegatedTask") -> FloodMessage:
    ct = peer.crypto.sym_seal(task.reply_key, task.result.to_bytes(), peer.rng)
    sig = peer.crypto.sign(peer.keys.secret, FloodMessage.signed_part(ct, task.tag))
    return FloodMessage(ct, peer.id, task.tag, sig)


def flood_neighbors(peer: "Peer", now: int, mode: str, window: float | None = None) -> list[PeerId]:
    """``full``: the current sampling view. ``onion_window``: upstream senders
    of onion cells received in ``(now - window, now]``, oldest first."""
    if mode == "full":
        return peer.sampler.view.peers()
    if mode == "onion_window":
        if window is None:
            window = peer.net.params.window_ticks
        out: dict[PeerId, None] = {}
        for t, upstream in peer.onion_log:
            if now - window < t <= now:
                out.setdefault(upstream)
        return list(out)
    raise ValueError(f"unknown flood mode {mode!r}")


def flood_mode(return_mode: str) -> str:
    return "onion_window" if return_mode == "push_window" else "full"


def _forward(peer: "Peer", fm_bytes: bytes, tag: bytes, received_at: int) -> FloodForward:
    targets = flood_neighbors(peer, peer.now, flood_mode(peer.net.params.return_mode))
    for t in targets:
        peer.send(t, "flood", fm_bytes)
    return FloodForward(peer.id, tag, received_at, peer.now, tuple(targets), False, True)


def push_result(peer: "Peer", task: "DelegatedTask") -> FloodMessage:
    fm = make_flood(peer, task)
    task.pushed = True
    peer.flood_seen.add(fm.tag.tag)
    peer.flood_log.append(_forward(peer, fm.to_bytes(), fm.tag.tag, peer.now))
    peer.net.count("floods_started")
    return fm


def try_match(peer: "Peer", fm: FloodMessage) -> bool:
    """Private check whether a flood answers one of our delegations.
    Has no effect on forwarding."""
    pending = peer.pending.get(fm.tag.tag)
    if pending is None:
        return False
    if pending.result is None:
        try:
            pending.result = AggregateResult.from_bytes(peer.crypto.sym_open(fm.result_ct, pending.key))
        except (CryptoError, Malformed):
            return False
        pending.result_at = peer.now
        pending.result_via = "flood"
        pending.confirmed = True
    return True


def on_flood(peer: "Peer", data: bytes) -> FloodForward:
    """The single forwarding rule every node applies to a flood message."""
    try:
        fm = FloodMessage.from_bytes(data)
    except Malformed:
        peer.net.count("malformed_floods")
        return FloodForward(peer.id, b"", peer.now, None, (), False, False)
    tag = fm.tag.tag
    if tag in peer.flood_seen:
        rec = FloodForward(peer.id, tag, peer.now, None, (), True, True)
    elif not peer.crypto.verify(fm.delegate, FloodMessage.signed_part(fm.result_ct, fm.tag), fm.sig):
        peer.net.count("flood_bad_signature")
        rec = FloodForward(peer.id, tag, peer.now, None, (), False, False)
    else:
        peer.flood_seen.add(tag)
        try_match(peer, fm)
        rec = _forward(peer, data, tag, peer.now)
    peer.flood_log.append(rec)
    return rec
