"""Layered (onion) routes over sampled peers.

Onion cells have a constant wire size at every hop. A cell is
``nonce || body`` where ``body`` is ``cell_size`` bytes XOR-encrypted under a
keystream agreed with the current hop. Decrypting yields a fixed-size header
followed by the next hop's cell body. The hop strips its header and appends
random filler, so the next cell is again exactly ``cell_size`` bytes; hops
cannot tell how many layers remain or how many came before.

Header fields (per hop):

* ``next``: identity of the next hop (zeros at the terminal)
* ``in_tag``: token for the link the cell arrived on
* ``out_tag``: token for the link to ``next``
* ``flags``: TERMINAL at the delegate, zero elsewhere; a relay cannot tell
  its position on the route
* ``next_nonce``: nonce of the next layer
* ``mac``: keyed digest over the fields; a wrong key fails it

Link tags let a relay pair reply traffic with its forward state without any
route-wide identifier.
"""

from __future__ import annotations

import hmac
import hashlib
import random
import struct
from dataclasses import dataclass
from typing import Sequence

from .crypto import (
    ID_LEN,
    NONCE_LEN,
    CryptoModel,
    Malformed,
    PeerId,
    SealedEnvelope,
    SecretKey,
    UnknownRecipient,
    WrongKey,
    xor_bytes,
)

TAG_LEN = 16
FLAG_TERMINAL = 1
_FIELDS = struct.Struct(f"<{ID_LEN}s{TAG_LEN}s{TAG_LEN}sB{NONCE_LEN}s")
HEADER_LEN = _FIELDS.size + 16
DEFAULT_CELL_SIZE = 4096
ZERO_ID = bytes(ID_LEN)
TERMINAL = None


class PhiTooSmall(Exception):
    pass


class UnknownRoute(Exception):
    pass


class UpstreamGone(Exception):
    pass


class PayloadTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class RoutePlan:
    relays: tuple[PeerId, ...]
    delegate: PeerId

    @property
    def k(self) -> int:
        return len(self.relays)

    @property
    def hops(self) -> tuple[PeerId, ...]:
        return self.relays + (self.delegate,)


@dataclass(frozen=True)
class OnionPacket:
    env: SealedEnvelope

    @property
    def wire(self) -> bytes:
        return self.env.payload


@dataclass(frozen=True)
class RouteHopState:
    route_tag: bytes  # tag of the inbound link; replies go upstream under it
    downstream_tag: bytes | None  # tag of the outbound link; None at the terminal
    upstream: PeerId
    downstream: PeerId | None
    created_at: int

    @property
    def identities(self) -> tuple[PeerId, ...]:
        ids = (self.upstream,)
        return ids if self.downstream is None else ids + (self.downstream,)

    def to_bytes(self) -> bytes:
        return b"".join(
            [
                self.route_tag,
                self.downstream_tag or bytes(TAG_LEN),
                self.upstream,
                self.downstream or ZERO_ID,
                struct.pack("<q", self.created_at),
            ]
        )


@dataclass(frozen=True)
class Forward:
    packet: OnionPacket
    next_hop: PeerId
    state: RouteHopState


@dataclass(frozen=True)
class DeliverLocal:
    payload: bytes
    state: RouteHopState


def plan_route(
    phi: Sequence[PeerId],
    rng: random.Random,
    k_min: int = 5,
    k_max: int = 20,
    delegate: PeerId | None = None,
    exclude: PeerId | None = None,
) -> RoutePlan:
    """Pick ``k ~ U{k_min..k_max}`` relays (and the delegate, unless given)
    uniformly without replacement from ``phi``."""
    if not 1 <= k_min <= k_max:
        raise ValueError(f"bad hop range [{k_min}, {k_max}]")
    pool = [p for p in phi if p != exclude and p != delegate]
    need = k_max if delegate is not None else k_max + 1
    if len(pool) < need:
        raise PhiTooSmall(f"|phi|={len(pool)} < {need}")
    k = rng.randint(k_min, k_max)
    if delegate is None:
        chosen = rng.sample(pool, k + 1)
        return RoutePlan(tuple(chosen[1:]), chosen[0])
    return RoutePlan(tuple(rng.sample(pool, k)), delegate)


def new_link_tags(k: int, rng: random.Random) -> list[bytes]:
    """One fresh token per link: origin->relay1, ..., relay_k->delegate."""
    return [rng.randbytes(TAG_LEN) for _ in range(k + 1)]


def _header(key_mac: bytes, nxt: PeerId, in_tag: bytes, out_tag: bytes, flags: int, nonce: bytes) -> bytes:
    fields = _FIELDS.pack(nxt, in_tag, out_tag, flags, nonce)
    return fields + hashlib.blake2b(fields, key=key_mac, digest_size=16).digest()


def max_payload(k: int, cell_size: int = DEFAULT_CELL_SIZE) -> int:
    return cell_size - (k + 1) * HEADER_LEN - 4


def build_onion(
    crypto: CryptoModel,
    plan: RoutePlan,
    payload: bytes,
    rng: random.Random,
    tags: Sequence[bytes] | None = None,
    cell_size: int = DEFAULT_CELL_SIZE,
) -> OnionPacket:
    """Wrap ``payload`` for the delegate, then for relays k..1, outermost last."""
    k = plan.k
    if tags is None:
        tags = new_link_tags(k, rng)
    if len(tags) != k + 1:
        raise ValueError("need k+1 link tags")
    for hop in plan.hops:
        if not crypto.is_registered(hop):
            raise UnknownRecipient(hop.hex()[:8])
    if len(payload) > max_payload(k, cell_size):
        raise PayloadTooLarge(f"{len(payload)} bytes does not fit a {k}-relay cell")

    hops = plan.hops
    nonces = [rng.randbytes(NONCE_LEN) for _ in hops]
    # innermost: the delegate's layer, with the payload and random filler
    ks, km = crypto.cell_stream_to(plan.delegate, nonces[k], cell_size)
    inner = _header(km, ZERO_ID, tags[k], bytes(TAG_LEN), FLAG_TERMINAL, bytes(NONCE_LEN))
    inner += struct.pack("<I", len(payload)) + payload
    meaningful = cell_size - k * HEADER_LEN
    inner += rng.randbytes(meaningful - len(inner))
    body = xor_bytes(inner, ks)
    for j in range(k - 1, -1, -1):
        ks, km = crypto.cell_stream_to(hops[j], nonces[j], cell_size)
        layer = _header(km, hops[j + 1], tags[j], tags[j + 1], 0, nonces[j + 1]) + body
        body = xor_bytes(layer, ks)
    assert len(body) == cell_size
    return OnionPacket(SealedEnvelope(hops[0], nonces[0] + body))


@dataclass(frozen=True)
class Peeled:
    next_hop: PeerId | None
    in_tag: bytes
    out_tag: bytes | None
    inner: OnionPacket | None
    payload: bytes | None


def peel(crypto: CryptoModel, secret: SecretKey, wire: bytes, rng: random.Random) -> Peeled:
    """Remove one layer. Raises WrongKey if the cell is not for this secret."""
    if len(wire) <= NONCE_LEN + HEADER_LEN:
        raise Malformed("cell too short")
    nonce, body = wire[:NONCE_LEN], wire[NONCE_LEN:]
    ks, km = crypto.cell_stream(secret, nonce, len(body))
    plain = xor_bytes(body, ks)
    fields, mac = plain[: _FIELDS.size], plain[_FIELDS.size : HEADER_LEN]
    if not hmac.compare_digest(mac, hashlib.blake2b(fields, key=km, digest_size=16).digest()):
        raise WrongKey("onion layer not addressed to this key")
    nxt, in_tag, out_tag, flags, next_nonce = _FIELDS.unpack(fields)
    rest = plain[HEADER_LEN:]
    if flags & FLAG_TERMINAL:
        (n,) = struct.unpack_from("<I", rest)
        if n > len(rest) - 4:
            raise Malformed("terminal payload length")
        return Peeled(None, in_tag, None, None, rest[4 : 4 + n])
    inner = next_nonce + rest + rng.randbytes(HEADER_LEN)
    return Peeled(nxt, in_tag, out_tag, OnionPacket(SealedEnvelope(nxt, inner)), None)


class RouteTable:
    """A node's per-route forwarding state."""

    def __init__(self) -> None:
        self._relayed: dict[bytes, RouteHopState] = {}  # by downstream_tag
        self._terminal: dict[bytes, RouteHopState] = {}  # by route_tag

    def add(self, state: RouteHopState) -> None:
        if state.downstream_tag is None:
            self._terminal[state.route_tag] = state
        else:
            self._relayed[state.downstream_tag] = state

    def states(self) -> list[RouteHopState]:
        return list(self._relayed.values()) + list(self._terminal.values())

    def by_downstream_tag(self, tag: bytes) -> RouteHopState:
        try:
            return self._relayed[tag]
        except KeyError:
            raise UnknownRoute(tag.hex()) from None

    def terminal(self, route_tag: bytes) -> RouteHopState:
        try:
            return self._terminal[route_tag]
        except KeyError:
            raise UnknownRoute(route_tag.hex()) from None

    def __len__(self) -> int:
        return len(self._relayed) + len(self._terminal)

    def clear(self) -> None:
        self._relayed.clear()
        self._terminal.clear()


def peel_and_forward(
    crypto: CryptoModel,
    secret: SecretKey,
    table: RouteTable,
    upstream: PeerId,
    pkt: OnionPacket,
    now: int,
    rng: random.Random,
) -> Forward | DeliverLocal:
    peeled = peel(crypto, secret, pkt.wire, rng)
    state = RouteHopState(peeled.in_tag, peeled.out_tag, upstream, peeled.next_hop, now)
    table.add(state)
    if peeled.inner is None:
        return DeliverLocal(peeled.payload, state)
    return Forward(peeled.inner, peeled.next_hop, state)


def reply_payload(crypto: CryptoModel, upstream: PeerId, reply: bytes, mode: str, rng: random.Random) -> bytes:
    """Body of one upstream reply hop. ``naive`` forwards the bytes as-is;
    ``perhop_reenc`` seals them to the hop's upstream neighbour."""
    if mode == "naive":
        return reply
    if mode == "perhop_reenc":
        return crypto.seal(upstream, reply, rng).payload
    raise ValueError(f"unknown reply mode {mode!r}")


def unwrap_reply(crypto: CryptoModel, secret: SecretKey, payload: bytes, mode: str) -> bytes:
    if mode == "naive":
        return payload
    return crypto.open_bytes(payload, secret)


def expire_routes(table: RouteTable, now: int, ttl: float) -> int:
    """Drop states older than ``ttl`` ticks; returns how many were removed."""
    if ttl <= 0:
        raise ValueError("ttl must be positive")
    removed = 0
    for d in (table._relayed, table._terminal):
        stale = [tag for tag, s in d.items() if now - s.created_at > ttl]
        for tag in stale:
            del d[tag]
        removed += len(stale)
    return removed
