"""Gossip-based peer sampling (push-pull view shuffling).

Each node keeps a bounded partial view of ``(peer, age)`` descriptors.
Every round it ages its view, contacts the oldest entry, and the pair swap
random half-views; the initiator's half carries its own fresh descriptor
in place of the partner's. Besides the live view the sampler remembers
every peer it has ever seen; :meth:`PeerSampler.sample` draws from that accumulated
history, never from the network, so drawing a sample sends nothing.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field

from .crypto import ID_LEN, Malformed, PeerId


class InsufficientHistory(Exception):
    pass


class PartnerDown(Exception):
    pass


@dataclass
class ViewEntry:
    peer: PeerId
    age: int = 0


@dataclass(frozen=True)
class SampleSet:
    peers: tuple[PeerId, ...]
    drawn_at: int

    def __len__(self) -> int:
        return len(self.peers)

    def __contains__(self, peer: object) -> bool:
        return peer in self.peers


@dataclass
class View:
    owner: PeerId
    capacity: int = 20
    entries: list[ViewEntry] = field(default_factory=list)

    def peers(self) -> list[PeerId]:
        return [e.peer for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, peer: object) -> bool:
        return any(e.peer == peer for e in self.entries)

    def remove(self, peer: PeerId) -> bool:
        before = len(self.entries)
        self.entries = [e for e in self.entries if e.peer != peer]
        return len(self.entries) != before

    def oldest(self) -> ViewEntry | None:
        if not self.entries:
            return None
        # max() keeps the first of equal ages, so the choice is deterministic
        return max(self.entries, key=lambda e: e.age)

    def merge(self, received: list[ViewEntry], sent: list[PeerId], rng: random.Random) -> None:
        """Union with ``received`` keeping the freshest age per peer, then
        truncate to capacity. Entries we just handed to the partner go first,
        then surplus newcomers, oldest first; entries we kept are never
        displaced, so descriptors move rather than multiply."""
        ages = {e.peer: e.age for e in self.entries}
        held = set(ages)
        owner = self.owner
        for e in received:
            if e.peer != owner:
                cur = ages.get(e.peer)
                if cur is None or e.age < cur:
                    ages[e.peer] = e.age
        excess = len(ages) - self.capacity
        if excess <= 0:
            self.entries = [ViewEntry(p, a) for p, a in ages.items()]
            return
        sent_set = set(sent)
        keys = [(p in sent_set, p not in held, a) for p, a in ages.items()]
        ranked = sorted(range(len(keys)), key=keys.__getitem__, reverse=True)
        cut = keys[ranked[excess - 1]]
        drop = {i for i in ranked[:excess] if keys[i] > cut}
        ties = sorted(i for i in ranked if keys[i] == cut)
        drop.update(rng.sample(ties, excess - len(drop)))
        self.entries = [ViewEntry(p, a) for i, (p, a) in enumerate(ages.items()) if i not in drop]

    def check(self) -> None:
        peers = self.peers()
        assert len(peers) <= self.capacity, "view over capacity"
        assert self.owner not in peers, "self entry in view"
        assert len(set(peers)) == len(peers), "duplicate view entries"


_ENTRY = struct.Struct(f"<{ID_LEN}sH")


def encode_entries(entries: list[ViewEntry]) -> bytes:
    pack = _ENTRY.pack
    return struct.pack("<H", len(entries)) + b"".join(pack(e.peer, min(e.age, 0xFFFF)) for e in entries)


def decode_entries(data: bytes) -> list[ViewEntry]:
    if len(data) < 2:
        raise Malformed("short shuffle message")
    (n,) = struct.unpack_from("<H", data)
    if len(data) != 2 + n * _ENTRY.size:
        raise Malformed("bad shuffle message length")
    return [ViewEntry(peer, age) for peer, age in _ENTRY.iter_unpack(data[2:])]


class PeerSampler:
    """Per-node peer sampling state. Message transport is the caller's job:
    :meth:`start_round` and :meth:`on_request` return what to send."""

    def __init__(self, owner: PeerId, rng: random.Random, capacity: int = 20, shuffle_size: int = 10):
        self.owner = owner
        self.rng = rng
        self.view = View(owner, capacity)
        self.shuffle_size = shuffle_size
        self._history: dict[PeerId, None] = {}
        self.pending: dict[PeerId, tuple[int, list[PeerId]]] = {}
        self.rounds = 0
        self.partner_down = 0

    def bootstrap(self, seeds: list[PeerId]) -> None:
        self.view.merge([ViewEntry(p, 0) for p in seeds], [], self.rng)
        self._remember(self.view.peers())

    def _remember(self, peers) -> None:
        for p in peers:
            if p != self.owner:
                self._history.setdefault(p)

    @property
    def history(self) -> list[PeerId]:
        return list(self._history)

    def history_size(self) -> int:
        return len(self._history)

    def _buffer(self, exclude: PeerId, with_self: bool) -> list[ViewEntry]:
        others = [e for e in self.view.entries if e.peer != exclude]
        picked = self.rng.sample(others, min(self.shuffle_size - with_self, len(others)))
        head = [ViewEntry(self.owner, 0)] if with_self else []
        return head + [ViewEntry(e.peer, e.age) for e in picked]

    def start_round(self) -> tuple[PeerId, bytes] | None:
        """Age the view and pick the shuffle partner; returns ``(partner, request)``."""
        self.rounds += 1
        for e in self.view.entries:
            e.age += 1
        partner = self.view.oldest()
        if partner is None:
            return None
        buf = self._buffer(partner.peer, True)
        # the partner now holds our fresh descriptor; its own entry goes first
        self.pending[partner.peer] = (self.rounds, [partner.peer] + [e.peer for e in buf[1:]])
        return partner.peer, encode_entries(buf)

    def on_request(self, frm: PeerId, payload: bytes) -> bytes:
        received = decode_entries(payload)
        # the reply carries no self-descriptor: the initiator already knows us
        buf = self._buffer(frm, False)
        self.view.merge(received, [e.peer for e in buf], self.rng)
        self._remember(e.peer for e in received)
        return encode_entries(buf)

    def on_response(self, frm: PeerId, payload: bytes) -> None:
        sent = self.pending.pop(frm, (0, []))[1]
        received = decode_entries(payload)
        self.view.merge(received, sent, self.rng)
        self._remember(e.peer for e in received)

    def on_timeout(self, partner: PeerId, round_no: int) -> bool:
        """Drop an unresponsive partner. Returns True if it was declared down."""
        pend = self.pending.get(partner)
        if pend is None or pend[0] != round_no:
            return False
        del self.pending[partner]
        self.view.remove(partner)
        self.partner_down += 1
        return True

    def sample(self, n: int, now: int = 0) -> SampleSet:
        hist = self.history
        if n > len(hist):
            raise InsufficientHistory(f"need {n} peers, history has {len(hist)}")
        return SampleSet(tuple(self.rng.sample(hist, n)), now)
