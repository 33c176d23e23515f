"""Threat harness: colluding relays, a global passive sniffer and a curious
delegate, each reduced to an :class:`AnonymityReport`.

Adversaries see only what they could see in a run: the stored route states
of colluding members and the link trace. Plaintexts are never read; route
states and trace records hold none.

The degree of anonymity is the entropy of a uniform posterior over the
candidate set, normalised by ``log2`` of the number of honest nodes.
"""

from __future__ import annotations

import math
import random
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

from .crypto import PeerId
from .onion import RouteHopState
from .sim import LinkTransmission


class UnknownTarget(KeyError):
    pass


@dataclass(frozen=True)
class RouteTarget:
    """What the adversary is trying to attribute: the route that ends at
    ``delegate`` over the link tagged ``link_tag``. ``k`` is the route's relay
    count, used only to decide whether a recovered chain spans every relay."""

    delegate: PeerId
    link_tag: bytes
    k: int
    route_id: int = -1


class StateIndex:
    """Every node's stored route states, indexed by link tag and owner.

    Built once per run; a :class:`CollusionSet` only ever sees the entries
    owned by its members.
    """

    def __init__(self, states: dict[PeerId, list[RouteHopState]]):
        self.relayed: dict[bytes, tuple[PeerId, RouteHopState]] = {}
        self.terminal: dict[bytes, tuple[PeerId, RouteHopState]] = {}
        for owner in sorted(states):
            for s in states[owner]:
                if s.downstream_tag is None:
                    self.terminal[s.route_tag] = (owner, s)
                else:
                    self.relayed[s.downstream_tag] = (owner, s)

    @classmethod
    def from_network(cls, net) -> "StateIndex":
        return cls({pid: p.routes.states() for pid, p in net.peers.items()})


@dataclass
class CollusionSet:
    members: frozenset[PeerId]
    index: StateIndex

    @classmethod
    def from_network(cls, net, members: Iterable[PeerId], index: StateIndex | None = None) -> "CollusionSet":
        return cls(frozenset(members), index or StateIndex.from_network(net))

    def pooled(self) -> list[RouteHopState]:
        """The union of the members' stored states."""
        out = [s for o, s in self.index.relayed.values() if o in self.members]
        return out + [s for o, s in self.index.terminal.values() if o in self.members]

    def relay_state(self, downstream_tag: bytes) -> RouteHopState | None:
        hit = self.index.relayed.get(downstream_tag)
        return hit[1] if hit is not None and hit[0] in self.members else None

    def terminal_state(self, delegate: PeerId, link_tag: bytes) -> RouteHopState | None:
        hit = self.index.terminal.get(link_tag)
        return hit[1] if hit is not None and hit[0] == delegate and delegate in self.members else None


@dataclass(frozen=True)
class AnonymityReport:
    target_route: int
    candidate_set: frozenset[PeerId]
    degree: float
    fully_deanonymized: bool
    chain_length: int = 0
    kind: str = "collusion"

    def to_record(self, **extra) -> dict:
        rec = {
            "kind": self.kind,
            "route_id": self.target_route,
            "candidates": len(self.candidate_set),
            "degree": round(self.degree, 12),
            "deanonymized": self.fully_deanonymized,
            "chain_length": self.chain_length,
        }
        rec.update(extra)
        return rec


def degree(candidates: int, n_honest: int) -> float:
    if candidates < 1:
        raise ValueError("empty candidate set")
    if n_honest <= 1:
        return 0.0
    return min(1.0, math.log2(candidates) / math.log2(n_honest))


def _report(route_id: int, cand: frozenset[PeerId], n_honest: int, chain: int, kind: str) -> AnonymityReport:
    d = degree(len(cand), n_honest)
    return AnonymityReport(route_id, cand, d, len(cand) == 1, chain, kind)


def walk_chain(cs: CollusionSet, target: RouteTarget) -> list[RouteHopState]:
    """Colluding relay states reachable upstream from the target link,
    nearest the delegate first. Links are joined by their tags only."""
    chain: list[RouteHopState] = []
    tag = target.link_tag
    seen: set[bytes] = set()
    while tag not in seen:
        seen.add(tag)
        s = cs.relay_state(tag)
        if s is None:
            break
        chain.append(s)
        tag = s.route_tag
    return chain


def analyze_collusion(
    cs: CollusionSet,
    target: RouteTarget,
    nodes: Sequence[PeerId],
    k_min: int = 1,
) -> AnonymityReport:
    """Pool the colluders' states and bound the route's origin.

    The chain of colluding relays is recovered upstream from the delegate's
    link. When it covers all ``k`` relays the upstream of its head is the
    origin. Otherwise every honest node except the delegate stays a
    candidate, minus the chain head's upstream when the chain is shorter
    than ``k_min`` (that node must itself be a relay).
    """
    honest = [n for n in nodes if n not in cs.members]
    if target.delegate in cs.members and cs.terminal_state(target.delegate, target.link_tag) is None:
        raise UnknownTarget(target.link_tag.hex())
    chain = walk_chain(cs, target)
    if chain and len(chain) == target.k:
        origin = chain[-1].upstream
        return _report(target.route_id, frozenset([origin]), len(honest), len(chain), "collusion")
    excluded = {target.delegate}
    if len(chain) < k_min:
        head_up = chain[-1].upstream if chain else None
        if head_up is None and target.delegate in cs.members:
            head_up = cs.terminal_state(target.delegate, target.link_tag).upstream
        if head_up is not None:
            excluded.add(head_up)
    cand = frozenset(n for n in honest if n not in excluded)
    return _report(target.route_id, cand, len(honest), len(chain), "collusion")


def delegate_view(net, delegate: PeerId, task, index: StateIndex | None = None) -> AnonymityReport:
    """What an honest-but-curious delegate alone can infer about a task's origin."""
    peer = net.peers[delegate]
    if not any(t is task for t in peer.tasks):
        raise UnknownTarget("task not held by this delegate")
    cs = CollusionSet.from_network(net, [delegate], index)
    rep = analyze_collusion(cs, RouteTarget(delegate, task.route_tag, k=-1), net.order, net.params.k_min)
    return AnonymityReport(rep.target_route, rep.candidate_set, rep.degree, rep.fully_deanonymized, 0, "delegate")


def draw_colluders(nodes: Sequence[PeerId], f: float, rng: random.Random, exclude: Iterable[PeerId] = ()) -> frozenset[PeerId]:
    """Each node outside ``exclude`` colludes independently with probability f."""
    skip = set(exclude)
    return frozenset(n for n in nodes if n not in skip and rng.random() < f)


def collusion_oracle(f: float, k_min: int = 5, k_max: int = 20) -> float:
    """P(every relay colludes) for k ~ U{k_min..k_max} and i.i.d. colluders."""
    return sum(f**k for k in range(k_min, k_max + 1)) / (k_max - k_min + 1)


# -- passive sniffer ------------------------------------------------------------


class Sniffer:
    """Global passive observer that links transmissions by wire-byte equality.

    Circuit tags differ on every link, so only identical bodies connect two
    hops. A chain is a run of equal-bodied transmissions where each one
    leaves the node the previous one arrived at.
    """

    def __init__(self, trace: Sequence[LinkTransmission], kinds: Iterable[str] = ("reply",)):
        self.kinds = frozenset(kinds)
        self._groups: dict[tuple[str, bytes], list[LinkTransmission]] = defaultdict(list)
        for t in trace:
            if t.kind in self.kinds:
                self._groups[(t.kind, t.wire_bytes)].append(t)

    def follow(self, start: LinkTransmission) -> list[LinkTransmission]:
        group = self._groups.get((start.kind, start.wire_bytes), [])
        chain = [start]
        used = {id(start)}
        while True:
            cur = chain[-1]
            nxt = next(
                (t for t in group if id(t) not in used and t.frm == cur.to and t.at >= cur.at),
                None,
            )
            if nxt is None:
                return chain
            chain.append(nxt)
            used.add(id(nxt))

    def multi_hop_chains(self) -> int:
        """Number of linked hop pairs across the trace (0 means no linking)."""
        links = 0
        for group in self._groups.values():
            if len(group) < 2:
                continue
            senders = defaultdict(list)
            for t in group:
                senders[t.frm].append(t)
            for t in group:
                links += sum(1 for u in senders.get(t.to, ()) if u.at >= t.at)
        return links

    def attribute(
        self,
        first_hop: LinkTransmission,
        nodes: Sequence[PeerId],
        rng: random.Random,
        route_id: int = -1,
    ) -> tuple[AnonymityReport, PeerId]:
        """Report on one reply plus the sniffer's single best guess of its terminal."""
        chain = self.follow(first_hop)
        if len(chain) >= 2:
            guess = chain[-1].to
            cand = frozenset([guess])
        else:
            cand = frozenset(nodes)
            guess = rng.choice(list(nodes))
        return _report(route_id, cand, len(nodes), len(chain), "sniffer"), guess


def sniffer_trace(net, mode: str, rng: random.Random) -> list[tuple[AnonymityReport, bool]]:
    """Attribute every delegate-originated reply (pull modes) or flood (push
    modes). Returns reports paired with whether the guess hit the true origin."""
    trace = net.sim.trace
    nodes = list(net.order)
    if mode.startswith("push"):
        out = []
        for rec in net.routes:
            if rec.purpose != "delegation":
                continue
            cand = frozenset(nodes)
            guess = rng.choice(nodes)
            out.append((_report(rec.route_id, cand, len(nodes), 1, "sniffer"), guess == rec.origin))
        return out
    sniffer = Sniffer(trace, ("reply",))
    first: dict[tuple[PeerId, bytes], LinkTransmission] = {}
    for t in trace:
        if t.kind == "reply":
            first.setdefault((t.frm, t.circuit), t)
    out = []
    for rec in net.routes:
        if rec.purpose != "probe":
            continue
        start = first.get((rec.delegate, rec.tags[-1]))
        if start is None:
            continue
        rep, guess = sniffer.attribute(start, nodes, rng, rec.route_id)
        out.append((rep, guess == rec.origin))
    return out
