"""Post-run checks over a finished network. Evaluation only: these read the
ground-truth route log, which no protocol code consults."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from .collection import flood_mode
from .crypto import PeerId
from .node import Network, RouteRecord
from .onion import RouteHopState


class InvariantViolation(AssertionError):
    pass


def route_states(net: Network, rec: RouteRecord) -> list[tuple[PeerId, RouteHopState | None]]:
    """Each hop's stored state for ``rec`` (None if the hop never saw it)."""
    out = []
    for j, hop in enumerate(rec.relays):
        table = net.peers[hop].routes
        state = table._relayed.get(rec.tags[j + 1])
        out.append((hop, state))
    out.append((rec.delegate, net.peers[rec.delegate].routes._terminal.get(rec.tags[-1])))
    return out


def knowledge_violations(net: Network, recs: list[RouteRecord] | None = None) -> list[str]:
    """Every relay state must name exactly its route neighbours."""
    bad = []
    for rec in recs if recs is not None else net.routes:
        hops = (rec.origin,) + rec.relays + (rec.delegate,)
        for j, (hop, state) in enumerate(route_states(net, rec), start=1):
            if state is None:
                continue
            want_up = hops[j - 1]
            want_down = hops[j + 1] if j + 1 < len(hops) else None
            if state.upstream != want_up or state.downstream != want_down:
                bad.append(f"route {rec.route_id} hop {j}: wrong adjacency")
            if len(state.identities) != (1 if want_down is None else 2):
                bad.append(f"route {rec.route_id} hop {j}: {len(state.identities)} identities")
    return bad


def identity_leaks(net: Network, recs: list[RouteRecord] | None = None) -> list[str]:
    """Scan relay and delegate state for route origins.

    The first relay's upstream field is its own neighbour, so for that one
    hop the scan covers everything except that field. Delegated tasks are
    scanned whole, on every node.
    """
    leaks = []
    for rec in recs if recs is not None else net.routes:
        for j, (hop, state) in enumerate(route_states(net, rec)):
            if state is None:
                continue
            blob = state.to_bytes()
            if j == 0:
                blob = blob.replace(state.upstream, b"", 1) if state.upstream == rec.origin else blob
            if rec.origin in blob:
                leaks.append(f"route {rec.route_id}: origin in state at hop {j + 1}")
    origins = {rec.origin for rec in (recs if recs is not None else net.routes)}
    for pid, peer in net.peers.items():
        for task in peer.tasks:
            blob = task.to_bytes()
            if any(o in blob for o in origins):
                leaks.append(f"task at {pid.hex()[:8]} holds an origin id")
    return leaks


def view_violations(net: Network) -> list[str]:
    bad = []
    for pid, peer in net.peers.items():
        try:
            peer.sampler.view.check()
        except AssertionError as e:
            bad.append(f"{pid.hex()[:8]}: {e}")
    return bad


def check_invariants(net: Network) -> None:
    stats = net.sim.stats
    problems = view_violations(net) + knowledge_violations(net) + identity_leaks(net)
    if stats.in_flight < 0:
        problems.append("more deliveries than sends")
    if len(net.sim.trace) != stats.sent:
        problems.append("trace length differs from send count")
    if problems:
        raise InvariantViolation("; ".join(problems[:5]))


# -- flood trace comparison -------------------------------------------------------


@dataclass
class TraceComparison:
    rule_violations: list[str] = field(default_factory=list)
    origin_features: dict[str, set] = field(default_factory=lambda: defaultdict(set))
    other_features: dict[str, set] = field(default_factory=lambda: defaultdict(set))
    origin_records: int = 0
    other_records: int = 0

    def distinguishing(self) -> list[str]:
        """Features whose origin values never occur among non-origins."""
        out = [f"rule: {v}" for v in self.rule_violations]
        for feat in ("delay", "duplicate_forwards", "invalid_forwards"):
            extra = self.origin_features[feat] - self.other_features[feat]
            if extra:
                out.append(f"{feat}: origin-only values {sorted(extra)}")
        return out


def onion_arrivals(net: Network) -> dict[PeerId, list[tuple[int, PeerId]]]:
    """Per node, ``(arrival tick, sender)`` of every onion cell, from the trace."""
    out: dict[PeerId, list[tuple[int, PeerId]]] = defaultdict(list)
    for t in net.sim.trace:
        if t.kind == "onion" and t.arrive_at is not None:
            out[t.to].append((t.arrive_at, t.frm))
    return out


def _window_bounds(arrivals: list[tuple[int, PeerId]], now: int, window: float) -> tuple[set[PeerId], set[PeerId]]:
    """Senders that must be in the window set (arrived before ``now``) and
    those that may be (arrived up to ``now``; same-tick order is not traced)."""
    must = {frm for at, frm in arrivals if now - window < at < now}
    may = must | {frm for at, frm in arrivals if at == now}
    return must, may


def compare_flood_traces(net: Network) -> TraceComparison:
    """Check every node's flood handling against the forwarding rule and
    tabulate behaviour features for origins and non-origins separately.

    ``full`` fan-out must equal the node's view size at the time, which
    after warm-up with no churn is the view capacity; ``onion_window``
    fan-out is recomputed from the link trace.
    """
    mode = flood_mode(net.params.return_mode)
    pending_tags = defaultdict(set)
    for pid, peer in net.peers.items():
        for tag in peer.pending:
            pending_tags[pid].add(tag)
    cmp = TraceComparison()
    arrivals = onion_arrivals(net) if mode == "onion_window" else {}
    cache: dict[tuple[PeerId, int], tuple[set[PeerId], set[PeerId]]] = {}
    for pid in net.order:
        peer = net.peers[pid]
        for rec in peer.flood_log:
            is_origin = rec.tag in pending_tags[pid]
            feats = cmp.origin_features if is_origin else cmp.other_features
            if is_origin:
                cmp.origin_records += 1
            else:
                cmp.other_records += 1
            if rec.duplicate:
                feats["duplicate_forwards"].add(len(rec.recipients))
                if rec.recipients:
                    cmp.rule_violations.append(f"{pid.hex()[:8]} forwarded a duplicate")
                continue
            if not rec.valid:
                feats["invalid_forwards"].add(len(rec.recipients))
                if rec.recipients:
                    cmp.rule_violations.append(f"{pid.hex()[:8]} forwarded an invalid flood")
                continue
            feats["delay"].add(rec.sent_at - rec.received_at)
            feats["fan_out"].add(len(rec.recipients))
            if len(set(rec.recipients)) != len(rec.recipients) or pid in rec.recipients:
                cmp.rule_violations.append(f"{pid.hex()[:8]} bad recipient list")
            if mode == "onion_window":
                key = (pid, rec.sent_at)
                if key not in cache:
                    cache[key] = _window_bounds(arrivals.get(pid, []), rec.sent_at, net.params.window_ticks)
                must, may = cache[key]
                if not must <= set(rec.recipients) <= may:
                    cmp.rule_violations.append(f"{pid.hex()[:8]} window set mismatch at {rec.sent_at}")
            elif len(rec.recipients) != net.params.view_capacity:
                cmp.rule_violations.append(f"{pid.hex()[:8]} fan-out {len(rec.recipients)} != view size")
    return cmp
