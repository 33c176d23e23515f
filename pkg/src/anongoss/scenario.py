"""Run one configured scenario end to end and collect its metrics.

A run warms up the overlay, starts churn, then issues delegations in waves:
each wave picks ``wave_size`` distinct origins at one tick, and waves are
``wave_spacing_ticks`` apart. After ``sim_ticks`` more ticks the run stops
and the adversaries are applied to the finished trace.
"""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field

from . import adversary
from .aggregation import make_aggregator
from .analysis import check_invariants
from .config import ScenarioConfig
from .delegation import PendingDelegation, Profile, delegate_task
from .node import Network, Params
from .onion import PhiTooSmall
from .sim import ChurnSpec, derive_rng

log = logging.getLogger(__name__)

OVERHEAD_KINDS = ("onion", "reply", "flood")

# metric name -> unit; every summary row uses one of these
METRIC_UNITS: dict[str, str] = {
    "delegations": "count",
    "delegations_skipped": "count",
    "delegation_delivery_rate": "fraction",
    "result_rate": "fraction",
    "result_latency_mean": "ticks",
    "mean_route_length": "relays",
    "messages_per_delegation": "messages",
    "messages_total": "messages",
    "gossip_messages": "messages",
    "wrong_key_events": "count",
    "delegation_give_ups": "count",
    "churn_leaves": "count",
    "churn_joins": "count",
    "collusion_deanon_rate": "fraction",
    "collusion_degree_mean": "degree",
    "collusion_degree_min": "degree",
    "delegate_degree_mean": "degree",
    "sniffer_identification_rate": "fraction",
    "sniffer_multi_hop_links": "count",
    "sniffer_degree_mean": "degree",
}


@dataclass(frozen=True)
class MetricsRecord:
    scenario: str
    metric: str
    value: float
    unit: str


@dataclass
class ScenarioResult:
    scenario: str
    config: ScenarioConfig
    net: Network
    delegations: list[PendingDelegation]
    metrics: list[MetricsRecord] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    reports: list[dict] = field(default_factory=list)

    def metric(self, name: str) -> float:
        for m in self.metrics:
            if m.metric == name:
                return m.value
        raise KeyError(name)


def params_from(cfg: ScenarioConfig) -> Params:
    names = {f for f in Params.__dataclass_fields__}
    return Params(**{k: getattr(cfg, k) for k in names if hasattr(cfg, k)})


def build_network(cfg: ScenarioConfig, keep_wire_bytes: bool = False) -> Network:
    net = Network(params_from(cfg), cfg.seed, keep_wire_bytes)
    net.add_peers(cfg.n_nodes)
    net.bootstrap()
    net.register_plugin(make_aggregator(cfg.aggregator, cfg.epsilon, cfg.window_rounds))
    net.start()
    return net


def _issue_wave(net: Network, cfg: ScenarioConfig, wave: int, count: int, out: list, skipped: list) -> None:
    rng = derive_rng(cfg.seed, f"wave/{wave}")
    live = [p for p in net.order if net.sim.is_live(p)]
    origins: list = []
    while live and len(origins) < count:
        origins += rng.sample(live, min(count - len(origins), len(live)))
    for origin in origins:
        profile = Profile(tuple(round(rng.uniform(0.0, 100.0), 6) for _ in range(cfg.profile_dim)))
        try:
            out.append(delegate_task(net.peers[origin], profile))
        except PhiTooSmall:
            skipped.append(origin)


def run_scenario(cfg: ScenarioConfig, scenario_id: str = "s0", keep_wire_bytes: bool = False) -> ScenarioResult:
    cfg.validate()
    net = build_network(cfg, keep_wire_bytes)
    net.warm_up(cfg.warmup_rounds)
    t0 = net.sim.now
    if cfg.leave_rate > 0 or cfg.join_rate > 0:
        net.sim.churn_schedule(ChurnSpec(cfg.leave_rate, cfg.join_rate))
    pending: list[PendingDelegation] = []
    skipped: list = []
    remaining = cfg.n_delegations
    wave = 0
    while remaining > 0:
        count = min(cfg.wave_size, remaining)
        at = t0 + wave * cfg.wave_spacing_ticks
        net.sim.call_at(at, lambda w=wave, c=count: _issue_wave(net, cfg, w, c, pending, skipped))
        remaining -= count
        wave += 1
    net.run_until(t0 + cfg.sim_ticks)
    log.info("scenario %s finished at tick %d", scenario_id, net.sim.now)
    if cfg.leave_rate == 0 and cfg.join_rate == 0:
        check_invariants(net)
    res = ScenarioResult(scenario_id, cfg, net, pending)
    _collect(res, skipped)
    return res


def _collect(res: ScenarioResult, skipped: list) -> None:
    net, cfg, sid = res.net, res.config, res.scenario
    stats = net.sim.stats
    index = {pid: i for i, pid in enumerate(net.order)}
    metrics: dict[str, float] = {}
    n = len(res.delegations)
    metrics["delegations"] = n
    metrics["delegations_skipped"] = len(skipped)

    received_tags = {t.tag.tag for p in net.peers.values() for t in p.tasks}
    delivered = sum(1 for d in res.delegations if d.tag.tag in received_tags)
    results = [d for d in res.delegations if d.result is not None]
    metrics["delegation_delivery_rate"] = delivered / n if n else 0.0
    metrics["result_rate"] = len(results) / n if n else 0.0
    metrics["result_latency_mean"] = statistics.fmean(d.result_at - d.created_at for d in results) if results else 0.0
    deleg_routes = [r for r in net.routes if r.purpose == "delegation"]
    metrics["mean_route_length"] = statistics.fmean(r.k for r in deleg_routes) if deleg_routes else 0.0
    overhead = sum(stats.by_kind[k] for k in OVERHEAD_KINDS)
    metrics["messages_per_delegation"] = overhead / n if n else 0.0
    metrics["messages_total"] = stats.sent
    metrics["gossip_messages"] = stats.by_kind["shuffle_req"] + stats.by_kind["shuffle_resp"]
    metrics["wrong_key_events"] = stats.counters["wrong_key"]
    metrics["delegation_give_ups"] = stats.counters["delegation_give_ups"]
    metrics["churn_leaves"] = stats.leaves
    metrics["churn_joins"] = stats.joins

    sidx = adversary.StateIndex.from_network(net)
    rng = derive_rng(cfg.seed, "adversary")
    if cfg.collusion_fraction > 0:
        reps = []
        for rec in deleg_routes:
            members = adversary.draw_colluders(net.order, cfg.collusion_fraction, rng, exclude=[rec.origin])
            cs = adversary.CollusionSet(members, sidx)
            target = adversary.RouteTarget(rec.delegate, rec.tags[-1], rec.k, rec.route_id)
            rep = adversary.analyze_collusion(cs, target, net.order, cfg.k_min)
            reps.append(rep)
            res.reports.append(rep.to_record(scenario=sid, f=cfg.collusion_fraction, k=rec.k, colluders=len(members)))
        metrics["collusion_deanon_rate"] = sum(r.fully_deanonymized for r in reps) / len(reps) if reps else 0.0
        metrics["collusion_degree_mean"] = statistics.fmean(r.degree for r in reps) if reps else 0.0
        metrics["collusion_degree_min"] = min((r.degree for r in reps), default=0.0)
    dview = []
    for pid in net.order:
        for task in net.peers[pid].tasks:
            rep = adversary.delegate_view(net, pid, task, sidx)
            dview.append(rep)
            res.reports.append(rep.to_record(scenario=sid, delegate=index[pid]))
    metrics["delegate_degree_mean"] = statistics.fmean(r.degree for r in dview) if dview else 0.0
    if cfg.sniffer:
        pairs = adversary.sniffer_trace(net, cfg.return_mode, rng)
        for rep, hit in pairs:
            res.reports.append(rep.to_record(scenario=sid, identified=hit))
        metrics["sniffer_identification_rate"] = sum(h for _, h in pairs) / len(pairs) if pairs else 0.0
        metrics["sniffer_degree_mean"] = statistics.fmean(r.degree for r, _ in pairs) if pairs else 0.0
        metrics["sniffer_multi_hop_links"] = adversary.Sniffer(net.sim.trace).multi_hop_chains()

    res.metrics = [MetricsRecord(sid, k, float(v), METRIC_UNITS[k]) for k, v in metrics.items()]

    for d in res.delegations:
        res.events.append(
            {
                "scenario": sid,
                "event": "delegation",
                "delegation_id": d.delegation_id,
                "origin": next(index[p] for p, peer in net.peers.items() if d.tag.tag in peer.pending),
                "delegate": index[d.delegate],
                "k": d.plan.k,
                "attempts": d.attempts,
                "created_at": d.created_at,
                "result_at": d.result_at,
                "result_via": d.result_via,
                "gave_up": d.gave_up,
            }
        )
    for r in stats.to_records():
        res.events.append({"scenario": sid, "event": "metric", **r})
