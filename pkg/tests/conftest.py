from __future__ import annotations

import pytest

from anongoss.aggregation import IdentityAggregator
from anongoss.node import Network, Params


def make_net(n: int = 30, seed: int = 1, warm: int = 40, plugin=None, keep_wire_bytes: bool = True, **params) -> Network:
    """A started, warmed-up network. ``phi_size`` defaults to what n allows."""
    params.setdefault("phi_size", min(25, n - 1))
    net = Network(Params(**params), seed, keep_wire_bytes)
    net.add_peers(n)
    net.bootstrap()
    if plugin is not False:
        net.register_plugin(plugin or IdentityAggregator())
    net.start()
    net.warm_up(warm)
    return net


def settle(net: Network, ticks: int = 600) -> None:
    net.run_until(net.sim.now + ticks)


@pytest.fixture
def small_net() -> Network:
    return make_net()


def averaging_net(values, seed: int = 3, epsilon: float = 1e-8, window: int = 5, warm_ticks: int = 500):
    """Delegates holding one scalar task each, with a quiescent gossip
    schedule: unit latency and round offsets i % 8, so every exchange started
    in a round has completed by tick 9 of that round.

    Returns ``(net, aggregator, t0)``; round r ends at ``t0 + 10 r - 1``.
    """
    from anongoss.aggregation import AveragingAggregator
    from anongoss.crypto import MatchTag, SymKey
    from anongoss.delegation import DelegatedTask, Profile

    net = Network(Params(latency_min=1, latency_max=1, phi_size=min(40, len(values) - 1)), seed)
    net.add_peers(len(values))
    net.bootstrap()
    agg = AveragingAggregator(epsilon, window)
    net.register_plugin(agg)
    for i, pid in enumerate(net.order):
        net.sim.start_gossip(pid, 10, i % 8)
    net.run_until(warm_ticks)
    for pid, v in zip(net.order, values):
        peer = net.peers[pid]
        task = DelegatedTask(Profile((float(v),)), SymKey(bytes(32)), bytes(16), net.sim.now, MatchTag(pid))
        peer.tasks.append(task)
        agg.on_task(peer, task)
    return net, agg, warm_ticks
