import math

import numpy as np
import pytest

from anongoss.sim import (
    Callback,
    ChurnSpec,
    InvalidSpec,
    PastEvent,
    SimEvent,
    Simulator,
    geometric,
    derive_rng,
)


class Recorder:
    def __init__(self, sim, name):
        self.sim, self.name = sim, name
        self.got: list = []
        self.rounds = 0
        self.left = self.joined = 0

    def on_message(self, frm, kind, circuit, payload):
        self.got.append((self.sim.now, frm, payload))

    def on_gossip_round(self):
        self.rounds += 1

    def on_timer(self, token):
        self.got.append((self.sim.now, "timer", token))

    def on_leave(self):
        self.left += 1

    def on_join(self):
        self.joined += 1


def make_sim(n=2, seed=0, **kw):
    sim = Simulator(seed, **kw)
    nodes = {}
    for i in range(n):
        nid = bytes([i]) * 32
        nodes[nid] = Recorder(sim, i)
        sim.add_node(nid, nodes[nid])
    return sim, list(nodes), nodes


A, B = bytes([0]) * 32, bytes([1]) * 32


class TestSchedule:
    def test_now_runs_after_current(self):
        sim = Simulator(0)
        order = []

        def first():
            order.append("first")
            sim.call_at(sim.now, lambda: order.append("same tick"))

        sim.call_at(5, first)
        sim.call_at(5, lambda: order.append("second"))
        sim.run_until(5)
        assert order == ["first", "second", "same tick"]

    def test_past_event(self):
        sim = Simulator(0)
        sim.run_until(10)
        with pytest.raises(PastEvent):
            sim.schedule(SimEvent(9, Callback(lambda: None)))

    def test_tie_break_in_schedule_order(self):
        sim = Simulator(0)
        order = []
        for i in range(10):
            sim.call_at(3, lambda i=i: order.append(i))
        sim.run_until(3)
        assert order == list(range(10))

    def test_run_until_past(self):
        sim = Simulator(0)
        sim.run_until(4)
        with pytest.raises(PastEvent):
            sim.run_until(3)


class TestSend:
    def test_unit_latency(self):
        sim, _, nodes = make_sim(latency=(1, 1))
        sim.run_until(7)
        sim.send(A, B, b"hi")
        sim.run_until(20)
        assert nodes[B].got == [(8, A, b"hi")]

    def test_departed_recipient_dropped(self):
        sim, _, nodes = make_sim(latency=(5, 5))
        sim.churn_schedule(ChurnSpec(script=[(2, "leave", B)]))
        sim.send(A, B, b"x")
        stats = sim.run_until(50)
        assert nodes[B].got == []
        assert stats.dropped == 1 and stats.delivered == 0
        assert stats.sent == stats.delivered + stats.dropped

    def test_latency_mean_within_3_sigma(self):
        sim, _, _ = make_sim(seed=42, latency=(1, 10))
        for _ in range(10_000):
            sim.send(A, B, b"")
        delays = [t.arrive_at - t.at for t in sim.trace]
        # discrete uniform on 1..10: mean 5.5, variance (10^2 - 1) / 12
        sigma_mean = math.sqrt((10**2 - 1) / 12 / 10_000)
        assert abs(np.mean(delays) - 5.5) < 3 * sigma_mean
        assert min(delays) == 1 and max(delays) == 10

    def test_loss(self):
        sim, _, nodes = make_sim(seed=3, loss=0.5)
        for _ in range(1000):
            sim.send(A, B, b"")
        stats = sim.run_until(100)
        assert 400 < stats.lost < 600
        assert stats.sent == stats.delivered + stats.lost
        assert len(nodes[B].got) == stats.delivered

    def test_digest_mode_preserves_equality(self):
        sim, _, _ = make_sim(keep_wire_bytes=False)
        sim.send(A, B, b"same")
        sim.send(A, B, b"same")
        sim.send(A, B, b"other")
        w = [t.wire_bytes for t in sim.trace]
        assert w[0] == w[1] != w[2]
        assert len(w[0]) == 16

    def test_bad_latency_range(self):
        with pytest.raises(InvalidSpec):
            Simulator(0, latency=(0, 3))


class TestRun:
    def test_empty_queue(self):
        stats = Simulator(0).run_until(1000)
        assert stats.sent == 0 and stats.delivered == 0
        assert stats.time == 1000

    def _busy_run(self, seed):
        sim, ids, _ = make_sim(n=5, seed=seed)
        rng = derive_rng(seed, "test")
        for t in range(0, 200, 3):
            sim.call_at(t, lambda: sim.send(rng.choice(ids), rng.choice(ids), rng.randbytes(8)))
        return sim.run_until(400), sim

    def test_deterministic(self):
        (s1, _), (s2, _) = self._busy_run(9), self._busy_run(9)
        assert s1.to_jsonl() == s2.to_jsonl()

    def test_message_count_matches_trace(self):
        stats, sim = self._busy_run(4)
        assert stats.sent == len(sim.trace)
        assert stats.sent == stats.delivered + stats.dropped + stats.lost + stats.in_flight

    def test_causality(self):
        _, sim = self._busy_run(5)
        assert all(t.arrive_at > t.at for t in sim.trace)

    def test_records_shape(self):
        stats, _ = self._busy_run(1)
        for rec in stats.to_records():
            assert set(rec) == {"name", "time", "value"}

    def test_gossip_rounds_periodic(self):
        sim, ids, nodes = make_sim(n=1)
        sim.start_gossip(ids[0], 10, 3)
        sim.run_until(99)
        assert nodes[ids[0]].rounds == 10

    def test_timer(self):
        sim, ids, nodes = make_sim(n=1)
        sim.set_timer(ids[0], 4, "tok")
        sim.run_until(10)
        assert nodes[ids[0]].got == [(4, "timer", "tok")]


def expected_leaves_and_var(n_nodes, leave, join, ticks):
    """Independent oracle: each node is a two-state chain, starting up at
    tick 0, with per-tick leave/join probabilities. Exact distribution of
    one node's departure count by dynamic programming."""
    max_c = ticks + 1
    up = np.zeros(max_c)
    down = np.zeros(max_c)
    up[0] = 1.0
    for _ in range(ticks):
        new_up = up * (1 - leave)
        new_up += down * join
        new_down = down * (1 - join)
        new_down[1:] += up[:-1] * leave
        up, down = new_up, new_down
    dist = up + down
    c = np.arange(max_c)
    mean = float((dist * c).sum())
    var = float((dist * c * c).sum()) - mean**2
    return n_nodes * mean, n_nodes * var


class TestChurn:
    def test_zero_rate_constant(self):
        sim, ids, _ = make_sim(n=10)
        sim.churn_schedule(ChurnSpec(0.0, 0.0))
        sim.run_until(5000)
        assert sim.live == set(ids)
        assert sim.stats.leaves == 0

    def test_scripted_leave(self):
        sim, ids, nodes = make_sim(latency=(1, 1))
        sim.churn_schedule(ChurnSpec(script=[(10, "leave", B)]))
        for t in (5, 9, 10, 11, 20):
            sim.call_at(t, lambda: sim.send(A, B, bytes([sim.now])))
        sim.run_until(30)
        # the leave was scheduled first, so it precedes the tick-10 arrival
        assert [g[0] for g in nodes[B].got] == [6]
        assert not sim.is_live(B)

    def test_scripted_rejoin(self):
        sim, ids, nodes = make_sim()
        sim.churn_schedule(ChurnSpec(script=[(5, "leave", B), (8, "join", B)]))
        sim.run_until(10)
        assert sim.is_live(B) and nodes[B].left == 1 and nodes[B].joined == 1

    def test_rejoin_does_not_double_rounds(self):
        sim, ids, nodes = make_sim(n=1)
        sim.start_gossip(ids[0], 10, 0)
        sim.churn_schedule(ChurnSpec(script=[(15, "leave", ids[0]), (17, "join", ids[0])]))
        sim.run_until(1000)
        assert 98 <= nodes[ids[0]].rounds <= 101

    @pytest.mark.parametrize("spec", [ChurnSpec(-0.1), ChurnSpec(0.0, 1.5), ChurnSpec(script=[(1, "explode", A)])])
    def test_invalid_spec(self, spec):
        sim, _, _ = make_sim()
        with pytest.raises(InvalidSpec):
            sim.churn_schedule(spec)

    def test_departure_count_matches_oracle(self):
        leave, join, ticks, n = 0.01, 0.05, 10_000, 100
        sim, ids, _ = make_sim(n=n, seed=17)
        sim.churn_schedule(ChurnSpec(leave, join))
        sim.run_until(ticks)
        mean, var = expected_leaves_and_var(n, leave, join, ticks)
        assert abs(sim.stats.leaves - mean) < 3 * math.sqrt(var)

    def test_geometric_mean(self):
        rng = derive_rng(0, "g")
        xs = [geometric(rng, 0.1) for _ in range(20_000)]
        # mean 1/p, variance (1-p)/p^2
        assert abs(np.mean(xs) - 10) < 3 * math.sqrt(90 / 20_000)
        assert min(xs) >= 1
