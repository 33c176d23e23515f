import math

import pytest

from anongoss.crypto import Malformed, SymKey
from anongoss.delegation import (
    DelegationMsg,
    PendingDelegation,
    Profile,
    delegate_task,
    on_delegation_received,
    retry_policy,
)
from anongoss.onion import PhiTooSmall, RoutePlan
from anongoss.sim import ChurnSpec

from conftest import make_net, settle


class Recording:
    def __init__(self):
        self.seen = []

    def on_task(self, peer, task):
        self.seen.append((peer.now, task))

    def on_gossip_round(self, peer):
        pass

    def on_message(self, peer, frm, kind, payload):
        pass

    def poll_result(self, peer, task):
        return None


def pending_at(last_sent, attempts=1, **kw):
    return PendingDelegation(1, Profile((1.0,)), SymKey(bytes(32)), None, b"d" * 32,
                             RoutePlan((), b"d" * 32), 0, last_sent, attempts, **kw)


class TestProfile:
    def test_round_trip(self):
        p = Profile((1.5, -2.0, 3e10))
        assert Profile.from_bytes(p.to_bytes()) == p and p.dim == 3

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            Profile((math.nan,))
        bad = Profile((1.0,)).to_bytes()[:2] + bytes.fromhex("000000000000f07f")
        with pytest.raises(Malformed):
            Profile.from_bytes(bad)

    @pytest.mark.parametrize("raw", [b"", b"\x01\x00", b"\x01\x00" + bytes(9)])
    def test_malformed(self, raw):
        with pytest.raises(Malformed):
            Profile.from_bytes(raw)


class TestMessage:
    def test_round_trip(self):
        m = DelegationMsg(Profile((4.0, 2.0)), SymKey(b"k" * 32))
        assert DelegationMsg.from_bytes(m.to_bytes()) == m

    def test_no_origin_bytes(self, small_net):
        origin = small_net.peers[small_net.order[0]]
        d = delegate_task(origin, Profile((3.25,)))
        wire = DelegationMsg(d.profile, d.key).to_bytes()
        assert origin.id not in wire
        assert origin.id[:8] not in wire


class TestDelegateTask:
    def test_profile_reaches_delegate(self, small_net):
        net = small_net
        origin = net.peers[net.order[4]]
        d = delegate_task(origin, Profile((12.5, 7.0)))
        settle(net)
        tasks = net.peers[d.delegate].tasks
        assert len(tasks) == 1
        assert tasks[0].profile.to_bytes() == d.profile.to_bytes()
        assert tasks[0].tag == d.tag

    def test_delegate_state_has_no_origin(self, small_net):
        net = small_net
        origin = net.peers[net.order[2]]
        d = delegate_task(origin, Profile((1.0,)))
        settle(net)
        assert origin.id not in net.peers[d.delegate].stored_state_bytes()
        assert d.delegate != origin.id

    def test_arrives_within_hop_bound(self):
        net = make_net(seed=6)
        d = delegate_task(net.peers[net.order[0]], Profile((1.0,)))
        net.run_until(net.sim.now + (net.params.k_max + 1) * net.params.latency_max)
        assert len(net.peers[d.delegate].tasks) == 1

    def test_fresh_key_and_route_each_time(self, small_net):
        origin = small_net.peers[small_net.order[1]]
        a = delegate_task(origin, Profile((1.0,)))
        b = delegate_task(origin, Profile((1.0,)))
        assert a.key != b.key and a.tag != b.tag
        ra, rb = (small_net.routes[x.route_ids[0]] for x in (a, b))
        assert ra.tags != rb.tags

    def test_phi_too_small(self):
        net = make_net(n=30, warm=0, phi_size=25)
        with pytest.raises(PhiTooSmall):
            delegate_task(net.peers[net.order[0]], Profile((1.0,)))

    def test_plugin_sees_task_same_tick(self):
        plug = Recording()
        net = make_net(plugin=plug)
        d = delegate_task(net.peers[net.order[0]], Profile((2.0,)))
        settle(net)
        (at, task), = plug.seen
        assert task.received_at == at
        assert net.peers[d.delegate].tasks == [task]

    def test_no_plugin_stays_pending(self):
        net = make_net(plugin=False)
        d = delegate_task(net.peers[net.order[0]], Profile((2.0,)))
        settle(net, 2000)
        assert all(t.status == "pending" for t in net.peers[d.delegate].tasks)
        assert d.result is None


class TestReceive:
    def test_duplicate_kept_separately(self, small_net):
        peer = small_net.peers[small_net.order[3]]
        raw = DelegationMsg(Profile((1.0,)), SymKey(b"z" * 32)).to_bytes()
        on_delegation_received(peer, raw, b"t" * 16)
        on_delegation_received(peer, raw, b"u" * 16)
        assert len(peer.tasks) == 2

    def test_malformed_counted(self, small_net):
        peer = small_net.peers[small_net.order[3]]
        assert on_delegation_received(peer, b"Dshort", b"t" * 16) is None
        assert small_net.sim.stats.counters["malformed_delegations"] == 1


class TestRetryPolicy:
    def test_wait_before_timeout(self):
        assert retry_policy(pending_at(100), 150, 100, 3) == "wait"

    def test_rebuild_after_timeout(self):
        assert retry_policy(pending_at(100), 200, 100, 3) == "rebuild_and_resend"

    def test_give_up_at_limit(self):
        assert retry_policy(pending_at(100, attempts=3), 500, 100, 3) == "give_up"

    def test_confirmed_waits(self):
        assert retry_policy(pending_at(0, confirmed=True), 10**6, 100, 3) == "wait"

    def test_delegate_gone_retries_then_gives_up(self):
        net = make_net(seed=11, retry_ticks=200, max_retries=3, probe_backoff_ticks=10**9)
        origin = net.peers[net.order[0]]
        d = delegate_task(origin, Profile((1.0,)))
        first = d.delegate
        net.sim.churn_schedule(ChurnSpec(script=[(net.sim.now + 1, "leave", first)]))
        settle(net, 250)
        assert d.attempts == 2 and d.delegate != first
        assert len(d.route_ids) == 2
        # with no probing nothing confirms the task, so attempts run out
        settle(net, 1000)
        assert d.attempts == 3 and d.gave_up
        assert net.sim.stats.counters["delegation_give_ups"] == 1
