from __future__ import annotations

import random

from hypothesis import given
from hypothesis import strategies as st

from causalkv.bench import WorkloadConfig, run_experiment
from causalkv.checker import check_trace
from causalkv.cluster import run_scenario
from causalkv.contrarian import ContrarianClient, ContrarianPartition
from causalkv.storage import Version
from causalkv.transport import Kind, Schedule

from conftest import keys_on, make_partition, msg, small_cluster


def scenario_versions(res):
    """key -> sorted creation timestamps across the cluster."""
    out = {}
    for p in res.cluster.partitions.values():
        for key, chain in p.store.chains.items():
            out[key] = [v.creation_ts for v in chain]
    return out


# -- PUT -------------------------------------------------------------------


def test_put_after_client_ts_100_gets_101():
    res = run_scenario("fig1", "contrarian", "1.5")
    x, y = res.keys
    assert scenario_versions(res)[x] == [70, 101]


def test_fig1_y1_gets_102():
    res = run_scenario("fig1", "contrarian", "1.5")
    x, y = res.keys
    assert scenario_versions(res)[y] == [70, 102]


def test_first_put_ever_is_ts_1():
    cluster, net = small_cluster(engine="contrarian", clock_mode="pure_logical", timers=False)
    got = []
    cluster.add_client(0, lambda n: n.put("k", b"v", got.append))
    net.run_until_quiescent(limit=100.0)
    assert got[0].creation_ts == 1


def test_causal_put_chain_has_increasing_timestamps():
    cluster, net = small_cluster(engine="contrarian", partitions=4, clock_mode="pure_logical", timers=False)
    keys = keys_on(4)
    rng = random.Random(5)
    got: list[Version] = []
    plan = [keys[rng.randrange(4)] for _ in range(40)]

    def start(node):
        it = iter(plan)

        def step(v=None):
            if v is not None:
                got.append(v)
            k = next(it, None)
            if k is not None:
                node.put(k, b"v", step)

        step()

    cluster.add_client(0, start)
    net.run_until_quiescent(limit=1000.0)
    ts = [v.creation_ts for v in got]
    assert len(ts) == 40 and ts == sorted(set(ts))


def test_server_put_dependency_vector():
    p, net = make_partition(ContrarianPartition, dcs=2, clock_mode="pure_logical")
    p.gss = (0, 50)
    p.hlc.last_issued = 100
    v = p.server_put("x", b"X", 0, (0, 60))
    assert v.dv == (101, 60)
    assert p.vv[0] == 101
    assert [m.kind for m in net.sent] == [Kind.REPLICATE]


def test_server_put_single_dc():
    p, net = make_partition(ContrarianPartition, clock_mode="pure_logical")
    v = p.server_put("x", b"X", 7, (0,))
    assert v.dv == (8,)
    assert net.sent == []


# -- ROT -------------------------------------------------------------------


def test_fig1_returns_x0_y0_both_modes():
    for mode in ("1.5", "2"):
        res = run_scenario("fig1", "contrarian", mode)
        assert res.returned("c1.0") == [(res.versions["X0"].vid, res.versions["Y0"].vid)]


def test_rot_on_unwritten_keys_returns_nothing():
    cluster, net = small_cluster(engine="contrarian")
    keys = keys_on(2)
    out = []
    cluster.add_client(0, lambda n: n.rot([keys[0], keys[1]], out.append))
    net.run_until_quiescent(limit=100.0)
    assert out == [{keys[0]: None, keys[1]: None}]


def test_step_counts_random_schedules():
    for mode, steps in (("1.5", "3"), ("2", "4")):
        for seed in range(3):
            r = run_experiment(WorkloadConfig(engine="contrarian", rot_mode=mode, duration=10.0, seed=seed, delay_law="adversarial"), "full")
            rep = check_trace(r.trace, "contrarian", latency=True)
            lat = rep["latency"]
            # probe ROTs read many keys on every partition and also take 3 or 4 steps
            assert set(lat["steps"]) == {steps}
            assert lat["nonblocking"] == lat["one_version"] == lat["rots"]
            assert rep["snapshots"]["pass"]


def test_per_rot_mode_override():
    cluster, net = small_cluster(engine="contrarian", trace_level="full")
    keys = keys_on(2)
    cluster.add_client(0, lambda n: n.rot([keys[0], keys[1]], lambda _: n.rot([keys[0], keys[1]], mode="2")))
    net.run_until_quiescent(limit=100.0)
    lat = check_trace(net.trace, "contrarian", latency=True)["latency"]
    assert lat["steps"] == {"3": 1, "4": 1}


def test_coordinator_sv_from_client_ts():
    p, net = make_partition(ContrarianPartition, clock_mode="pure_logical")
    p.hlc.last_issued = 90
    sv = p.coordinator_pick_sv(100, (0,))
    assert sv == (100,)
    assert p.hlc.last_issued >= 100


def test_coordinator_sv_fresh_system():
    p, net = make_partition(ContrarianPartition, dcs=2, clock_mode="pure_logical")
    assert p.coordinator_pick_sv(0, (0, 0)) == (1, 0)


@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_coordinator_sv_dominates_inputs(clock, hts, gss_remote, client_remote, vv_remote):
    p, net = make_partition(ContrarianPartition, dcs=2, clock_mode="pure_logical")
    p.hlc.last_issued = clock
    p.gss = (0, gss_remote)
    sv = p.coordinator_pick_sv(hts, (0, client_remote))
    assert sv[0] >= max(hts, clock + 1)
    assert sv[1] == max(gss_remote, client_remote)


def test_serve_read_moves_clock_forward():
    p, net = make_partition(ContrarianPartition, clock_mode="pure_logical")
    p.preload(Version("x", b"X0", (70,), 0))
    p.hlc.last_issued = 90
    vals = p.serve_read((100,), ["x"])
    assert p.hlc.last_issued >= 100
    assert vals == [["x", b"X0", [70], 0]]


def test_serve_read_below_data_is_immediate():
    p, net = make_partition(ContrarianPartition, clock_mode="pure_logical")
    p.preload(Version("x", b"X0", (70,), 0))
    p.on_rot_req(msg(Kind.ROT_REQ, {"rot": 1, "phase": "read", "keys": ["x"], "sv": [10]}))
    assert len(net.sent) == 1 and net.sent[0].payload["vals"] == [["x"]]


def test_non_coordinator_buffers_until_sv():
    p, net = make_partition(ContrarianPartition, clock_mode="pure_logical")
    p.on_rot_req(msg(Kind.ROT_REQ, {"rot": 7, "keys": ["x"]}))
    assert net.sent == []
    p.on_rot_fwd(msg(Kind.ROT_FWD, {"rot": 7, "sv": [5]}, src="p1.0"))
    assert [m.kind for m in net.sent] == [Kind.ROT_RESP]
    # the forward may also arrive first
    p.on_rot_fwd(msg(Kind.ROT_FWD, {"rot": 8, "sv": [5]}, src="p1.0"))
    p.on_rot_req(msg(Kind.ROT_REQ, {"rot": 8, "keys": ["x"]}))
    assert len(net.sent) == 2


# -- stabilization -----------------------------------------------------------


def test_gss_is_entrywise_min():
    p, net = make_partition(ContrarianPartition, dcs=2, partitions=2, clock_mode="pure_logical")
    p.vv = [10, 20]
    p.known_vv = {"p1.0": (15, 5)}
    p.stabilization_round()
    assert p.gss == (10, 5)


def test_single_partition_view_gss_equals_vv():
    p, net = make_partition(ContrarianPartition, dcs=2, partitions=2, clock_mode="pure_logical")
    p.vv = [10, 20]
    p.known_vv = {"p1.0": (30, 40)}
    p.stabilization_round()
    assert p.gss == (10, 20)


def test_laggard_pins_gss():
    p, net = make_partition(ContrarianPartition, dcs=2, partitions=3, clock_mode="pure_logical")
    p.vv = [100, 100]
    p.known_vv = {"p1.0": (100, 100), "p2.0": (100, 3)}
    p.stabilization_round()
    assert p.gss == (100, 3)
    p.known_vv["p2.0"] = (100, 90)
    p.stabilization_round()
    assert p.gss == (100, 90)


def test_gss_waits_for_every_peer():
    p, net = make_partition(ContrarianPartition, dcs=2, partitions=3, clock_mode="pure_logical")
    p.vv = [10, 20]
    p.known_vv = {"p1.0": (15, 5)}
    p.stabilization_round()
    assert p.gss == (0, 0)


# -- replication ---------------------------------------------------------------


def test_remote_update_installed_but_not_yet_in_snapshot():
    p, net = make_partition(ContrarianPartition, dcs=2, clock_mode="pure_logical")
    y = Version("y", b"Y", (5, 40), 1)
    p.on_replicate(msg(Kind.REPLICATE, {"seq": 1, "dc": 1, "ver": ["y", b"Y", [5, 40], 1]}, src="p0.1"))
    assert p.store.has(y.vid) and p.vv[1] == 40
    sv = p.coordinator_pick_sv(0, (0, 0))
    assert sv[1] < 40
    assert p.store.read_at("y", sv) is None


def test_replication_is_fifo_per_link():
    p, net = make_partition(ContrarianPartition, dcs=2, clock_mode="pure_logical")
    p.on_replicate(msg(Kind.REPLICATE, {"seq": 2, "dc": 1, "ver": ["y", b"2", [0, 9], 1]}, src="p0.1"))
    assert not p.store.has(("y", 9, 1))
    p.on_heartbeat(msg(Kind.HEARTBEAT, {"seq": 1, "dc": 1, "ts": 4}, src="p0.1"))
    assert p.store.has(("y", 9, 1)) and p.vv[1] == 9


def test_single_dc_has_no_replication_traffic():
    r = run_experiment(WorkloadConfig(engine="contrarian", duration=5.0, seed=1))
    assert "replicate" not in r.metrics.msg_count and "heartbeat" not in r.metrics.msg_count


def test_two_dc_random_runs_are_causal():
    for seed in range(4):
        r = run_experiment(WorkloadConfig(engine="contrarian", dcs=2, duration=10.0, seed=seed, delay_law="adversarial"), "full")
        rep = check_trace(r.trace, "contrarian", latency=True)
        assert rep["snapshots"]["pass"] and rep["convergence"]["pass"] and rep["eventual_visibility"]["pass"]
        assert rep["latency"]["nonblocking_violations"] == 0


# -- heartbeats --------------------------------------------------------------


def test_idle_heartbeats_advance_remote_vv():
    cluster, net = small_cluster(engine="contrarian", dcs=2, stabilization_ms=1000.0)
    seen = []
    remote = cluster.partitions["p0.1"]
    orig = remote._enqueue_replication

    def spy(p):
        orig(p)
        seen.append(remote.vv[0])

    remote._enqueue_replication = spy
    # sent at 1, 2, 3 ms; the cross-DC link takes 2 ms
    net.run(until=5.5)
    assert len(seen) == 3 and seen == sorted(set(seen))


def test_heartbeats_disabled_breaks_visibility():
    r = run_experiment(WorkloadConfig(engine="contrarian", dcs=2, duration=10.0, seed=1, heartbeats=False))
    rep = check_trace(r.trace, "contrarian")
    assert not rep["eventual_visibility"]["pass"]
    assert rep["snapshots"]["pass"]


# -- client context ------------------------------------------------------------


def test_client_snapshots_are_monotone(monkeypatch):
    seen: dict[str, list] = {}
    orig = ContrarianClient._observe

    def spy(self, sv):
        seen.setdefault(self.node_id, []).append((self.hts, self.gss))
        orig(self, sv)
        seen[self.node_id].append((self.hts, self.gss))

    monkeypatch.setattr(ContrarianClient, "_observe", spy)
    run_experiment(WorkloadConfig(engine="contrarian", dcs=2, duration=10.0, seed=3, delay_law="adversarial"))
    assert seen
    for hist in seen.values():
        for (h0, g0), (h1, g1) in zip(hist, hist[1:]):
            assert h0 <= h1 and all(a <= b for a, b in zip(g0, g1))


def test_gss_never_exceeds_vv():
    r = run_experiment(WorkloadConfig(engine="contrarian", dcs=2, duration=10.0, seed=2))
    parts = r.cluster.partitions.values()
    for p in parts:
        for q in parts:
            if q.dc == p.dc:
                for i in range(2):
                    if i != p.dc:
                        assert p.gss[i] <= q.vv[i]


def test_fig1_links_are_scripted():
    # sanity on the scripted schedule the tests above lean on
    res = run_scenario("fig1", "contrarian")
    assert isinstance(res.cluster.net.schedule, Schedule)
    assert res.report["snapshots"]["pass"]
