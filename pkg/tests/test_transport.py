from __future__ import annotations

import json

import pytest

from causalkv.bench import WorkloadConfig, run_experiment
from causalkv.checker import check_trace
from causalkv.cluster import run_scenario, scenario_keys
from causalkv.transport import (
    Kind,
    LivenessError,
    Schedule,
    ServiceModel,
    Simulator,
    TransportError,
    decode_frame,
    dump_trace,
    encode_frame,
    load_trace,
    trace_bytes,
)

from conftest import keys_on, small_cluster


class Node:
    def __init__(self, node_id, role="partition", dc=0):
        self.node_id = node_id
        self.role = role
        self.dc = dc
        self.got: list = []

    def handle(self, msg):
        self.got.append((msg.payload, self.net_now()))

    def start(self, net):
        self.net_now = net.now


def two_nodes(schedule=None, **kw):
    net = Simulator(schedule or Schedule(delay_law="fixed", fixed_ms=1.0), **kw)
    a, b = Node("p0.0"), Node("p1.0")
    net.register(a)
    net.register(b)
    return net, a, b


# -- send ------------------------------------------------------------------


def test_fixed_delay_delivery_time():
    net, a, b = two_nodes()
    net.start()
    net.send("p0.0", "p1.0", Kind.HEARTBEAT, {"n": 1})
    net.run()
    assert b.got == [({"n": 1}, 1.0)]


def test_adversarial_reordering_happens():
    reordered = 0
    for seed in range(50):
        net, a, b = two_nodes(Schedule(seed=seed, delay_law="adversarial"))
        net.start()
        net.send("p0.0", "p1.0", Kind.HEARTBEAT, {"n": "A"})
        net.send("p0.0", "p1.0", Kind.HEARTBEAT, {"n": "B"})
        net.run()
        reordered += [p["n"] for p, _ in b.got] == ["B", "A"]
    assert reordered > 0


def test_same_seed_same_delivery_log():
    logs = []
    for _ in range(2):
        net, a, b = two_nodes(Schedule(seed=9, delay_law="adversarial"))
        net.start()
        for i in range(100):
            net.send("p0.0", "p1.0", Kind.HEARTBEAT, {"n": i})
        net.run()
        logs.append(b.got)
    assert logs[0] == logs[1]


def test_routing_errors():
    net, a, b = two_nodes()
    c0, c1 = Node("c0.0", "client"), Node("c1.0", "client")
    net.register(c0)
    net.register(c1)
    net.register(Node("p0.1", dc=1))
    with pytest.raises(TransportError):
        net.send("p0.0", "p9.0", Kind.HEARTBEAT, {})
    with pytest.raises(TransportError):
        net.send("c0.0", "c1.0", Kind.PUT_REQ, {})
    with pytest.raises(TransportError):
        net.send("c0.0", "p0.1", Kind.PUT_REQ, {})
    with pytest.raises(TransportError):
        net.send("p0.0", "c0.0", Kind.REPLICATE, {})
    with pytest.raises(TransportError):
        net.register(Node("p0.0"))


def test_message_counters():
    net, a, b = two_nodes()
    net.send("p0.0", "p1.0", Kind.STAB_EXCHANGE, {"vv": [1]})
    assert net.msg_count["stab_exchange"] == 1
    assert net.byte_count["stab_exchange"] == len(encode_frame(Kind.STAB_EXCHANGE, "p0.0", "p1.0", 1, {"vv": [1]}))


# -- wire format -------------------------------------------------------------


def test_frame_round_trip():
    frame = encode_frame(Kind.ROT_REQ, "c0.0", "p1.0", 1, {"rot": 5, "keys": ["x"], "val": b"\x00\x01"})
    assert int.from_bytes(frame[:4], "big") == len(frame) - 4
    assert frame[4] == Kind.ROT_REQ
    m = decode_frame(frame)
    assert (m.src, m.dst, m.kind, m.hops) == ("c0.0", "p1.0", Kind.ROT_REQ, 1)
    assert m.payload == {"rot": 5, "keys": ["x"], "val": b"\x00\x01"}


def test_frame_errors():
    frame = encode_frame(Kind.ROT_REQ, "a", "b", 1, {})
    with pytest.raises(TransportError):
        decode_frame(frame + b"x")
    import msgpack

    body = msgpack.packb([99, "a", "b", 1, {}])
    bad = (len(body) + 1).to_bytes(4, "big") + bytes([int(Kind.ROT_REQ)]) + body
    with pytest.raises(TransportError):
        decode_frame(bad)


# -- run_until_quiescent ---------------------------------------------------


def test_empty_system_empty_trace():
    net = Simulator()
    assert net.run_until_quiescent(limit=100.0) == []


def test_fig1_trace_event_order():
    res = run_scenario("fig1", "contrarian", "1.5")
    x, y = scenario_keys(2)
    events = [(e.time, e.node, e.data.get("msg")) for e in res.trace if e.kind == "msg-deliver"]
    # writer c0, reader c1; p1 holds y (the slow link), p0 holds x
    px, py = "p0.0", "p1.0"
    t_read_x = next(t for t, n, m in events if n == px and m == "rot_req")
    t_put_x = next(t for t, n, m in events if n == px and m == "put_req")
    t_put_y = next(t for t, n, m in events if n == py and m == "put_req")
    t_read_y = next(t for t, n, m in events if n == py and m == "rot_req")
    assert t_read_x < t_put_x < t_put_y < t_read_y


def test_random_ops_all_complete():
    r = run_experiment(WorkloadConfig(engine="contrarian", duration=80.0, seed=4, delay_law="adversarial", probe=False))
    starts = {e.data["id"] for e in r.trace if e.kind == "op-start"}
    ends = {e.data["id"] for e in r.trace if e.kind == "op-end"}
    assert len(starts) >= 1000 and starts == ends


def test_exactly_once_delivery_and_routing():
    cluster, net = small_cluster(engine="cclo", partitions=4, timers=False)
    keys = keys_on(4)
    for i in range(3):
        cluster.add_client(0, lambda n, i=i: n.put(keys[i], b"v", lambda _: n.rot(list(keys.values()))))
    net.run_until_quiescent(limit=1000.0)
    sends = [(e.node, e.data["peer"], e.data["msg"]) for e in net.trace if e.kind == "msg-send"]
    delivers = [(e.data["peer"], e.node, e.data["msg"]) for e in net.trace if e.kind == "msg-deliver"]
    assert sorted(sends) == sorted(delivers)
    for src, dst, _ in sends:
        assert not (src.startswith("c") and dst.startswith("c"))
        assert src.split(".")[1] == dst.split(".")[1]


def test_liveness_error_when_ops_stuck():
    # a cure partition whose clock is ten seconds behind blocks reads
    cluster, net = small_cluster(engine="cure", clock_skew={"p1.0": (-10_000.0, 0.0)})
    keys = keys_on(2)
    cluster.add_client(0, lambda n: net.call_later(n.node_id, 1.0, lambda: n.rot([keys[0], keys[1]])))
    with pytest.raises(LivenessError) as err:
        net.run_until_quiescent(limit=50.0)
    assert err.value.trace is net.trace


# -- timers ------------------------------------------------------------------


def test_timer_fires_periodically():
    net, a, b = two_nodes()
    fired = []
    net.set_timer("p0.0", 5.0, lambda: fired.append(net.now()), "stabilization")
    net.run(until=16.0)
    assert fired == [5.0, 10.0, 15.0]


def test_timer_period_must_be_positive():
    net, a, b = two_nodes()
    with pytest.raises(ValueError):
        net.set_timer("p0.0", 0.0, lambda: None)
    with pytest.raises(TransportError):
        net.set_timer("nobody", 1.0, lambda: None)


def test_timer_cancel():
    net, a, b = two_nodes()
    fired = []
    t = net.set_timer("p0.0", 1.0, lambda: fired.append(net.now()))
    net.run(until=2.5)
    t.cancel()
    net.run(until=10.0)
    assert fired == [1.0, 2.0]


def test_heartbeat_suppressed_while_puts_flow():
    # PUTs every 0.4 ms on one partition keep it from sending heartbeats;
    # the idle partition sends one per millisecond
    cluster, net = small_cluster(engine="contrarian", dcs=2, schedule=Schedule(delay_law="fixed", fixed_ms=0.2))
    keys = keys_on(2)

    def writer(node):
        def again(_=None):
            if net.now() < 20.0:
                net.call_later(node.node_id, 0.0, lambda: node.put(keys[0], b"v", again))
        again()

    cluster.add_client(0, writer)
    net.run(until=20.0)
    busy = cluster.partitions["p0.0"].counters["heartbeats"]
    idle = cluster.partitions["p1.0"].counters["heartbeats"]
    assert busy == 0
    assert idle == 20


# -- trace format ------------------------------------------------------------


def test_trace_json_lines_round_trip(tmp_path):
    res = run_scenario("fig1", "cclo")
    path = tmp_path / "t.jsonl"
    dump_trace(res.trace, path)
    lines = path.read_text().splitlines()
    assert set(json.loads(lines[0])) == {"seq", "time", "step", "node", "kind", "digest", "size", "data"}
    back = load_trace(path)
    assert trace_bytes(back) == trace_bytes(res.trace)
    assert check_trace(back, "cclo") == check_trace(res.trace, "cclo")


def test_trace_event_is_totally_ordered_by_time():
    r = run_experiment(WorkloadConfig(engine="cclo", duration=5.0, seed=2, delay_law="adversarial"), trace_level="full")
    times = [e.time for e in r.trace]
    assert times == sorted(times)
    assert [e.seq for e in r.trace] == list(range(len(r.trace)))


# -- service model -------------------------------------------------------------


def test_service_model_queues_events():
    net = Simulator(Schedule(delay_law="fixed", fixed_ms=1.0), ServiceModel(per_event_ms=2.0))
    a, b = Node("p0.0"), Node("p1.0")
    net.register(a)
    net.register(b)
    net.start()
    for i in range(3):
        net.send("p0.0", "p1.0", Kind.HEARTBEAT, {"n": i})
    net.run()
    assert [t for _, t in b.got] == [1.0, 3.0, 5.0]


def test_bad_schedule_rejected():
    with pytest.raises(ValueError):
        Schedule(delay_law="gaussian")
    with pytest.raises(ValueError):
        Schedule(lo_ms=2.0, hi_ms=1.0)
    with pytest.raises(ValueError):
        Simulator(trace_level="everything")


# -- socket backend ----------------------------------------------------------


def test_socket_backend_smoke():
    cfg = WorkloadConfig(engine="cclo", backend="socket", duration=300.0, clients=4, partitions=4, seed=1)
    r = run_experiment(cfg)
    assert r.metrics.ops > 0
    rep = check_trace(r.trace, "cclo", visibility=False)
    assert rep["snapshots"]["pass"] and rep["convergence"]["pass"]


def test_socket_backend_contrarian_two_dcs():
    cfg = WorkloadConfig(engine="contrarian", backend="socket", duration=300.0, clients=2, partitions=2, p=2, dcs=2, seed=1)
    r = run_experiment(cfg)
    assert r.metrics.ops > 0
    assert check_trace(r.trace, "contrarian", visibility=False)["snapshots"]["pass"]
