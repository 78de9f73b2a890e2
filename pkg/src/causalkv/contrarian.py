"""Contrarian: nonblocking one-version ROTs in 1.5 or 2 rounds over HLCs,
dependency vectors, and GSS-based visibility of remote updates."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

from .engine import ClientSession, PartitionBase, RotResult, entry_from_wire, entry_to_wire, version_from_wire, version_to_wire
from .storage import Vector, Version, vec_max, vec_min
from .transport import Kind


class ContrarianPartition(PartitionBase):
    def __init__(self, pid, dc, cfg):
        super().__init__(pid, dc, cfg)
        m = self.n_dcs
        self.vv = [0] * m
        self.gss: Vector = (0,) * m
        self.known_vv: dict[str, Vector] = {}
        self.repl_seq_out = {d: 0 for d in self.replicas}
        self.repl_expected = {d: 1 for d in self.replicas}
        self.repl_buffer: dict[int, dict[int, dict]] = {d: {} for d in self.replicas}
        self.last_put_at = float("-inf")
        # 1.5-round ROTs seen by a non-coordinator, keyed by ROT id
        self.waiting_sv: dict[int, tuple[str, list, int]] = {}
        self.early_sv: dict[int, tuple[Vector, int]] = {}

    def start(self, net) -> None:
        super().start(net)
        if not self.cfg.timers:
            return
        if self.n_dcs > 1 or self.cfg.clock_mode.value == "pure_logical":
            net.set_timer(self.node_id, self.cfg.stabilization_ms, self.stabilization_round, "stabilization")
        if self.n_dcs > 1 and self.cfg.heartbeats:
            net.set_timer(self.node_id, self.cfg.heartbeat_ms, self.heartbeat, "heartbeat")

    # -- PUT -------------------------------------------------------------

    def on_put_req(self, msg) -> None:
        p = msg.payload
        v = self.server_put(p["key"], p["val"], p["hts"], tuple(p["gss"]))
        self.reply_put(msg.src, v)

    def reply_put(self, client: str, v: Version) -> None:
        self.net.send(self.node_id, client, Kind.PUT_RESP, {"dv": list(v.dv), "gss": list(self.gss)})

    def dependency_floor(self, client_gss: Vector) -> list[int]:
        m = self.dc
        return [0 if i == m else max(self.gss[i], client_gss[i]) for i in range(self.n_dcs)]

    def server_put(self, key: str, value: bytes, hts: int, client_gss: Vector) -> Version:
        dv = self.dependency_floor(client_gss)
        # new timestamp is one past everything the write depends on
        ts = self.hlc.update(self.physical_now(), max(hts, max(dv)) + 1)
        return self.create_version(key, value, dv, ts)

    def create_version(self, key: str, value: bytes, dv: list[int], ts: int) -> Version:
        dv[self.dc] = ts
        v = Version(key, value, tuple(dv), self.dc)
        self.store.install(v)
        self.vv[self.dc] = ts
        self.last_put_at = self.net.now()
        self.counters["puts"] += 1
        for d, replica in self.replicas.items():
            self.repl_seq_out[d] += 1
            self.net.send(
                self.node_id,
                replica,
                Kind.REPLICATE,
                {"seq": self.repl_seq_out[d], "dc": self.dc, "ver": version_to_wire(v)},
                hops=0,
            )
        return v

    # -- ROT -------------------------------------------------------------

    def coordinator_pick_sv(self, hts: int, client_gss: Vector) -> Vector:
        local = max(self.hlc.tick(self.physical_now()), hts)
        self.hlc.advance(self.physical_now(), local)
        return self._snapshot(local, client_gss)

    def _snapshot(self, local: int, client_gss: Vector) -> Vector:
        m = self.dc
        return tuple(local if i == m else max(self.gss[i], client_gss[i]) for i in range(self.n_dcs))

    def serve_read(self, sv: Vector, keys: Sequence[str]) -> list:
        self.hlc.advance(self.physical_now(), sv[self.dc])
        self.counters["reads"] += len(keys)
        return [entry_to_wire(k, self.store.read_at(k, sv)) for k in keys]

    def on_rot_req(self, msg) -> None:
        p = msg.payload
        rot = p["rot"]
        phase = p.get("phase")
        if phase == "sv":
            sv = self.coordinator_pick_sv(p["hts"], tuple(p["gss"]))
            self.net.send(self.node_id, msg.src, Kind.ROT_RESP, {"rot": rot, "phase": "sv", "sv": list(sv)})
        elif phase == "read":
            self.read_and_reply(msg.src, rot, p["keys"], tuple(p["sv"]), None)
        elif p.get("coord"):
            sv = self.coordinator_pick_sv(p["hts"], tuple(p["gss"]))
            for pid in p["others"]:
                self.net.send(self.node_id, self.partition_id(pid), Kind.ROT_FWD, {"rot": rot, "sv": list(sv)})
            self.read_and_reply(msg.src, rot, p["keys"], sv, None, include_sv=True)
        else:
            early = self.early_sv.pop(rot, None)
            if early is None:
                self.waiting_sv[rot] = (msg.src, p["keys"], msg.hops)
            else:
                sv, fwd_hops = early
                self.read_and_reply(msg.src, rot, p["keys"], sv, max(msg.hops, fwd_hops) + 1)

    def on_rot_fwd(self, msg) -> None:
        p = msg.payload
        rot = p["rot"]
        sv = tuple(p["sv"])
        waiting = self.waiting_sv.pop(rot, None)
        if waiting is None:
            self.early_sv[rot] = (sv, msg.hops)
        else:
            client, keys, req_hops = waiting
            self.read_and_reply(client, rot, keys, sv, max(req_hops, msg.hops) + 1)

    def read_and_reply(self, client: str, rot: int, keys, sv: Vector, hops: Optional[int], include_sv: bool = False) -> None:
        vals = self.serve_read(sv, keys)
        payload = {"rot": rot, "vals": vals}
        if include_sv:
            payload["sv"] = list(sv)
        self.net.send(self.node_id, client, Kind.ROT_RESP, payload, hops=hops)

    def partition_id(self, pid: int) -> str:
        return f"p{pid}.{self.dc}"

    # -- stabilization and replication -----------------------------------

    def stabilization_round(self) -> None:
        vv = tuple(self.vv)
        payload = {"vv": list(vv), "clock": self.hlc.last_issued}
        for peer in self.peers:
            self.net.send(self.node_id, peer, Kind.STAB_EXCHANGE, payload, hops=0)
        if len(self.known_vv) == len(self.peers):
            self.gss = vec_max(self.gss, vec_min([vv, *self.known_vv.values()]))

    def on_stab_exchange(self, msg) -> None:
        p = msg.payload
        self.known_vv[msg.src] = tuple(p["vv"])
        if self.cfg.clock_mode.value == "pure_logical":
            # logical clocks only advance through events; keep them in step
            self.hlc.advance(self.physical_now(), p["clock"])

    def heartbeat(self) -> None:
        if self.net.now() - self.last_put_at < self.cfg.heartbeat_ms:
            return
        ts = self.hlc.tick(self.physical_now())
        self.counters["heartbeats"] += 1
        for d, replica in self.replicas.items():
            self.repl_seq_out[d] += 1
            self.net.send(self.node_id, replica, Kind.HEARTBEAT, {"seq": self.repl_seq_out[d], "dc": self.dc, "ts": ts}, hops=0)

    def on_replicate(self, msg) -> None:
        self._enqueue_replication(msg.payload)

    def on_heartbeat(self, msg) -> None:
        self._enqueue_replication(msg.payload)

    def _enqueue_replication(self, p: dict) -> None:
        src_dc = p["dc"]
        buf = self.repl_buffer[src_dc]
        buf[p["seq"]] = p
        while self.repl_expected[src_dc] in buf:
            item = buf.pop(self.repl_expected[src_dc])
            self.repl_expected[src_dc] += 1
            if "ver" in item:
                self.apply_remote(version_from_wire(item["ver"]))
            else:
                self.vv[src_dc] = max(self.vv[src_dc], item["ts"])

    def apply_remote(self, v: Version) -> None:
        self.store.install(v)
        self.vv[v.origin_dc] = max(self.vv[v.origin_dc], v.creation_ts)
        self.counters["remote_installs"] += 1


class ContrarianClient(ClientSession):
    def __init__(self, num, dc, cfg):
        super().__init__(num, dc, cfg)
        self.hts = 0
        self.gss: Vector = (0,) * cfg.dcs
        self._op: Optional[dict] = None

    def put(self, key: str, value: bytes, done: Callable[[Version], None]) -> None:
        self._op = {"kind": "put", "key": key, "val": value, "done": done}
        self.net.send(
            self.node_id,
            self.partition_node(self.partition_of(key)),
            Kind.PUT_REQ,
            {"key": key, "val": value, "hts": self.hts, "gss": list(self.gss)},
            hops=1,
        )

    def rot(self, rot: int, keys: Sequence[str], done: Callable[[RotResult], None], mode: Optional[str] = None) -> None:
        mode = str(mode or self.cfg.rot_mode)
        groups = self.group_keys(keys)
        coord = next(iter(groups))
        self._op = {"kind": "rot", "rot": rot, "keys": list(keys), "groups": groups, "waiting": set(groups),
                    "result": {}, "done": done, "sv": None}
        if mode == "2":
            self.net.send(self.node_id, self.partition_node(coord), Kind.ROT_REQ,
                          {"rot": rot, "phase": "sv", "hts": self.hts, "gss": list(self.gss)}, hops=1)
            return
        for pid, ks in groups.items():
            payload = {"rot": rot, "keys": ks}
            if pid == coord:
                payload.update(coord=True, hts=self.hts, gss=list(self.gss), others=[q for q in groups if q != coord])
            self.net.send(self.node_id, self.partition_node(pid), Kind.ROT_REQ, payload, hops=1)

    def handle(self, msg) -> None:
        op = self._op
        p = msg.payload
        if msg.kind is Kind.PUT_RESP:
            dv = tuple(p["dv"])
            v = Version(op["key"], op["val"], dv, self.dc)
            self.hts = max(self.hts, v.creation_ts)
            self.gss = vec_max(vec_max(self.gss, tuple(p["gss"])), self._remote_only(dv))
            self._op = None
            op["done"](v)
            return
        if op is None or op.get("rot") != p.get("rot"):
            return
        if p.get("phase") == "sv":
            op["sv"] = sv = tuple(p["sv"])
            for pid, ks in op["groups"].items():
                self.net.send(self.node_id, self.partition_node(pid), Kind.ROT_REQ,
                              {"rot": op["rot"], "phase": "read", "keys": ks, "sv": list(sv)})
            return
        if "sv" in p:
            op["sv"] = tuple(p["sv"])
        for w in p["vals"]:
            key, v = entry_from_wire(w)
            op["result"][key] = v
        op["waiting"].discard(self.partition_of(p["vals"][0][0]))
        if not op["waiting"]:
            self._observe(op["sv"])
            self._op = None
            op["done"]({k: op["result"].get(k) for k in op["keys"]})

    def _remote_only(self, vec: Vector) -> Vector:
        return tuple(0 if i == self.dc else e for i, e in enumerate(vec))

    def _observe(self, sv: Vector) -> None:
        self.hts = max(self.hts, sv[self.dc])
        self.gss = vec_max(self.gss, self._remote_only(sv))
