"""CC-LO: latency-optimal ROTs in the COPS-SNOW style.

ROTs take one round and read the latest version unless the ROT is recorded
as an old reader of the key, in which case it reads the version that was
current at the recorded logical time.  PUTs pay for this with a readers
check: before a new version becomes visible, every partition holding one of
the writer's dependencies reports the ROTs that read a version older than
that dependency.  Those ROTs become old readers of the new key.

Logical times are per partition.  Each replica stamps a version with a local
install time, and all reader bookkeeping refers to those local times.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

from .engine import (
    ClientSession,
    PartitionBase,
    RotResult,
    entry_from_wire,
    entry_to_wire,
    make_rot_id,
    rot_client,
    rot_seq,
    version_from_wire,
    version_to_wire,
)
from .storage import Version, VersionId, partition_of
from .transport import Kind


class ReaderRecord:
    """Reader entries of one key: client -> [seq, read_time, inserted_at].

    Holding at most one entry per client is the per-client compaction; a
    closed-loop client that started a newer ROT has finished its older ones.
    """

    __slots__ = ("entries",)

    def __init__(self) -> None:
        self.entries: dict[int, list] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, client: int, seq: int, read_time: int, now: float) -> None:
        cur = self.entries.get(client)
        if cur is None or cur[0] < seq:
            self.entries[client] = [seq, read_time, now]
        elif cur[0] == seq and read_time < cur[1]:
            cur[1] = read_time

    def get(self, client: int) -> Optional[list]:
        return self.entries.get(client)

    def gc(self, horizon: float) -> int:
        stale = [c for c, e in self.entries.items() if e[2] < horizon]
        for c in stale:
            del self.entries[c]
        return len(stale)


def compact_rots(rots: Sequence[int]) -> dict[int, int]:
    """client -> most recent ROT sequence number."""
    out: dict[int, int] = {}
    for r in rots:
        c, s = rot_client(r), rot_seq(r)
        if out.get(c, -1) < s:
            out[c] = s
    return out


class _PendingPut:
    __slots__ = ("version", "client", "waiting", "rots", "remote")

    def __init__(self, version, client, waiting, remote):
        self.version = version  # key, value, deps before the timestamp is set
        self.client = client
        self.waiting = waiting
        self.rots: dict[int, int] = {}
        self.remote = remote


class CCLOPartition(PartitionBase):
    def __init__(self, pid, dc, cfg):
        super().__init__(pid, dc, cfg)
        self.readers: dict[str, ReaderRecord] = {}
        self.old_readers: dict[str, ReaderRecord] = {}
        self._ids = itertools.count(1)
        self.pending: dict[int, _PendingPut] = {}
        # checks waiting for dependencies to be installed here
        self.held: list[tuple[list[VersionId], Callable[[list[int]], None]]] = []
        self.check_sizes: list[int] = []

    def start(self, net) -> None:
        super().start(net)
        if self.cfg.timers and self.cfg.reader_gc:
            net.set_timer(self.node_id, self.cfg.reader_gc_period_ms, self.gc_reader_records, "reader-gc")

    def _record(self, table: dict, key: str) -> ReaderRecord:
        r = table.get(key)
        if r is None:
            r = table[key] = ReaderRecord()
        return r

    # -- ROT -------------------------------------------------------------

    def on_rot_req(self, msg) -> None:
        p = msg.payload
        rot = p["rot"]
        client, seq = rot_client(rot), rot_seq(rot)
        t = self.hlc.tick(self.physical_now())
        now = self.net.now()
        vals = []
        for key in p["keys"]:
            old = self.old_readers.get(key) if self.cfg.old_readers else None
            entry = old.get(client) if old is not None else None
            if entry is not None and entry[0] == seq:
                v = self.store.read_before(key, entry[1])
                self.counters["old_reader_reads"] += 1
            else:
                v = self.store.latest(key)
                self._record(self.readers, key).add(client, seq, t, now)
            vals.append(entry_to_wire(key, v))
        self.counters["reads"] += len(vals)
        self.net.send(self.node_id, msg.src, Kind.ROT_RESP, {"rot": rot, "vals": vals})

    # -- readers check responder -----------------------------------------

    def readers_before(self, deps: Sequence[VersionId]) -> list[int]:
        """ROT ids (one per client) that read some dep's key before that dep
        was installed here."""
        found: dict[int, int] = {}
        for vid in deps:
            lt = self.store.local_ts_of(vid)
            key = vid[0]
            for table in (self.readers, self.old_readers):
                rec = table.get(key)
                if rec is None:
                    continue
                for client, (seq, rt, _) in rec.entries.items():
                    if rt < lt and found.get(client, -1) < seq:
                        found[client] = seq
        return [make_rot_id(c, s) for c, s in sorted(found.items())]

    def _when_installed(self, deps: list[VersionId], callback: Callable[[list[int]], None]) -> None:
        if all(self.store.has(d) for d in deps):
            callback(self.readers_before(deps))
        else:
            self.held.append((deps, callback))

    def _release_held(self) -> None:
        if not self.held:
            return
        ready = [h for h in self.held if all(self.store.has(d) for d in h[0])]
        if not ready:
            return
        self.held = [h for h in self.held if h not in ready]
        for deps, callback in ready:
            callback(self.readers_before(deps))

    def on_readers_check_req(self, msg) -> None:
        self._answer_check(msg)

    def on_dep_check(self, msg) -> None:
        self._answer_check(msg)

    def _answer_check(self, msg) -> None:
        p = msg.payload
        deps = [tuple(d) for d in p["deps"]]
        src, req = msg.src, p["id"]

        def reply(rots: list[int]) -> None:
            self.counters["readers_check_messages"] += 1
            self.counters["readers_check_rotids_cumulative"] += len(rots)
            self.net.send(self.node_id, src, Kind.READERS_CHECK_RESP, {"id": req, "rots": rots})

        self._when_installed(deps, reply)

    # -- PUT -------------------------------------------------------------

    def on_put_req(self, msg) -> None:
        p = msg.payload
        deps = [tuple(d) for d in p["deps"]]
        self._start_check(
            {"key": p["key"], "val": p["val"], "hts": p["hts"], "deps": deps},
            msg.src,
            remote=None,
        )

    def on_replicate(self, msg) -> None:
        p = msg.payload
        v = version_from_wire(p["ver"])
        deps = [tuple(d) for d in p["deps"]]
        self._start_check({"ver": v, "deps": deps}, None, remote=v)

    def _start_check(self, put: dict, client: Optional[str], remote: Optional[Version]) -> None:
        deps: list[VersionId] = put["deps"]
        groups: dict[int, list] = {}
        for d in deps:
            groups.setdefault(partition_of(d[0], self.n_partitions), []).append(d)
        pid = next(self._ids)
        state = _PendingPut(put, client, len(groups), remote)
        self.pending[pid] = state
        if deps:
            self.counters["readers_checks"] += 1
        kind = Kind.READERS_CHECK_REQ if remote is None else Kind.DEP_CHECK
        for q, ds in sorted(groups.items()):
            if q == self.pid:
                self._when_installed(ds, lambda rots, pid=pid: self._collect(pid, rots))
            else:
                self.counters["readers_check_messages"] += 1
                self.net.send(
                    self.node_id, f"p{q}.{self.dc}", kind, {"id": pid, "deps": [list(d) for d in ds]}
                )
        if not groups:
            self._finish(pid)

    def on_readers_check_resp(self, msg) -> None:
        p = msg.payload
        self._collect(p["id"], p["rots"])

    def _collect(self, pid: int, rots: Sequence[int]) -> None:
        st = self.pending[pid]
        for c, s in compact_rots(rots).items():
            if st.rots.get(c, -1) < s:
                st.rots[c] = s
        st.waiting -= 1
        if st.waiting == 0:
            self._finish(pid)

    def _finish(self, pid: int) -> None:
        st = self.pending.pop(pid)
        put = st.version
        if put["deps"]:
            self.check_sizes.append(len(st.rots))
            self.counters["readers_check_rotids_distinct"] += len(st.rots)
        if st.remote is None:
            hts = max([put["hts"], *(d[1] for d in put["deps"])])
            ts = self.hlc.update(self.physical_now(), hts + 1)
            dv = [0] * self.n_dcs
            dv[self.dc] = ts
            v = Version(put["key"], put["val"], tuple(dv), self.dc)
            local_ts = ts
        else:
            v = st.remote
            local_ts = self.hlc.tick(self.physical_now())
        self._install(v, local_ts, st.rots)
        if st.remote is None:
            self.counters["puts"] += 1
            for replica in self.replicas.values():
                self.net.send(
                    self.node_id,
                    replica,
                    Kind.REPLICATE,
                    {"ver": version_to_wire(v), "deps": [list(d) for d in put["deps"]]},
                    hops=0,
                )
            self.net.send(self.node_id, st.client, Kind.PUT_RESP, {"ver": version_to_wire(v)})
        else:
            self.counters["remote_installs"] += 1

    def _install(self, v: Version, local_ts: int, rots: dict[int, int]) -> None:
        if not self.store.install(v, local_ts):
            return
        now = self.net.now()
        if self.cfg.old_readers:
            old = self._record(self.old_readers, v.key)
            for c, s in rots.items():
                # hide this version and anything newer from these ROTs
                old.add(c, s, local_ts - 1, now)
            if self.store.latest(v.key) is v:
                cur = self.readers.pop(v.key, None)
                if cur is not None:
                    for c, (s, rt, ins) in cur.entries.items():
                        old.add(c, s, rt, ins)
        elif self.store.latest(v.key) is v:
            self.readers.pop(v.key, None)
        self._release_held()

    # -- garbage collection ------------------------------------------------

    def gc_reader_records(self) -> int:
        horizon = self.net.now() - self.cfg.reader_gc_horizon_ms
        removed = 0
        for table in (self.readers, self.old_readers):
            empty = []
            for key, rec in table.items():
                removed += rec.gc(horizon)
                if not rec.entries:
                    empty.append(key)
            for key in empty:
                del table[key]
        self.counters["reader_entries_collected"] += removed
        return removed


class CCLOClient(ClientSession):
    def __init__(self, num, dc, cfg):
        super().__init__(num, dc, cfg)
        self.hts = 0
        # key -> version id; reset by every PUT
        self.deps: dict[str, VersionId] = {}
        self._op: Optional[dict] = None

    def put(self, key: str, value: bytes, done: Callable[[Version], None]) -> None:
        self._op = {"kind": "put", "done": done}
        self.net.send(
            self.node_id,
            self.partition_node(self.partition_of(key)),
            Kind.PUT_REQ,
            {"key": key, "val": value, "hts": self.hts, "deps": [list(d) for d in self.deps.values()]},
            hops=1,
        )

    def rot(self, rot: int, keys: Sequence[str], done: Callable[[RotResult], None], mode: Optional[str] = None) -> None:
        groups = self.group_keys(keys)
        self._op = {"kind": "rot", "rot": rot, "keys": list(keys), "waiting": len(groups), "result": {}, "done": done}
        for pid, ks in groups.items():
            self.net.send(self.node_id, self.partition_node(pid), Kind.ROT_REQ, {"rot": rot, "keys": ks}, hops=1)

    def handle(self, msg) -> None:
        op = self._op
        p = msg.payload
        if msg.kind is Kind.PUT_RESP:
            v = version_from_wire(p["ver"])
            self.hts = max(self.hts, v.creation_ts)
            self.deps = {v.key: v.vid}
            self._op = None
            op["done"](v)
            return
        if op is None or op.get("rot") != p.get("rot"):
            return
        for w in p["vals"]:
            key, v = entry_from_wire(w)
            op["result"][key] = v
            if v is not None:
                self.hts = max(self.hts, v.creation_ts)
                prev = self.deps.get(key)
                if prev is None or (prev[1], prev[2]) < (v.creation_ts, v.origin_dc):
                    self.deps[key] = v.vid
        op["waiting"] -= 1
        if op["waiting"] == 0:
            self._op = None
            op["done"]({k: op["result"].get(k) for k in op["keys"]})
