"""Building blocks shared by the protocol engines: partition and client bases,
the client node that records operations, and wire helpers for versions."""

from __future__ import annotations

from collections import Counter
from typing import Callable, Optional, Sequence

from .clock import HLC, PhysicalClock
from .config import ClusterConfig, client_node, partition_node
from .storage import Store, Version, VersionId, partition_of

RotResult = dict  # key -> Optional[Version]


def make_rot_id(client_num: int, seq: int) -> int:
    """8-byte ROT id: client number in the high word, sequence in the low word."""
    if not (0 <= client_num < 2**32 and 0 <= seq < 2**32):
        raise ValueError("ROT id components must fit in 32 bits")
    return (client_num << 32) | seq


def rot_client(rot: int) -> int:
    return rot >> 32


def rot_seq(rot: int) -> int:
    return rot & 0xFFFFFFFF


def version_to_wire(v: Version) -> list:
    return [v.key, v.value, list(v.dv), v.origin_dc]


def version_from_wire(w: Sequence) -> Version:
    return Version(w[0], w[1], tuple(w[2]), w[3])


def entry_to_wire(key: str, v: Optional[Version]) -> list:
    return [key] if v is None else version_to_wire(v)


def entry_from_wire(w: Sequence) -> tuple[str, Optional[Version]]:
    return (w[0], None) if len(w) == 1 else (w[0], version_from_wire(w))


class PartitionBase:
    """One replica of one partition; an actor driven only by its mailbox."""

    role = "partition"

    def __init__(self, pid: int, dc: int, cfg: ClusterConfig):
        self.pid = pid
        self.dc = dc
        self.cfg = cfg
        self.node_id = partition_node(pid, dc)
        self.n_dcs = cfg.dcs
        self.n_partitions = cfg.partitions
        offset, drift = cfg.clock_skew.get(self.node_id, (0.0, 0.0))
        self.phys = PhysicalClock(offset, drift)
        self.hlc = HLC(cfg.clock_mode)
        self.store = Store()
        self.counters: Counter = Counter()
        self.peers = [partition_node(q, dc) for q in range(cfg.partitions) if q != pid]
        self.replicas = {d: partition_node(pid, d) for d in range(cfg.dcs) if d != dc}
        self.net = None

    def start(self, net) -> None:
        self.net = net

    def physical_now(self) -> float:
        return self.phys.read(self.net.now())

    def handle(self, msg) -> None:
        getattr(self, "on_" + msg.kind.label)(msg)

    def preload(self, v: Version) -> None:
        """Install an initial version before the run starts (scenario setup)."""
        self.store.install(v)
        if v.creation_ts > self.hlc.last_issued:
            self.hlc.last_issued = v.creation_ts

    def final_state(self) -> dict[str, VersionId]:
        return self.store.winners()


class ClientSession:
    """Engine-specific client protocol; one operation in flight at a time."""

    def __init__(self, num: int, dc: int, cfg: ClusterConfig):
        self.num = num
        self.dc = dc
        self.cfg = cfg
        self.node_id = client_node(num, dc)
        self.net = None
        self.rot_counter = 0

    def partition_of(self, key: str) -> int:
        return partition_of(key, self.cfg.partitions)

    def partition_node(self, pid: int) -> str:
        return partition_node(pid, self.dc)

    def next_rot_id(self) -> int:
        self.rot_counter += 1
        return make_rot_id(self.num, self.rot_counter)

    def group_keys(self, keys: Sequence[str]) -> dict[int, list[str]]:
        groups: dict[int, list[str]] = {}
        for k in keys:
            groups.setdefault(self.partition_of(k), []).append(k)
        return dict(sorted(groups.items()))

    def put(self, key: str, value: bytes, done: Callable[[Version], None]) -> None:
        raise NotImplementedError

    def rot(self, rot: int, keys: Sequence[str], done: Callable[[RotResult], None], mode: Optional[str] = None) -> None:
        raise NotImplementedError

    def handle(self, msg) -> None:
        raise NotImplementedError


class ClosedLoopViolation(RuntimeError):
    pass


class ClientNode:
    """Hosts a client session, records op-start/op-end trace events and
    enforces that at most one operation is outstanding."""

    role = "client"

    def __init__(self, session: ClientSession, on_start: Optional[Callable[["ClientNode"], None]] = None):
        self.session = session
        self.node_id = session.node_id
        self.dc = session.dc
        self.num = session.num
        self.net = None
        self.busy = False
        self.ops = 0
        self.completed: list[tuple[str, float, float]] = []  # (op, start, end)
        self.on_start = on_start

    def start(self, net) -> None:
        self.net = net
        self.session.net = net
        if self.on_start is not None:
            self.on_start(self)

    def handle(self, msg) -> None:
        self.session.handle(msg)

    def _begin(self, data: dict) -> tuple[str, float]:
        if self.busy:
            raise ClosedLoopViolation(f"{self.node_id} issued an operation while another is outstanding")
        self.busy = True
        self.ops += 1
        op_id = f"{self.node_id}#{self.ops}"
        data = {"id": op_id, "client": self.node_id, "dc": self.dc, **data}
        self.net.record(self.node_id, "op-start", data)
        return op_id, self.net.now()

    def _end(self, op: str, op_id: str, t0: float, data: dict) -> None:
        self.busy = False
        t1 = self.net.now()
        self.completed.append((op, t0, t1))
        self.net.record(self.node_id, "op-end", {"id": op_id, "op": op, **data})

    def put(self, key: str, value: bytes, done: Optional[Callable[[Version], None]] = None) -> None:
        op_id, t0 = self._begin({"op": "put", "keys": [key]})

        def finish(v: Version) -> None:
            self._end("put", op_id, t0, {"version": list(v.vid)})
            if done is not None:
                done(v)

        self.session.put(key, value, finish)

    def rot(self, keys: Sequence[str], done: Optional[Callable[[RotResult], None]] = None, mode: Optional[str] = None) -> None:
        keys = list(keys)
        if len(set(keys)) != len(keys):
            raise ValueError("ROT keys must be distinct")
        rot = self.session.next_rot_id()
        mode = str(mode or self.session.cfg.rot_mode)
        op_id, t0 = self._begin({"op": "rot", "keys": keys, "rot": rot, "mode": mode})

        def finish(result: RotResult) -> None:
            versions = [list(result[k].vid) if result.get(k) is not None else [k, None, None] for k in keys]
            self._end("rot", op_id, t0, {"versions": versions})
            if done is not None:
                done(result)

        self.session.rot(rot, keys, finish, mode)

    def get(self, key: str, done: Optional[Callable[[Optional[Version]], None]] = None) -> None:
        """GET is a single-key ROT."""
        self.rot([key], None if done is None else (lambda r: done(r[key])))
