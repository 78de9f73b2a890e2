"""Topology, engine wiring and the scripted scenarios."""

from __future__ import annotations

import functools
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .cclo import CCLOClient, CCLOPartition
from .config import ClusterConfig, ConfigError, partition_node
from .contrarian import ContrarianClient, ContrarianPartition
from .cure import CureClient, CurePartition
from .engine import ClientNode, ClientSession, PartitionBase
from .storage import Version, partition_of
from .strawman import LatestClient, LatestPartition
from .transport import Schedule, Simulator, TraceEvent

ENGINE_CLASSES: dict[str, tuple[type[PartitionBase], type[ClientSession]]] = {
    "contrarian": (ContrarianPartition, ContrarianClient),
    "cure": (CurePartition, CureClient),
    "cclo": (CCLOPartition, CCLOClient),
    "latest": (LatestPartition, LatestClient),
}

SCENARIOS = ("fig1", "fig2", "e_star_demo")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    partitions: int
    dcs: int = 1

    def __post_init__(self) -> None:
        if self.partitions < 2:
            raise ConfigError("the data set must be split into more than one partition")
        if self.dcs < 1:
            raise ConfigError("need at least one DC")

    def partition(self, key: str) -> int:
        return partition_of(key, self.partitions)

    def locate(self, key: str) -> list[str]:
        """Node id of the key's partition in every DC, DC 0 first."""
        pid = self.partition(key)
        return [partition_node(pid, dc) for dc in range(self.dcs)]


class Cluster:
    """All partitions of all DCs plus the client nodes, registered on one
    network backend."""

    def __init__(self, cfg: ClusterConfig, net):
        self.cfg = cfg
        self.net = net
        self.topology = Topology(cfg.partitions, cfg.dcs)
        part_cls, self.client_cls = ENGINE_CLASSES[cfg.engine]
        if cfg.engine == "latest" and cfg.dcs > 1:
            raise ConfigError("the read-latest strawman is single-DC only")
        self.partitions: dict[str, PartitionBase] = {}
        for dc in range(cfg.dcs):
            for pid in range(cfg.partitions):
                p = part_cls(pid, dc, cfg)
                self.partitions[p.node_id] = p
                net.register(p)
        self.clients: list[ClientNode] = []

    def add_client(self, dc: int = 0, on_start: Optional[Callable[[ClientNode], None]] = None) -> ClientNode:
        session = self.client_cls(len(self.clients), dc, self.cfg)
        node = ClientNode(session, on_start)
        self.clients.append(node)
        self.net.register(node)
        return node

    def partition_for(self, key: str, dc: int = 0) -> PartitionBase:
        return self.partitions[self.topology.locate(key)[dc]]

    def preload(self, key: str, value: bytes, ts: int, writer: Optional[ClientNode] = None) -> Version:
        """Install an initial version in every DC before the run.

        With ``writer`` the write is also recorded as that client's operation
        so the checker sees it in the client's history.
        """
        dv = [0] * self.cfg.dcs
        dv[0] = ts
        v = Version(key, value, tuple(dv), 0)
        for dc in range(self.cfg.dcs):
            self.partition_for(key, dc).preload(v)
        if writer is not None:
            writer.ops += 1
            op_id = f"{writer.node_id}#{writer.ops}"
            self.net.record(writer.node_id, "op-start", {"id": op_id, "client": writer.node_id, "dc": writer.dc, "op": "put", "keys": [key]})
            self.net.record(writer.node_id, "op-end", {"id": op_id, "op": "put", "version": list(v.vid)})
        return v

    def record_state(self) -> None:
        """Append each partition's current LWW winners to the trace."""
        for node_id, p in self.partitions.items():
            winners = [list(vid) for vid in p.final_state().values()]
            self.net.record(node_id, "state", {"dc": p.dc, "winners": winners})

    def counters(self) -> Counter:
        total: Counter = Counter()
        for p in self.partitions.values():
            total.update(p.counters)
        return total


# -- scripted clients ----------------------------------------------------

# (delay_ms, "put", key, value) or (delay_ms, "rot", [keys])
Step = tuple


def scripted(steps: Sequence[Step], results: Optional[list] = None) -> Callable[[ClientNode], None]:
    """on_start hook running ``steps`` one after the other."""

    def start(node: ClientNode) -> None:
        it = iter(steps)

        def next_step(_=None) -> None:
            step = next(it, None)
            if step is None:
                return
            node.net.call_later(node.node_id, step[0], lambda: issue(step))

        def issue(step) -> None:
            if step[1] == "put":
                node.put(step[2], step[3], next_step)
            else:
                def got(result):
                    if results is not None:
                        results.append((node.node_id, result))
                    next_step()
                node.rot(step[2], got)

        next_step()

    return start


@functools.lru_cache(maxsize=None)
def scenario_keys(n_partitions: int) -> tuple[str, str]:
    """Two keys named after x and y with partition(x) < partition(y)."""
    xs = (f"x{i}" if i else "x" for i in range(10_000))
    for x in xs:
        px = partition_of(x, n_partitions)
        for j in range(10_000):
            y = f"y{j}" if j else "y"
            if partition_of(y, n_partitions) > px:
                return x, y
    raise ScenarioError("could not find scenario keys")


@dataclass
class ScenarioResult:
    name: str
    engine: str
    trace: list[TraceEvent]
    results: list  # (client id, {key: Version or None}) in completion order
    keys: tuple[str, str]
    cluster: Cluster
    versions: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    def returned(self, client: str) -> list[tuple]:
        """Version ids returned to ``client``'s ROTs, keys in (x, y) order."""
        out = []
        for c, res in self.results:
            if c == client:
                out.append(tuple(None if res.get(k) is None else res[k].vid for k in self.keys if k in res))
        return out


def _start_clocks(cluster: Cluster, clock: int) -> None:
    for p in cluster.partitions.values():
        if p.hlc.mode.value != "pure_physical":
            p.hlc.last_issued = max(p.hlc.last_issued, clock)


def run_scenario(
    name: str,
    engine: str = "contrarian",
    rot_mode: str = "1.5",
    chooser: Optional[Callable[[int], int]] = None,
    trace_level: str = "full",
    check: bool = True,
    **cfg_overrides,
) -> ScenarioResult:
    """Replay one of the scripted schedules and check the outcome.

    fig1: C1 runs ROT(x, y) while C2 writes X1 then Y1; C1's request to p_y
    is slow so the read of y happens after Y1 exists.  fig2 is the same
    schedule; its interest is the readers check p_y runs with p_x under
    cclo.  e_star_demo splits the ROT of two reader groups across the PUT
    pair: one group reads x early and y late, the other the opposite.

    With ``chooser`` the simulator picks every next event through it and
    timers are disabled, which lets a caller enumerate interleavings.
    """
    from .checker import check_trace

    if name not in SCENARIOS:
        raise ScenarioError(f"unknown scenario {name!r}; expected one of {SCENARIOS}")
    cfg_kwargs = dict(engine=engine, rot_mode=rot_mode, partitions=2, dcs=1)
    if engine == "contrarian":
        # the walkthrough is told with logical clocks
        cfg_kwargs["clock_mode"] = "pure_logical"
    if chooser is not None:
        cfg_kwargs["timers"] = False
    cfg_kwargs.update(cfg_overrides)
    cfg = ClusterConfig(**cfg_kwargs)
    x, y = scenario_keys(cfg.partitions)
    px, py = (partition_node(partition_of(k, cfg.partitions), 0) for k in (x, y))

    links: dict = {}
    schedule = Schedule(seed=0, delay_law="fixed", fixed_ms=1.0, links=links)
    net = Simulator(schedule, trace_level=trace_level, chooser=chooser)
    cluster = Cluster(cfg, net)
    results: list = []

    if name in ("fig1", "fig2"):
        # client numbering: c0 writes, c1 reads
        writer = cluster.add_client(0, scripted([(10.0, "put", x, b"X1"), (0.0, "put", y, b"Y1")]))
        reader = cluster.add_client(0, scripted([(0.0, "rot", [x, y])], results))
        links[(reader.node_id, py)] = 20.0
        readers = [reader]
        reader_ids = [reader.node_id]
    else:
        writer = cluster.add_client(0, scripted([(5.0, "put", x, b"X1"), (0.0, "put", y, b"Y1")]))
        readers = []
        for i in range(4):
            r = cluster.add_client(0, scripted([(0.0, "rot", [x, y])], results))
            readers.append(r)
            # the first half reads x early and y late, the second half the opposite
            slow = py if i < 2 else px
            links[(r.node_id, slow)] = 20.0
        reader_ids = [r.node_id for r in readers]

    versions = {
        "X0": cluster.preload(x, b"X0", 70, writer),
        "Y0": cluster.preload(y, b"Y0", 70, writer),
    }
    _start_clocks(cluster, 90)
    if hasattr(writer.session, "hts"):
        writer.session.hts = 70
    for r in readers:
        if hasattr(r.session, "hts") and cfg.clock_mode.value != "pure_physical":
            r.session.hts = 100

    if chooser is None:
        net.run_until_quiescent(limit=1_000.0)
    else:
        net.run()
        if net.pending_ops:
            raise ScenarioError("interleaving ended with operations pending")
    cluster.record_state()
    res = ScenarioResult(name, engine, net.trace, results, (x, y), cluster, versions)
    if check:
        res.report = check_trace(net.trace, engine=engine, latency=trace_level == "full")
        res.report["readers"] = reader_ids
    return res


class _Pruned(Exception):
    pass


def explore_interleavings(
    name: str,
    engine: str,
    rot_mode: str = "1.5",
    limit: Optional[int] = None,
) -> tuple[int, list[ScenarioResult]]:
    """Enumerate the delivery orders of a scenario, depth first.

    Handling events at different nodes commutes, so sleep sets prune orders
    that only swap such events.  Returns the number of complete runs and the
    runs with a snapshot violation.
    """
    from .checker import check_snapshots

    runs = 0
    bad: list[ScenarioResult] = []
    # per depth: enabled events, sleep set, explored choices, current choice
    frames: list[dict] = []
    prefix: list[int] = []
    while True:
        depth = 0

        def chooser(enabled: list[tuple[int, str]]) -> int:
            nonlocal depth
            d = depth
            depth += 1
            ids = [e[0] for e in enabled]
            if d < len(prefix):
                return ids.index(prefix[d])
            if d == 0:
                sleep: dict[int, str] = {}
            else:
                parent = frames[d - 1]
                cnode = parent["nodes"][parent["choice"]]
                sleep = {
                    e: n
                    for e, n in {**parent["sleep"], **{x: parent["nodes"][x] for x in parent["done"]}}.items()
                    if n != cnode
                }
            awake = [e for e in ids if e not in sleep]
            if not awake:
                raise _Pruned
            frames.append({"nodes": dict(enabled), "sleep": sleep, "done": [], "choice": awake[0]})
            prefix.append(awake[0])
            return ids.index(awake[0])

        try:
            res = run_scenario(name, engine, rot_mode, chooser=chooser, trace_level="ops", check=False)
        except _Pruned:
            res = None
        if res is not None:
            runs += 1
            if check_snapshots(res.trace):
                bad.append(res)
        if limit is not None and runs >= limit:
            break
        # backtrack to the deepest frame with an unexplored awake event
        while frames:
            f = frames[-1]
            f["done"].append(f["choice"])
            rest = [e for e in f["nodes"] if e not in f["sleep"] and e not in f["done"]]
            if rest:
                f["choice"] = rest[0]
                del prefix[len(frames) - 1:]
                prefix.append(rest[0])
                break
            frames.pop()
        if not frames:
            break
    return runs, bad
