"""Closed-loop workload generation, metrics and reports."""

from __future__ import annotations

import csv
import functools
import io
import json
import random
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .config import ClusterConfig, ConfigError
from .cluster import Cluster
from .engine import ClientNode
from .storage import partition_of
from .transport import Schedule, ServiceModel, Simulator, SocketNetwork, TraceEvent


@dataclass
class WorkloadConfig:
    engine: str = "contrarian"
    rot_mode: str = "1.5"
    w: float = 0.05  # #PUT / (#PUT + #reads); a ROT on k keys counts as k reads
    p: int = 4  # partitions per ROT
    z: float = 0.99
    b: int = 8  # value size in bytes
    clients: int = 16  # per DC
    partitions: int = 8
    dcs: int = 1
    keyspace: int = 10_000  # keys per partition
    duration: float = 1_000_000.0  # simulated ms
    seed: int = 0
    backend: str = "sim"
    delay_law: str = "uniform"
    # per-partition CPU cost; zero means infinitely fast servers
    service_ms: float = 0.0
    service_per_kb_ms: float = 0.0
    heartbeats: bool = True
    old_readers: bool = True
    reader_gc: bool = True
    clock_mode: Optional[str] = None
    clock_skew: dict = field(default_factory=dict)
    probe: bool = True  # end-of-run ROTs over every written key, for visibility checks
    settle_ms: float = 50.0

    def __post_init__(self) -> None:
        self.rot_mode = str(self.rot_mode)
        if not 0.0 <= self.w <= 1.0:
            raise ConfigError("w must lie in [0, 1]")
        if not 1 <= self.p <= self.partitions:
            raise ConfigError("p must lie in [1, partitions]")
        if self.z < 0:
            raise ConfigError("z must be non-negative")
        if self.b < 0 or self.clients < 1 or self.keyspace < 1:
            raise ConfigError("b must be non-negative; clients and keyspace must be positive")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        if self.backend not in ("sim", "socket"):
            raise ConfigError(f"unknown backend {self.backend!r}")

    @property
    def put_probability(self) -> float:
        """Per-operation PUT probability that realizes write ratio ``w``."""
        if self.w >= 1.0:
            return 1.0
        return self.w * self.p / (1.0 - self.w + self.w * self.p)

    def cluster_config(self) -> ClusterConfig:
        return ClusterConfig(
            engine=self.engine,
            rot_mode=self.rot_mode,
            partitions=self.partitions,
            dcs=self.dcs,
            clock_mode=self.clock_mode,
            heartbeats=self.heartbeats,
            old_readers=self.old_readers,
            reader_gc=self.reader_gc,
            clock_skew=dict(self.clock_skew),
        )


# -- key popularity ------------------------------------------------------


@functools.lru_cache(maxsize=32)
def zipf_cdf(n: int, z: float) -> np.ndarray:
    weights = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** z
    cdf = np.cumsum(weights)
    return cdf / cdf[-1]


def zipf_next(rng: random.Random, n: int, z: float) -> int:
    """Rank in [1, n] with probability proportional to 1 / rank**z."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if z < 0:
        raise ValueError("z must be non-negative")
    if z == 0:
        return rng.randrange(n) + 1
    u = rng.random()
    return int(np.searchsorted(zipf_cdf(n, z), u, side="right")) + 1 if u < 1.0 else n


def harmonic(n: int, z: float) -> float:
    return float(np.sum(1.0 / np.arange(1, n + 1, dtype=np.float64) ** z))


class KeySpace:
    """Maps (partition, rank) to a concrete key owned by that partition."""

    def __init__(self, partitions: int):
        self.partitions = partitions
        self._cache: dict[tuple[int, int], str] = {}

    def key(self, partition: int, rank: int) -> str:
        k = self._cache.get((partition, rank))
        if k is None:
            salt = 0
            while True:
                cand = f"k{rank}.{salt}"
                if partition_of(cand, self.partitions) == partition:
                    break
                salt += 1
            k = self._cache[(partition, rank)] = cand
        return k


# -- metrics ---------------------------------------------------------------


@dataclass
class Metrics:
    engine: str = ""
    rot_mode: str = ""
    dcs: int = 0
    partitions: int = 0
    clients: int = 0
    w: float = 0.0
    p: int = 0
    z: float = 0.0
    b: int = 0
    seed: int = 0
    duration_ms: float = 0.0
    ops: int = 0
    puts: int = 0
    rots: int = 0
    reads: int = 0
    realized_w: float = 0.0
    throughput_ops_s: float = 0.0
    rot_latency_mean_ms: float = 0.0
    rot_latency_p99_ms: float = 0.0
    put_latency_mean_ms: float = 0.0
    messages: int = 0
    bytes: int = 0
    put_bytes: int = 0
    bytes_per_put: float = 0.0
    readers_checks: int = 0
    readers_check_messages: int = 0
    readers_check_rotids_cumulative: int = 0
    readers_check_rotids_distinct: int = 0
    readers_check_rotids_distinct_mean: float = 0.0
    readers_check_bytes: int = 0
    msg_count: dict = field(default_factory=dict)
    byte_count: dict = field(default_factory=dict)


COLUMNS = [f.name for f in fields(Metrics) if f.name not in ("msg_count", "byte_count")]

METRICS_SCHEMA = {
    "type": "object",
    "required": COLUMNS + ["msg_count", "byte_count"],
    "properties": {
        **{c: {"type": "string"} for c in ("engine", "rot_mode")},
        **{c: {"type": "integer", "minimum": 0} for c in ("dcs", "partitions", "clients", "p", "b", "seed", "ops", "puts", "rots", "reads",
                                                           "messages", "bytes", "put_bytes", "readers_checks", "readers_check_messages",
                                                           "readers_check_rotids_cumulative", "readers_check_rotids_distinct", "readers_check_bytes")},
        **{c: {"type": "number", "minimum": 0} for c in ("w", "z", "duration_ms", "realized_w", "throughput_ops_s", "rot_latency_mean_ms",
                                                          "rot_latency_p99_ms", "put_latency_mean_ms", "bytes_per_put",
                                                          "readers_check_rotids_distinct_mean")},
        "msg_count": {"type": "object", "additionalProperties": {"type": "integer"}},
        "byte_count": {"type": "object", "additionalProperties": {"type": "integer"}},
    },
    "additionalProperties": False,
}

# message kinds a PUT is responsible for
PUT_KINDS = ("put_req", "put_resp", "replicate", "readers_check_req", "readers_check_resp", "dep_check")
READERS_CHECK_KINDS = ("readers_check_req", "readers_check_resp", "dep_check")


def percentile(values: Sequence[float], q: float) -> float:
    if not len(values):
        return 0.0
    return float(np.percentile(np.asarray(values, dtype=np.float64), q))


# -- driver ---------------------------------------------------------------


class ClosedLoopDriver:
    """Issues operations back to back for one client until the deadline."""

    def __init__(self, cfg: WorkloadConfig, keys: KeySpace, client_seed: str, deadline: float):
        self.cfg = cfg
        self.keys = keys
        self.rng = random.Random(client_seed)
        self.deadline = deadline
        self.q = cfg.put_probability
        self.node: Optional[ClientNode] = None
        self.puts = 0
        self.rots = 0
        self.reads = 0
        self.written: set[str] = set()

    def start(self, node: ClientNode) -> None:
        self.node = node
        self.next_op()

    def _key(self, partition: int) -> str:
        return self.keys.key(partition, zipf_next(self.rng, self.cfg.keyspace, self.cfg.z))

    def next_op(self, _=None) -> None:
        node = self.node
        if node.net.now() >= self.deadline:
            return
        rng = self.rng
        if rng.random() < self.q:
            key = self._key(rng.randrange(self.cfg.partitions))
            self.puts += 1
            self.written.add(key)
            node.put(key, rng.randbytes(self.cfg.b), self.next_op)
        else:
            parts = rng.sample(range(self.cfg.partitions), self.cfg.p)
            keys = [self._key(pid) for pid in parts]
            self.rots += 1
            self.reads += len(keys)
            node.rot(keys, self.next_op)


@dataclass
class RunResult:
    metrics: Metrics
    trace: list[TraceEvent]
    cluster: Cluster
    net: object


def _probe(cluster: Cluster, keys: list[str], chunk: int = 64) -> None:
    """One client per DC reads every written key, ``chunk`` keys per ROT."""
    batches = [keys[i:i + chunk] for i in range(0, len(keys), chunk)]
    for dc in range(cluster.cfg.dcs):
        def start(node: ClientNode, todo=list(batches)) -> None:
            def step(_=None) -> None:
                if todo:
                    node.rot(todo.pop(0), step)
            step()

        cluster.add_client(dc, start)


def run_experiment(
    cfg: WorkloadConfig,
    trace_level: str = "ops",
    schedule: Optional[Schedule] = None,
) -> RunResult:
    """Run a closed-loop experiment and collect metrics (and the trace)."""
    ccfg = cfg.cluster_config()
    service = ServiceModel(cfg.service_ms, cfg.service_per_kb_ms)
    if cfg.backend == "sim":
        net = Simulator(schedule or Schedule(seed=cfg.seed, delay_law=cfg.delay_law), service, trace_level=trace_level)
    else:
        net = SocketNetwork(trace_level=trace_level)
    cluster = Cluster(ccfg, net)
    keys = KeySpace(cfg.partitions)
    drivers = []
    for dc in range(cfg.dcs):
        for i in range(cfg.clients):
            d = ClosedLoopDriver(cfg, keys, f"{cfg.seed}/{dc}/{i}", cfg.duration)
            drivers.append(d)
            cluster.add_client(dc, d.start)
    workload_clients = list(cluster.clients)

    def written() -> list[str]:
        out: set[str] = set()
        for d in drivers:
            out |= d.written
        return sorted(out)

    if cfg.backend == "sim":
        net.run(until=cfg.duration)
        net.run_until_quiescent(limit=cfg.duration + 60_000.0)
        if cfg.probe:
            net.run(until=net.now() + cfg.settle_ms)
            _probe(cluster, written())
            net.run_until_quiescent(limit=net.now() + 60_000.0)
        net.run(until=net.now() + cfg.settle_ms)
        net.run_until_quiescent(limit=net.now() + 60_000.0)
        cluster.record_state()
    else:
        # socket runs use wall-clock milliseconds
        def drain(n) -> None:
            for d in drivers:
                d.deadline = 0.0

        net.run(cfg.duration / 1000.0, drain=drain)
        cluster.record_state()
    metrics = collect_metrics(cfg, cluster, net, workload_clients)
    return RunResult(metrics, net.trace, cluster, net)


def collect_metrics(cfg: WorkloadConfig, cluster: Cluster, net, clients: Sequence[ClientNode]) -> Metrics:
    rot_lat, put_lat = [], []
    for c in clients:
        for op, t0, t1 in c.completed:
            (rot_lat if op == "rot" else put_lat).append(t1 - t0)
    counters = cluster.counters()
    puts = len(put_lat)
    rots = len(rot_lat)
    # reads: keys per ROT are fixed at p for workload clients
    reads = rots * cfg.p
    msg_count = dict(sorted(net.msg_count.items()))
    byte_count = dict(sorted(net.byte_count.items()))
    put_bytes = sum(byte_count.get(k, 0) for k in PUT_KINDS)
    checks = counters.get("readers_checks", 0)
    distinct = counters.get("readers_check_rotids_distinct", 0)
    return Metrics(
        engine=cfg.engine,
        rot_mode=cluster.cfg.rot_mode,
        dcs=cfg.dcs,
        partitions=cfg.partitions,
        clients=cfg.clients,
        w=cfg.w,
        p=cfg.p,
        z=cfg.z,
        b=cfg.b,
        seed=cfg.seed,
        duration_ms=cfg.duration,
        ops=puts + rots,
        puts=puts,
        rots=rots,
        reads=reads,
        realized_w=puts / (puts + reads) if puts + reads else 0.0,
        throughput_ops_s=(puts + rots) / (cfg.duration / 1000.0),
        rot_latency_mean_ms=float(np.mean(rot_lat)) if rot_lat else 0.0,
        rot_latency_p99_ms=percentile(rot_lat, 99),
        put_latency_mean_ms=float(np.mean(put_lat)) if put_lat else 0.0,
        messages=sum(msg_count.values()),
        bytes=sum(byte_count.values()),
        put_bytes=put_bytes,
        bytes_per_put=put_bytes / puts if puts else 0.0,
        readers_checks=checks,
        readers_check_messages=counters.get("readers_check_messages", 0),
        readers_check_rotids_cumulative=counters.get("readers_check_rotids_cumulative", 0),
        readers_check_rotids_distinct=distinct,
        readers_check_rotids_distinct_mean=distinct / checks if checks else 0.0,
        readers_check_bytes=sum(byte_count.get(k, 0) for k in READERS_CHECK_KINDS),
        msg_count=msg_count,
        byte_count=byte_count,
    )


# -- reports ---------------------------------------------------------------


def report(metrics: Sequence[Metrics], fmt: str = "csv") -> str:
    """Render metrics rows as csv, jsonl or a human-readable table."""
    if isinstance(metrics, Metrics):
        metrics = [metrics]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for m in metrics:
            row = asdict(m)
            w.writerow({c: row[c] for c in COLUMNS})
        return buf.getvalue()
    if fmt == "jsonl":
        return "".join(json.dumps(asdict(m), sort_keys=True) + "\n" for m in metrics)
    if fmt == "human":
        lines = []
        for m in metrics:
            lines.append(
                f"{m.engine} rot_mode={m.rot_mode} dcs={m.dcs} clients={m.clients} seed={m.seed}\n"
                f"  ops {m.ops} (puts {m.puts}, rots {m.rots}), realized w {m.realized_w:.4f}\n"
                f"  throughput {m.throughput_ops_s:.1f} ops/s\n"
                f"  ROT latency mean {m.rot_latency_mean_ms:.3f} ms, p99 {m.rot_latency_p99_ms:.3f} ms\n"
                f"  PUT latency mean {m.put_latency_mean_ms:.3f} ms\n"
                f"  bytes per PUT {m.bytes_per_put:.1f}, readers checks {m.readers_checks}, "
                f"distinct ROT ids per check {m.readers_check_rotids_distinct_mean:.1f}"
            )
        return "\n".join(lines) + ("\n" if lines else "")
    raise ValueError(f"unknown report format {fmt!r}")


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line; returns (slope, intercept, r_squared)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2
