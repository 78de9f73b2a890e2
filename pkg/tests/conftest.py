from __future__ import annotations

from dataclasses import dataclass, field

import pytest

from causalkv.config import ClusterConfig
from causalkv.cluster import Cluster
from causalkv.transport import Message, Schedule, Simulator

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@dataclass
class FakeNet:
    """Minimal network stand-in for driving one partition by hand."""

    t: float = 0.0
    sent: list = field(default_factory=list)
    timers: list = field(default_factory=list)
    later: list = field(default_factory=list)

    def now(self) -> float:
        return self.t

    def send(self, src, dst, kind, payload, hops=None) -> None:
        self.sent.append(Message(src, dst, kind, payload, self.t, hops or 1))

    def set_timer(self, node_id, period, callback, name="timer"):
        self.timers.append((node_id, period, callback, name))

    def call_later(self, node_id, delay, callback) -> None:
        self.later.append((self.t + delay, callback))

    def record(self, node_id, kind, data) -> None:
        pass


def msg(kind, payload, src="c0.0", dst="p0.0", hops=1) -> Message:
    return Message(src, dst, kind, payload, 0.0, hops)


def make_partition(cls, pid=0, dc=0, **cfg) -> tuple:
    cfg.setdefault("timers", False)
    p = cls(pid, dc, ClusterConfig(**cfg))
    net = FakeNet()
    p.start(net)
    return p, net


def small_cluster(trace_level="full", schedule=None, **cfg) -> tuple[Cluster, Simulator]:
    cfg.setdefault("partitions", 2)
    net = Simulator(schedule or Schedule(seed=0, delay_law="fixed", fixed_ms=1.0), trace_level=trace_level)
    return Cluster(ClusterConfig(**cfg), net), net


def keys_on(n_partitions: int) -> dict[int, str]:
    """One key per partition, named k<i>."""
    from causalkv.storage import partition_of

    out: dict[int, str] = {}
    i = 0
    while len(out) < n_partitions:
        out.setdefault(partition_of(f"k{i}", n_partitions), f"k{i}")
        i += 1
    return out


@pytest.fixture
def fake_net() -> FakeNet:
    return FakeNet()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
