"""Run configuration shared by the cluster wiring and the protocol engines."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .clock import ClockMode

ENGINES = ("contrarian", "cure", "cclo", "latest")
ROT_MODES = ("1.5", "2")

DEFAULT_CLOCK_MODE = {
    "contrarian": ClockMode.HYBRID,
    "cure": ClockMode.PURE_PHYSICAL,
    "cclo": ClockMode.PURE_LOGICAL,
    "latest": ClockMode.PURE_LOGICAL,
}


class ConfigError(ValueError):
    pass


def partition_node(pid: int, dc: int) -> str:
    return f"p{pid}.{dc}"


def client_node(cid: int, dc: int) -> str:
    return f"c{cid}.{dc}"


@dataclass
class ClusterConfig:
    engine: str = "contrarian"
    rot_mode: str = "1.5"
    partitions: int = 8
    dcs: int = 1
    replication_factor: Optional[int] = None
    clock_mode: Optional[ClockMode] = None
    stabilization_ms: float = 5.0
    heartbeat_ms: float = 1.0
    heartbeats: bool = True
    old_readers: bool = True
    reader_gc_horizon_ms: float = 500.0
    reader_gc_period_ms: float = 50.0
    reader_gc: bool = True
    # periodic timers (stabilization, heartbeats, reader GC); off only for
    # exhaustive interleaving exploration
    timers: bool = True
    # node id -> (offset_ms, drift)
    clock_skew: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.engine not in ENGINES:
            raise ConfigError(f"unknown engine {self.engine!r}; expected one of {ENGINES}")
        self.rot_mode = str(self.rot_mode)
        if self.rot_mode not in ROT_MODES:
            raise ConfigError(f"rot_mode must be one of {ROT_MODES}")
        if self.engine == "cure" and self.rot_mode != "2":
            # the blocking baseline only exists as a two-round protocol
            self.rot_mode = "2"
        if self.partitions < 2:
            raise ConfigError("the data set must be split into more than one partition")
        if self.dcs < 1:
            raise ConfigError("need at least one DC")
        if self.replication_factor is not None and self.replication_factor != self.dcs:
            raise ConfigError("only full replication is supported (replication_factor == dcs)")
        if self.clock_mode is None:
            self.clock_mode = DEFAULT_CLOCK_MODE[self.engine]
        self.clock_mode = ClockMode(self.clock_mode)
        if self.stabilization_ms <= 0 or self.heartbeat_ms <= 0:
            raise ConfigError("timer periods must be positive")
