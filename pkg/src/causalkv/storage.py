"""Per-partition multi-version storage.

Vectors (dependency vectors, snapshot vectors, GSS, version vectors) are
tuples of timestamps with one entry per DC.
"""

from __future__ import annotations

import bisect
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

Vector = tuple[int, ...]
VersionId = tuple[str, int, int]  # (key, creation_ts, origin_dc)


def vec_le(a: Sequence[int], b: Sequence[int]) -> bool:
    return all(x <= y for x, y in zip(a, b))


def vec_max(a: Sequence[int], b: Sequence[int]) -> Vector:
    return tuple(x if x >= y else y for x, y in zip(a, b))


def vec_min(vectors: Iterable[Sequence[int]]) -> Vector:
    return tuple(min(col) for col in zip(*vectors))


def key_hash(key: str) -> int:
    """Stable 64-bit hash, identical across processes and runs."""
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "big")


def partition_of(key: str, n_partitions: int) -> int:
    if n_partitions < 1:
        raise ValueError("need at least one partition")
    return key_hash(key) % n_partitions


@dataclass(frozen=True, slots=True)
class Version:
    key: str
    value: bytes
    dv: Vector
    origin_dc: int

    def __post_init__(self) -> None:
        if not 0 <= self.origin_dc < len(self.dv):
            raise ValueError(f"origin_dc {self.origin_dc} outside dv of size {len(self.dv)}")
        ts = self.dv[self.origin_dc]
        if any(e > ts for e in self.dv):
            raise ValueError(f"dv[origin] must dominate the other entries: {self.dv}")

    @property
    def creation_ts(self) -> int:
        return self.dv[self.origin_dc]

    @property
    def order(self) -> tuple[int, int]:
        """Last-writer-wins order: timestamp first, DC index breaks ties."""
        return (self.dv[self.origin_dc], self.origin_dc)

    @property
    def vid(self) -> VersionId:
        return (self.key, self.dv[self.origin_dc], self.origin_dc)


@dataclass
class VersionChain:
    """Versions of one key in LWW order, oldest first.

    ``local_ts`` holds, per version, the time at which it was installed in this
    replica (equal to ``creation_ts`` for versions created here).
    """

    key: str
    versions: list[Version] = field(default_factory=list)
    local_ts: list[int] = field(default_factory=list)
    _orders: list[tuple[int, int]] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.versions)

    def __iter__(self) -> Iterator[Version]:
        return iter(self.versions)

    def install(self, v: Version, local_ts: Optional[int] = None) -> bool:
        """Insert ``v``; returns False when an equal version is already present."""
        if v.key != self.key:
            raise ValueError(f"version of {v.key!r} installed on chain {self.key!r}")
        order = v.order
        i = bisect.bisect_left(self._orders, order)
        if i < len(self._orders) and self._orders[i] == order:
            return False
        self._orders.insert(i, order)
        self.versions.insert(i, v)
        self.local_ts.insert(i, v.creation_ts if local_ts is None else local_ts)
        return True

    def latest(self) -> Optional[Version]:
        return self.versions[-1] if self.versions else None

    def find(self, ts: int, origin_dc: int) -> Optional[int]:
        i = bisect.bisect_left(self._orders, (ts, origin_dc))
        if i < len(self._orders) and self._orders[i] == (ts, origin_dc):
            return i
        return None

    def read_at(self, sv: Sequence[int]) -> Optional[Version]:
        for v in reversed(self.versions):
            if vec_le(v.dv, sv):
                return v
        return None

    def read_before(self, t: int) -> Optional[Version]:
        for i in range(len(self.versions) - 1, -1, -1):
            if self.local_ts[i] <= t:
                return self.versions[i]
        return None

    def gc(self, low_watermark: Sequence[int]) -> int:
        """Drop everything older than the newest version inside the watermark.

        Returns the number of versions removed.
        """
        for i in range(len(self.versions) - 1, -1, -1):
            if vec_le(self.versions[i].dv, low_watermark):
                del self.versions[:i]
                del self.local_ts[:i]
                del self._orders[:i]
                return i
        return 0


class Store:
    """All version chains owned by one partition replica."""

    def __init__(self) -> None:
        self.chains: dict[str, VersionChain] = {}

    def chain(self, key: str) -> VersionChain:
        c = self.chains.get(key)
        if c is None:
            c = self.chains[key] = VersionChain(key)
        return c

    def install(self, v: Version, local_ts: Optional[int] = None) -> bool:
        return self.chain(v.key).install(v, local_ts)

    def has(self, vid: VersionId) -> bool:
        c = self.chains.get(vid[0])
        return c is not None and c.find(vid[1], vid[2]) is not None

    def local_ts_of(self, vid: VersionId) -> Optional[int]:
        c = self.chains.get(vid[0])
        if c is None:
            return None
        i = c.find(vid[1], vid[2])
        return None if i is None else c.local_ts[i]

    def latest(self, key: str) -> Optional[Version]:
        c = self.chains.get(key)
        return c.latest() if c else None

    def read_at(self, key: str, sv: Sequence[int]) -> Optional[Version]:
        c = self.chains.get(key)
        return c.read_at(sv) if c else None

    def read_before(self, key: str, t: int) -> Optional[Version]:
        c = self.chains.get(key)
        return c.read_before(t) if c else None

    def gc(self, low_watermark: Sequence[int]) -> int:
        return sum(c.gc(low_watermark) for c in self.chains.values())

    def winners(self) -> dict[str, VersionId]:
        """Current LWW winner per key, for convergence checks."""
        return {k: c.versions[-1].vid for k, c in sorted(self.chains.items()) if c.versions}
