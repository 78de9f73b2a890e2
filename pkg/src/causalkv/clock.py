"""Logical, physical and hybrid logical-physical clocks.

A timestamp is a plain ``int`` holding a 64-bit scalar: the upper 48 bits are
physical time in microseconds, the lower 16 bits a logical counter.  Numeric
order is the total order on timestamps.  In ``pure_logical`` mode the physical
reading is ignored and the scalar is a Lamport counter.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

LOGICAL_BITS = 16
LOGICAL_MASK = (1 << LOGICAL_BITS) - 1
PHYSICAL_BITS = 48
MAX_TIMESTAMP = (1 << 64) - 1
US_PER_MS = 1000


class ClockOverflowError(RuntimeError):
    """The logical counter ran out of room inside one physical tick."""


class ClockError(RuntimeError):
    """A clock was asked to do something its mode does not allow."""


class ClockMode(str, enum.Enum):
    HYBRID = "hybrid"
    PURE_LOGICAL = "pure_logical"
    PURE_PHYSICAL = "pure_physical"


def make_timestamp(physical_us: int, logical: int = 0) -> int:
    if not 0 <= logical <= LOGICAL_MASK:
        raise ValueError(f"logical counter out of range: {logical}")
    if not 0 <= physical_us < (1 << PHYSICAL_BITS):
        raise ValueError(f"physical time out of range: {physical_us}")
    return (physical_us << LOGICAL_BITS) | logical


def physical_us(ts: int) -> int:
    return ts >> LOGICAL_BITS


def logical(ts: int) -> int:
    return ts & LOGICAL_MASK


def physical_floor(physical_now_ms: float) -> int:
    """Smallest timestamp carrying the given physical reading."""
    if physical_now_ms <= 0:
        return 0
    return make_timestamp(int(physical_now_ms * US_PER_MS))


def timestamp_to_ms(ts: int) -> float:
    """Physical component of ``ts`` in milliseconds."""
    return physical_us(ts) / US_PER_MS


@dataclass
class PhysicalClock:
    """Simulated local physical clock with a fixed offset and linear drift."""

    offset_ms: float = 0.0
    drift: float = 0.0

    def read(self, true_now_ms: float) -> float:
        return true_now_ms * (1.0 + self.drift) + self.offset_ms

    def true_time_of(self, reading_ms: float) -> float:
        """Inverse of :meth:`read`: when the local clock shows ``reading_ms``."""
        return (reading_ms - self.offset_ms) / (1.0 + self.drift)


@dataclass
class HLC:
    """Per-node clock state.

    ``last_issued`` never decreases.  Every timestamp handed out by
    :meth:`tick` or :meth:`update` is strictly greater than the previous one.
    """

    mode: ClockMode = ClockMode.HYBRID
    last_issued: int = 0

    def _floor(self, physical_now: float) -> int:
        if self.mode is ClockMode.PURE_LOGICAL:
            return 0
        return physical_floor(physical_now)

    def _next(self, floor: int) -> int:
        nxt = self.last_issued + 1
        if nxt > floor:
            if self.mode is ClockMode.PURE_LOGICAL:
                if nxt > MAX_TIMESTAMP:
                    raise ClockOverflowError("logical clock exhausted 64 bits")
            elif logical(self.last_issued) == LOGICAL_MASK:
                raise ClockOverflowError(
                    f"logical counter overflow at physical {physical_us(self.last_issued)}us"
                )
            return nxt
        return floor

    def tick(self, physical_now: float) -> int:
        ts = self._next(self._floor(physical_now))
        self.last_issued = ts
        return ts

    def update(self, physical_now: float, incoming: int) -> int:
        """Merge a received timestamp, then issue a new local one.

        The result is ``max(last + 1, physical, incoming)``; it is never below
        ``incoming``.  A pure physical clock cannot jump ahead of its own
        physical reading, so an ``incoming`` value in the future is refused.
        """
        if not 0 <= incoming <= MAX_TIMESTAMP:
            raise ValueError(f"timestamp out of range: {incoming}")
        base = self._next(self._floor(physical_now))
        if incoming > base:
            if self.mode is ClockMode.PURE_PHYSICAL:
                raise ClockError(
                    "physical clock cannot be moved forward to "
                    f"{incoming} (physical floor {base})"
                )
            base = incoming
        self.last_issued = base
        return base

    def advance(self, physical_now: float, ts: int) -> int:
        """Move the clock forward to ``ts`` without issuing a new timestamp."""
        if ts > self.last_issued:
            if self.mode is ClockMode.PURE_PHYSICAL and ts > self._floor(physical_now):
                raise ClockError(f"physical clock cannot be moved forward to {ts}")
            self.last_issued = ts
        return self.last_issued

    def covers(self, physical_now: float, ts: int) -> bool:
        """True when a read at ``ts`` can be served without moving the clock."""
        return max(self.last_issued, self._floor(physical_now)) >= ts
