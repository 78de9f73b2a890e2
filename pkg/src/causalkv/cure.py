"""Cure-style baseline: two-round ROTs over physical clocks.

A partition that is asked to read at a snapshot its physical clock has not
reached yet has to wait for it, which is what makes the protocol blocking.
Waiting is a timed re-enqueue on the node's own mailbox.
"""

from __future__ import annotations

import math

from .clock import timestamp_to_ms
from .contrarian import ContrarianClient, ContrarianPartition
from .storage import Vector, Version

# re-check granularity once the computed wake-up time has passed
_EPSILON_MS = 0.001


class CurePartition(ContrarianPartition):
    def wait_delay(self, ts: int) -> float:
        """Milliseconds of true time until the local clock covers ``ts``."""
        if self.hlc.covers(self.physical_now(), ts):
            return 0.0
        target = self.phys.true_time_of(timestamp_to_ms(ts))
        # round up to the next microsecond so the floor reaches ts
        delay = math.ceil((target - self.net.now()) * 1000.0) / 1000.0
        return max(delay, _EPSILON_MS)

    def coordinator_pick_sv(self, hts: int, client_gss: Vector) -> Vector:
        # a physical clock cannot be pushed forward, so the client's
        # timestamp only raises the snapshot, not the clock
        local = max(self.hlc.tick(self.physical_now()), hts)
        return self._snapshot(local, client_gss)

    def read_and_reply(self, client, rot, keys, sv, hops, include_sv=False):
        delay = self.wait_delay(sv[self.dc])
        if delay > 0:
            self.counters["blocked_reads"] += 1
            self.net.call_later(
                self.node_id, delay, lambda: self.read_and_reply(client, rot, keys, sv, hops, include_sv)
            )
            return
        super().read_and_reply(client, rot, keys, sv, hops, include_sv)

    def on_put_req(self, msg) -> None:
        p = msg.payload
        gss = tuple(p["gss"])
        need = max(p["hts"], max(self.dependency_floor(gss))) + 1
        delay = self.wait_delay(need)
        if delay > 0:
            self.counters["blocked_puts"] += 1
            self.net.call_later(self.node_id, delay, lambda: self.on_put_req(msg))
            return
        v: Version = self.server_put(p["key"], p["val"], p["hts"], gss)
        self.reply_put(msg.src, v)


class CureClient(ContrarianClient):
    def rot(self, rot, keys, done, mode=None):
        super().rot(rot, keys, done, "2")
