"""Read-latest strawman: one-round ROTs that return whatever is newest.

It is fast and wrong on purpose; directed tests use it to show that the
checker catches the anomaly the real engines avoid.  Single DC only.
"""

from __future__ import annotations

from .cclo import CCLOClient
from .engine import PartitionBase, entry_to_wire, version_to_wire
from .storage import Version
from .transport import Kind


class LatestPartition(PartitionBase):
    def on_put_req(self, msg) -> None:
        p = msg.payload
        ts = self.hlc.update(self.physical_now(), p["hts"] + 1)
        dv = [0] * self.n_dcs
        dv[self.dc] = ts
        v = Version(p["key"], p["val"], tuple(dv), self.dc)
        self.store.install(v)
        self.counters["puts"] += 1
        self.net.send(self.node_id, msg.src, Kind.PUT_RESP, {"ver": version_to_wire(v)})

    def on_rot_req(self, msg) -> None:
        p = msg.payload
        self.counters["reads"] += len(p["keys"])
        vals = [entry_to_wire(k, self.store.latest(k)) for k in p["keys"]]
        self.net.send(self.node_id, msg.src, Kind.ROT_RESP, {"rot": p["rot"], "vals": vals})


class LatestClient(CCLOClient):
    pass
