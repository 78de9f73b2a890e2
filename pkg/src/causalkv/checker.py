"""Offline consistency oracle over recorded traces.

Every check is a pure function of the trace.  The trace events used are the
client ``op-start``/``op-end`` pairs, the partitions' end-of-run ``state``
events, and (for the latency properties) ``msg-send``/``msg-deliver``.
"""

from __future__ import annotations

import bisect
import graphlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .transport import TraceEvent

Vid = tuple  # (key, ts, dc)


class MalformedTraceError(ValueError):
    pass


@dataclass
class Op:
    id: str
    client: str
    dc: int
    kind: str  # "put" | "rot"
    keys: list[str]
    start: float
    end: float
    index: int  # position in the client's program order
    written: Optional[Vid] = None
    read: dict = field(default_factory=dict)  # key -> Vid or None
    rot: Optional[int] = None
    mode: Optional[str] = None


def _as_event(ev) -> TraceEvent:
    if isinstance(ev, TraceEvent):
        return ev
    if isinstance(ev, str):
        return TraceEvent.from_json(ev)
    return TraceEvent(ev["seq"], ev["time"], ev["step"], ev["node"], ev["kind"], ev.get("digest", ""), ev.get("size", 0), ev.get("data", {}))


def parse_ops(trace: Iterable) -> list[Op]:
    """Completed client operations in completion order."""
    started: dict[str, tuple[TraceEvent, int]] = {}
    counts: dict[str, int] = defaultdict(int)
    ops: list[Op] = []
    for raw in trace:
        ev = _as_event(raw)
        if ev.kind == "op-start":
            d = ev.data
            started[d["id"]] = (ev, counts[d["client"]])
            counts[d["client"]] += 1
        elif ev.kind == "op-end":
            d = ev.data
            if d["id"] not in started:
                raise MalformedTraceError(f"op-end without op-start: {d['id']}")
            st, idx = started.pop(d["id"])
            s = st.data
            op = Op(d["id"], s["client"], s["dc"], s["op"], list(s["keys"]), st.time, ev.time, idx,
                    rot=s.get("rot"), mode=s.get("mode"))
            if op.kind == "put":
                op.written = tuple(d["version"])
            else:
                for key, vid in zip(op.keys, d["versions"]):
                    op.read[key] = None if vid[1] is None else tuple(vid)
            ops.append(op)
    return ops


class CausalityGraph:
    """Operations with program-order and read-from edges.

    Reachability is answered with per-client vector clocks: ``vc[o][c]`` is
    the highest program index of client ``c`` among operations that precede
    ``o`` or equal it (``-1`` if none).
    """

    def __init__(self, ops: Sequence[Op]):
        self.ops = list(ops)
        self.by_id = {o.id: i for i, o in enumerate(self.ops)}
        clients = sorted({o.client for o in self.ops})
        self.client_index = {c: i for i, c in enumerate(clients)}
        self.writer_of: dict[Vid, int] = {}
        for i, o in enumerate(self.ops):
            if o.written is not None:
                if o.written in self.writer_of:
                    raise MalformedTraceError(f"version {o.written} written twice")
                self.writer_of[o.written] = i
        self.preds: list[list[int]] = [[] for _ in self.ops]
        per_client: dict[str, list[int]] = defaultdict(list)
        for i, o in enumerate(self.ops):
            per_client[o.client].append(i)
        self.program: dict[str, list[int]] = {}
        self.position = [0] * len(self.ops)
        for c, idxs in per_client.items():
            idxs.sort(key=lambda i: self.ops[i].index)
            self.program[c] = idxs
            for pos, i in enumerate(idxs):
                self.position[i] = pos
            for a, b in zip(idxs, idxs[1:]):
                self.preds[b].append(a)
        for i, o in enumerate(self.ops):
            for vid in o.read.values():
                if vid is None:
                    continue
                w = self.writer_of.get(vid)
                if w is None:
                    raise MalformedTraceError(f"{o.id} read {vid}, which no operation wrote")
                self.preds[i].append(w)
        sorter = graphlib.TopologicalSorter({i: self.preds[i] for i in range(len(self.ops))})
        try:
            self.order = list(sorter.static_order())
        except graphlib.CycleError as exc:
            raise MalformedTraceError(f"causality cycle: {exc.args[1]}") from exc
        n, m = len(self.ops), len(clients)
        self.vc = np.full((n, m), -1, dtype=np.int64)
        for i in self.order:
            row = self.vc[i]
            for p in self.preds[i]:
                np.maximum(row, self.vc[p], out=row)
            o = self.ops[i]
            row[self.client_index[o.client]] = o.index

    def __len__(self) -> int:
        return len(self.ops)

    def precedes(self, a: int, b: int) -> bool:
        """True when op ``a`` causally precedes op ``b`` (strictly)."""
        if a == b:
            return False
        oa = self.ops[a]
        return self.vc[b][self.client_index[oa.client]] >= oa.index

    def edges(self) -> set[tuple[int, int]]:
        """Direct edges (program order and read-from)."""
        return {(p, i) for i in range(len(self.ops)) for p in self.preds[i]}

    def closure(self) -> set[tuple[int, int]]:
        return {(a, b) for a in range(len(self.ops)) for b in range(len(self.ops)) if self.precedes(a, b)}


def build_graph(trace: Iterable) -> CausalityGraph:
    return CausalityGraph(parse_ops(trace))


def _lww(vid: Optional[Vid]) -> tuple:
    return (-1, -1) if vid is None else (vid[1], vid[2])


def check_snapshots(trace: Iterable, graph: Optional[CausalityGraph] = None) -> list[dict]:
    """ROTs whose result is not a causally consistent snapshot.

    For a returned X (or nothing) on key k, a violation is a version X' of k
    with X ⤳ X' that already precedes the ROT's view: it precedes the write
    of another returned version, or the ROT's program-order predecessor.
    """
    g = graph if graph is not None else build_graph(trace)
    # key -> client -> (program indices, op indices) of that client's writes
    writes: dict[str, dict[str, tuple[list[int], list[int]]]] = defaultdict(dict)
    for c, idxs in g.program.items():
        for i in idxs:
            o = g.ops[i]
            if o.written is not None:
                w = writes[o.written[0]].setdefault(c, ([], []))
                w[0].append(o.index)
                w[1].append(i)
    violations = []
    for r, op in enumerate(g.ops):
        if op.kind != "rot":
            continue
        prog = g.program[op.client]
        pos = g.position[r]
        frontier = {}  # op index -> description
        if pos > 0:
            frontier[prog[pos - 1]] = "program-order"
        for key, vid in op.read.items():
            if vid is not None:
                frontier[g.writer_of[vid]] = list(vid)
        if not frontier:
            continue
        for key in op.keys:
            x = op.read.get(key)
            xi = None if x is None else g.writer_of[x]
            found = None
            for c, (indices, opidx) in writes.get(key, {}).items():
                ci = g.client_index[c]
                for f, why in frontier.items():
                    bound = g.vc[f][ci]
                    j = bisect.bisect_right(indices, bound) - 1
                    if j < 0:
                        continue
                    cand = opidx[j]
                    if cand == xi:
                        continue
                    if xi is None or g.precedes(xi, cand):
                        found = (cand, why)
                        break
                if found:
                    break
            if found:
                cand, why = found
                violations.append(
                    {
                        "rot": op.id,
                        "client": op.client,
                        "key": key,
                        "returned": None if x is None else list(x),
                        "interposed": list(g.ops[cand].written),
                        "via": why,
                    }
                )
    return violations


def check_eventual_visibility(trace: Iterable, graph: Optional[CausalityGraph] = None) -> tuple[list[dict], dict]:
    """Every written version must become visible in every DC.

    Per key and DC, a version X is visible from the first ROT after which no
    ROT returns anything older than X (LWW order).  It is a violation when the
    last ROT reading the key in a DC started after X's PUT completed and
    still returned something older.  Returns the violations and lag
    statistics.
    """
    ops = graph.ops if graph is not None else parse_ops(trace)
    puts: dict[str, list[Op]] = defaultdict(list)
    reads: dict[tuple[str, int], list[tuple[float, tuple]]] = defaultdict(list)
    dcs = set()
    for o in ops:
        dcs.add(o.dc)
        if o.written is not None:
            puts[o.written[0]].append(o)
        for key, vid in o.read.items():
            reads[(key, o.dc)].append((o.start, _lww(vid)))
    violations = []
    lags = []
    unobserved = 0
    for key in sorted(puts):
        for dc in sorted(dcs):
            rs = sorted(reads.get((key, dc), []))
            if not rs:
                unobserved += len(puts[key])
                continue
            starts = [t for t, _ in rs]
            suffix_min = [None] * len(rs)
            m = None
            for i in range(len(rs) - 1, -1, -1):
                m = rs[i][1] if m is None or rs[i][1] < m else m
                suffix_min[i] = m
            for p in puts[key]:
                order = _lww(p.written)
                if starts[-1] < p.end:
                    unobserved += 1
                    continue
                # suffix_min is non-decreasing, so the first index that
                # covers X is found by bisection
                i = bisect.bisect_left(suffix_min, order)
                if i == len(rs):
                    violations.append(
                        {"version": list(p.written), "dc": dc, "last_read": list(rs[-1][1]), "last_read_start": starts[-1]}
                    )
                else:
                    lags.append(max(0.0, starts[i] - p.end))
    stats = {
        "observed": len(lags),
        "unobserved": unobserved,
        "mean_lag_ms": float(np.mean(lags)) if lags else 0.0,
        "max_lag_ms": float(max(lags)) if lags else 0.0,
    }
    return violations, stats


def check_convergence(trace: Iterable, graph: Optional[CausalityGraph] = None) -> list[dict]:
    """Replicas agree on the LWW winner of every key at the end of the run."""
    events = [_as_event(e) for e in trace]
    ops = graph.ops if graph is not None else parse_ops(events)
    expected: dict[str, Vid] = {}
    for o in ops:
        if o.written is not None:
            k = o.written[0]
            if k not in expected or _lww(o.written) > _lww(expected[k]):
                expected[k] = o.written
    states = [e for e in events if e.kind == "state"]
    if not states:
        return [{"error": "trace has no end-of-run state"}] if expected else []
    per_dc: dict[int, dict[str, Vid]] = defaultdict(dict)
    for e in states:
        for w in e.data["winners"]:
            per_dc[e.data["dc"]][w[0]] = tuple(w)
    violations = []
    for key in sorted(expected):
        for dc in sorted(per_dc):
            got = per_dc[dc].get(key)
            if got != expected[key]:
                violations.append({"key": key, "dc": dc, "winner": None if got is None else list(got), "expected": list(expected[key])})
    return violations


def check_latency_properties(trace: Iterable, engine: Optional[str] = None) -> dict:
    """Per-ROT one-round, one-version, nonblocking and step counters.

    Needs a trace recorded at level ``full``.  A reply is nonblocking when
    the partition sends it in the same handling step as its latest delivery
    of a message for that ROT.
    """
    events = [_as_event(e) for e in trace]
    rots: dict[int, dict] = {}
    for e in events:
        if e.kind == "op-start" and e.data.get("op") == "rot":
            rots[e.data["rot"]] = {"client": e.data["client"], "keys": len(e.data["keys"]), "mode": e.data.get("mode"),
                                    "req": defaultdict(int), "resp": defaultdict(int), "versions": 0, "multi": False,
                                    "steps": 0, "blocked": False, "block_ms": 0.0, "done": False}
    last_delivery: dict[tuple[str, int], tuple[int, float]] = {}
    for e in events:
        d = e.data
        rot = d.get("rot")
        if rot is None or rot not in rots or e.kind not in ("msg-send", "msg-deliver"):
            continue
        r = rots[rot]
        if e.kind == "msg-deliver":
            if e.node.startswith("p"):
                last_delivery[(e.node, rot)] = (e.step, e.time)
            elif d["msg"] == "rot_resp":
                r["steps"] = max(r["steps"], d["hops"])
            continue
        if d["msg"] == "rot_req" and not e.node.startswith("p"):
            r["req"][d["peer"]] += 1
        elif d["msg"] == "rot_resp":
            r["resp"][e.node] += 1
            if "nv" in d:
                r["versions"] += d["nk"]
                r["multi"] = r["multi"] or d["nv"] != 1
            step, t = last_delivery.get((e.node, rot), (None, e.time))
            if step != e.step:
                r["blocked"] = True
                r["block_ms"] = max(r["block_ms"], e.time - t)
    report = {
        "engine": engine,
        "rots": len(rots),
        "one_round": 0,
        "one_version": 0,
        "nonblocking": 0,
        "nonblocking_violations": 0,
        "blocked_rots": 0,
        "blocking_ms_total": 0.0,
        "steps": {},
    }
    steps: dict[str, int] = defaultdict(int)
    for r in rots.values():
        parts = set(r["req"]) | set(r["resp"])
        if parts and all(r["req"][p] == 1 and r["resp"][p] == 1 for p in parts):
            report["one_round"] += 1
        if r["versions"] == r["keys"] and not r["multi"]:
            report["one_version"] += 1
        if r["blocked"]:
            report["nonblocking_violations"] += 1
            report["blocked_rots"] += 1
            report["blocking_ms_total"] += r["block_ms"]
        else:
            report["nonblocking"] += 1
        steps[str(r["steps"])] += 1
    report["steps"] = dict(sorted(steps.items()))
    report["blocking_ms_total"] = round(report["blocking_ms_total"], 9)
    return report


def check_trace(trace: Iterable, engine: Optional[str] = None, latency: bool = False, visibility: bool = True) -> dict:
    """Run every check and return a JSON-serializable report."""
    events = [_as_event(e) for e in trace]
    graph = build_graph(events)
    snaps = check_snapshots(events, graph)
    conv = check_convergence(events, graph)
    report = {
        "engine": engine,
        "operations": len(graph),
        "snapshots": {"pass": not snaps, "violations": snaps},
        "convergence": {"pass": not conv, "violations": conv},
    }
    if visibility:
        vis, stats = check_eventual_visibility(events, graph)
        report["eventual_visibility"] = {"pass": not vis, "violations": vis, **stats}
    if latency:
        report["latency"] = check_latency_properties(events, engine)
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, separators=(",", ":"))
