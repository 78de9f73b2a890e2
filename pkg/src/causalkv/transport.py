"""Message passing: a seeded discrete-event simulator and a TCP backend.

Both backends expose the same small surface to protocol nodes::

    net.send(src, dst, kind, payload, hops=None)
    net.now()                          # milliseconds
    net.set_timer(node_id, period_ms, callback, name)
    net.call_later(node_id, delay_ms, callback)
    net.record(node_id, kind, data)    # client-visible operation events

A node is any object with ``node_id``, ``role`` (``"client"`` or
``"partition"``), ``dc`` and ``handle(msg)``; an optional ``start(net)`` is
called once before the first event.

Wire format (version 1), shared by both backends and used for byte metrics::

    uint32 big-endian length of the rest | uint8 kind | msgpack body
    body = [1, src, dst, hops, payload]
"""

from __future__ import annotations

import asyncio
import enum
import hashlib
import heapq
import itertools
import json
import logging
import random
import struct
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Sequence

import msgpack

log = logging.getLogger(__name__)

WIRE_VERSION = 1
_HEADER = struct.Struct(">IB")


class Kind(enum.IntEnum):
    ROT_REQ = 1
    ROT_FWD = 2
    ROT_RESP = 3
    PUT_REQ = 4
    PUT_RESP = 5
    REPLICATE = 6
    DEP_CHECK = 7
    READERS_CHECK_REQ = 8
    READERS_CHECK_RESP = 9
    HEARTBEAT = 10
    STAB_EXCHANGE = 11

    @property
    def label(self) -> str:
        return self.name.lower()


RESPONSE_KINDS = frozenset({Kind.ROT_RESP, Kind.PUT_RESP})
# periodic traffic that never lets a system go quiet
BACKGROUND_KINDS = frozenset({Kind.HEARTBEAT, Kind.STAB_EXCHANGE})


class TransportError(RuntimeError):
    pass


class LivenessError(RuntimeError):
    """Simulation hit its time limit with client operations still pending."""

    def __init__(self, message: str, trace: list["TraceEvent"]):
        super().__init__(message)
        self.trace = trace


@dataclass(slots=True)
class Message:
    src: str
    dst: str
    kind: Kind
    payload: dict
    send_time: float = 0.0
    hops: int = 1
    size: int = 0


def encode_frame(kind: Kind, src: str, dst: str, hops: int, payload: Any) -> bytes:
    body = msgpack.packb([WIRE_VERSION, src, dst, hops, payload], use_bin_type=True)
    return _HEADER.pack(len(body) + 1, int(kind)) + body


def decode_frame(frame: bytes) -> Message:
    length, kind = _HEADER.unpack_from(frame)
    if length != len(frame) - 4:
        raise TransportError(f"frame length {length} does not match {len(frame) - 4}")
    return _decode_body(kind, frame[_HEADER.size:], len(frame))


def _decode_body(kind: int, body: bytes, size: int) -> Message:
    version, src, dst, hops, payload = msgpack.unpackb(body, raw=False, strict_map_key=False)
    if version != WIRE_VERSION:
        raise TransportError(f"unsupported wire version {version}")
    return Message(src, dst, Kind(kind), payload, hops=hops, size=size)


@dataclass(slots=True)
class TraceEvent:
    seq: int
    time: float
    step: int
    node: str
    kind: str
    digest: str = ""
    size: int = 0
    data: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "seq": self.seq,
                "time": self.time,
                "step": self.step,
                "node": self.node,
                "kind": self.kind,
                "digest": self.digest,
                "size": self.size,
                "data": self.data,
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "TraceEvent":
        d = json.loads(line)
        return cls(d["seq"], d["time"], d["step"], d["node"], d["kind"], d["digest"], d["size"], d["data"])


def dump_trace(trace: Iterable[TraceEvent], path) -> None:
    with open(path, "w") as fh:
        for ev in trace:
            fh.write(ev.to_json())
            fh.write("\n")


def load_trace(path) -> list[TraceEvent]:
    with open(path) as fh:
        return [TraceEvent.from_json(line) for line in fh if line.strip()]


def trace_bytes(trace: Iterable[TraceEvent]) -> bytes:
    return "".join(ev.to_json() + "\n" for ev in trace).encode()


def _rot_info(kind: Kind, payload: dict) -> dict:
    info: dict = {}
    rot = payload.get("rot") if isinstance(payload, dict) else None
    if rot is not None:
        info["rot"] = rot
    if kind is Kind.ROT_RESP and "vals" in payload:
        per_key = Counter(entry[0] for entry in payload["vals"])
        info["nk"] = len(per_key)
        info["nv"] = max(per_key.values(), default=0)
    return info


@dataclass
class Schedule:
    """Delay law for the simulator.

    ``links`` overrides the law per directed ``(src, dst)`` pair: a float is a
    fixed delay, a list is consumed one entry per message (the law applies once
    it runs out).
    """

    seed: int = 0
    delay_law: str = "uniform"  # fixed | uniform | adversarial
    fixed_ms: float = 1.0
    lo_ms: float = 0.05
    hi_ms: float = 0.15
    slow_prob: float = 0.1
    slow_factor: float = 20.0
    inter_dc_ms: float = 1.0
    links: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.delay_law not in ("fixed", "uniform", "adversarial"):
            raise ValueError(f"unknown delay law {self.delay_law!r}")
        if self.lo_ms < 0 or self.hi_ms < self.lo_ms or self.fixed_ms < 0:
            raise ValueError("delays must be finite and non-negative")

    def delay(self, rng: random.Random, src: str, dst: str, cross_dc: bool) -> float:
        ov = self.links.get((src, dst))
        if isinstance(ov, list) and ov:
            return float(ov.pop(0))
        if isinstance(ov, (int, float)):
            return float(ov)
        if self.delay_law == "fixed":
            d = self.fixed_ms
        else:
            d = rng.uniform(self.lo_ms, self.hi_ms)
            if self.delay_law == "adversarial" and rng.random() < self.slow_prob:
                d *= rng.uniform(1.0, self.slow_factor)
        return d + self.inter_dc_ms if cross_dc else d


@dataclass
class ServiceModel:
    """CPU cost charged to partitions per handled event.

    A partition handles one event at a time; events arriving while it is busy
    queue in FIFO order.  Messages sent while handling leave when the handling
    finishes.  Clients are never charged.
    """

    per_event_ms: float = 0.0
    per_kb_ms: float = 0.0

    @property
    def active(self) -> bool:
        return self.per_event_ms > 0 or self.per_kb_ms > 0

    def cost(self, size: int) -> float:
        return self.per_event_ms + self.per_kb_ms * size / 1024.0


_DELIVER, _TIMER, _CALL, _WAKE = range(4)


class _Timer:
    __slots__ = ("node_id", "period", "callback", "name", "active")

    def __init__(self, node_id, period, callback, name):
        self.node_id = node_id
        self.period = period
        self.callback = callback
        self.name = name
        self.active = True

    def cancel(self) -> None:
        self.active = False


class Simulator:
    """Single-threaded deterministic event loop.

    Same schedule seed and same inputs give a byte-identical trace.  Every
    message is delivered exactly once after a finite delay; nothing is lost.
    A ``chooser`` replaces time order: it receives the pending events as
    ``(event id, node id)`` pairs in time order and returns the index of the
    one to run next.
    ``trace_level`` is ``"none"``, ``"ops"`` (client operations and final
    state only) or ``"full"`` (also every send, delivery and timer).
    """

    def __init__(
        self,
        schedule: Optional[Schedule] = None,
        service: Optional[ServiceModel] = None,
        trace_level: str = "ops",
        chooser: Optional[Callable[[list[tuple[int, str]]], int]] = None,
    ):
        if trace_level not in ("none", "ops", "full"):
            raise ValueError(f"unknown trace level {trace_level!r}")
        self.schedule = schedule or Schedule()
        self.service = service or ServiceModel()
        self.trace_level = trace_level
        self.chooser = chooser
        self.rng = random.Random(self.schedule.seed)
        self.nodes: dict[str, Any] = {}
        self.trace: list[TraceEvent] = []
        self.msg_count: Counter = Counter()
        self.byte_count: Counter = Counter()
        self.pending_ops = 0
        self._now = 0.0
        self.step = 0
        self._heap: list = []
        self._seq = itertools.count()
        self._trace_seq = itertools.count()
        self._transient = 0
        self._background = 0
        self._hops = 0
        self._depart = 0.0
        self._busy: dict[str, float] = {}
        self._inbox: dict[str, deque] = {}
        self._wake_pending: set[str] = set()
        self._started = False

    # -- node registry ---------------------------------------------------

    def register(self, node) -> None:
        if node.node_id in self.nodes:
            raise TransportError(f"duplicate node {node.node_id}")
        if node.role not in ("client", "partition"):
            raise TransportError(f"unknown role {node.role!r}")
        self.nodes[node.node_id] = node
        if self._started and hasattr(node, "start"):
            node.start(self)

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        for node in list(self.nodes.values()):
            if hasattr(node, "start"):
                node.start(self)

    # -- clock -----------------------------------------------------------

    def now(self) -> float:
        return self._now

    # -- API used by nodes -----------------------------------------------

    def send(self, src: str, dst: str, kind: Kind, payload: dict, hops: Optional[int] = None) -> None:
        s = self.nodes.get(src)
        d = self.nodes.get(dst)
        if s is None or d is None:
            raise TransportError(f"unregistered node in {src} -> {dst}")
        if s.role == "client" and d.role == "client":
            raise TransportError(f"clients do not talk to each other: {src} -> {dst}")
        if (s.role == "client" or d.role == "client") and s.dc != d.dc:
            raise TransportError(f"clients only talk to partitions of their own DC: {src} -> {dst}")
        if d.role == "client" and kind not in RESPONSE_KINDS:
            raise TransportError(f"partition {src} sent {kind.label} to client {dst}")
        kind = Kind(kind)
        hops = self._hops + 1 if hops is None else hops
        frame = encode_frame(kind, src, dst, hops, payload)
        size = len(frame)
        self.msg_count[kind.label] += 1
        self.byte_count[kind.label] += size
        delay = self.schedule.delay(self.rng, src, dst, s.dc != d.dc)
        if delay < 0:
            raise TransportError("negative delay")
        send_time = self._now + self._depart
        msg = Message(src, dst, kind, payload, send_time, hops, size)
        if self.trace_level == "full":
            data = {"msg": kind.label, "peer": dst, "hops": hops}
            data.update(_rot_info(kind, payload))
            self._emit(src, "msg-send", data, _digest(frame), size)
        self._push(send_time + delay, _DELIVER, msg)
        if kind in BACKGROUND_KINDS:
            self._background += 1

    def set_timer(self, node_id: str, period: float, callback: Callable[[], None], name: str = "timer") -> _Timer:
        if not period > 0:
            raise ValueError(f"timer period must be positive, got {period}")
        if node_id not in self.nodes:
            raise TransportError(f"unregistered node {node_id}")
        t = _Timer(node_id, period, callback, name)
        heapq.heappush(self._heap, (self._now + period, next(self._seq), _TIMER, t))
        return t

    def call_later(self, node_id: str, delay: float, callback: Callable[[], None]) -> None:
        if delay < 0:
            raise ValueError("delay must be non-negative")
        self._push(self._now + self._depart + delay, _CALL, (node_id, callback, self._hops))

    def record(self, node_id: str, kind: str, data: dict) -> None:
        if kind == "op-start":
            self.pending_ops += 1
        elif kind == "op-end":
            self.pending_ops -= 1
        if self.trace_level != "none":
            self._emit(node_id, kind, data)

    # -- event loop ------------------------------------------------------

    def _push(self, t: float, etype: int, data) -> None:
        self._transient += 1
        heapq.heappush(self._heap, (t, next(self._seq), etype, data))

    def _emit(self, node: str, kind: str, data: dict, digest: str = "", size: int = 0) -> None:
        self.trace.append(TraceEvent(next(self._trace_seq), self._now, self.step, node, kind, digest, size, data))

    def _pop(self):
        if self.chooser is None:
            return heapq.heappop(self._heap)
        ordered = sorted(self._heap)
        i = self.chooser([(ev[1], _event_node(ev)) for ev in ordered])
        ev = ordered.pop(i)
        self._heap = ordered
        heapq.heapify(self._heap)
        return ev

    def run(self, until: Optional[float] = None) -> None:
        """Process events with time <= ``until`` (everything if None)."""
        self.start()
        while self._heap:
            if until is not None and self.chooser is None and self._heap[0][0] > until:
                break
            t, _, etype, data = self._pop()
            if t > self._now:
                self._now = t
            if etype == _TIMER:
                if not data.active:
                    continue
                heapq.heappush(self._heap, (t + data.period, next(self._seq), _TIMER, data))
                self._dispatch(data.node_id, etype, data)
            else:
                self._transient -= 1
                if etype == _DELIVER:
                    if data.kind in BACKGROUND_KINDS:
                        self._background -= 1
                    self._dispatch(data.dst, etype, data)
                elif etype == _CALL:
                    self._dispatch(data[0], etype, data)
                else:
                    self._wake(data)
        if until is not None and self._now < until and self.chooser is None:
            self._now = until

    def _has_transient(self) -> bool:
        return self._transient > self._background or any(self._inbox.values())

    def run_until_quiescent(self, limit: float) -> list[TraceEvent]:
        """Run until no message or callback is pending and no client operation
        is outstanding.  Periodic timers and the heartbeat and stabilization
        messages they send do not count."""
        self.start()
        while self._heap and self._now <= limit:
            if not self._has_transient() and self.pending_ops == 0:
                break
            nxt = self._heap[0][0] if self.chooser is None else self._now
            if nxt > limit:
                break
            self.run(until=nxt)
        if self.pending_ops > 0:
            raise LivenessError(f"{self.pending_ops} client operations pending at t={self._now}", self.trace)
        return self.trace

    def _dispatch(self, node_id: str, etype: int, data) -> None:
        node = self.nodes[node_id]
        if self.service.active and node.role == "partition":
            inbox = self._inbox.setdefault(node_id, deque())
            if inbox or self._busy.get(node_id, 0.0) > self._now:
                inbox.append((etype, data))
                self._schedule_wake(node_id)
                return
        self._handle(node, etype, data)

    def _schedule_wake(self, node_id: str) -> None:
        if node_id not in self._wake_pending:
            self._wake_pending.add(node_id)
            self._push(max(self._busy.get(node_id, 0.0), self._now), _WAKE, node_id)

    def _wake(self, node_id: str) -> None:
        self._wake_pending.discard(node_id)
        inbox = self._inbox[node_id]
        if self._busy.get(node_id, 0.0) > self._now:
            self._schedule_wake(node_id)
            return
        etype, data = inbox.popleft()
        self._handle(self.nodes[node_id], etype, data)
        if inbox:
            self._schedule_wake(node_id)

    def _handle(self, node, etype: int, data) -> None:
        self.step += 1
        cost = 0.0
        if self.service.active and node.role == "partition":
            cost = self.service.cost(data.size if etype == _DELIVER else 0)
            self._busy[node.node_id] = self._now + cost
        self._depart = cost
        try:
            if etype == _DELIVER:
                self._hops = data.hops
                if self.trace_level == "full":
                    info = {"msg": data.kind.label, "peer": data.src, "hops": data.hops}
                    info.update(_rot_info(data.kind, data.payload))
                    self._emit(node.node_id, "msg-deliver", info, size=data.size)
                node.handle(data)
            elif etype == _TIMER:
                self._hops = 0
                if self.trace_level == "full":
                    self._emit(node.node_id, "timer", {"name": data.name})
                data.callback()
            else:
                self._hops = data[2]
                data[1]()
        finally:
            self._hops = 0
            self._depart = 0.0


def _event_node(ev) -> str:
    etype, data = ev[2], ev[3]
    if etype == _DELIVER:
        return data.dst
    if etype == _TIMER:
        return data.node_id
    if etype == _CALL:
        return data[0]
    return data


def _digest(frame: bytes) -> str:
    return hashlib.blake2b(frame[_HEADER.size:], digest_size=8).hexdigest()


class SocketNetwork:
    """TCP backend on localhost: one listening socket per node.

    All nodes run on one asyncio loop, so each node's handlers execute one at
    a time and nodes share no mutable state; they only exchange frames.
    """

    def __init__(self, trace_level: str = "ops", host: str = "127.0.0.1"):
        self.trace_level = trace_level
        self.host = host
        self.nodes: dict[str, Any] = {}
        self.addresses: dict[str, tuple[str, int]] = {}
        self.trace: list[TraceEvent] = []
        self.msg_count: Counter = Counter()
        self.byte_count: Counter = Counter()
        self.pending_ops = 0
        self.step = 0
        self._t0 = time.monotonic()
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._servers: list = []
        self._links: dict[tuple[str, str], asyncio.Queue] = {}
        self._tasks: list[asyncio.Task] = []
        self._timers: list = []
        self._trace_seq = itertools.count()
        self._hops = 0
        self.errors: list[BaseException] = []

    def register(self, node) -> None:
        if node.node_id in self.nodes:
            raise TransportError(f"duplicate node {node.node_id}")
        self.nodes[node.node_id] = node

    def now(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0

    async def _serve(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                head = await reader.readexactly(_HEADER.size)
                length, kind = _HEADER.unpack(head)
                body = await reader.readexactly(length - 1)
                msg = _decode_body(kind, body, length + 4)
                msg.send_time = self.now()
                self._deliver(msg)
        except asyncio.IncompleteReadError:
            pass
        finally:
            writer.close()

    def _deliver(self, msg: Message) -> None:
        node = self.nodes[msg.dst]
        self.step += 1
        self._hops = msg.hops
        try:
            if self.trace_level == "full":
                info = {"msg": msg.kind.label, "peer": msg.src, "hops": msg.hops}
                info.update(_rot_info(msg.kind, msg.payload))
                self._emit(msg.dst, "msg-deliver", info, size=msg.size)
            node.handle(msg)
        except Exception as exc:  # surfaced by run()
            log.exception("node %s failed handling %s", msg.dst, msg.kind.label)
            self.errors.append(exc)
        finally:
            self._hops = 0

    async def _pump(self, dst: str, queue: asyncio.Queue) -> None:
        host, port = self.addresses[dst]
        _, writer = await asyncio.open_connection(host, port)
        try:
            while True:
                frame = await queue.get()
                if frame is None:
                    break
                writer.write(frame)
                await writer.drain()
        finally:
            writer.close()

    def send(self, src: str, dst: str, kind: Kind, payload: dict, hops: Optional[int] = None) -> None:
        s = self.nodes.get(src)
        d = self.nodes.get(dst)
        if s is None or d is None:
            raise TransportError(f"unregistered node in {src} -> {dst}")
        if s.role == "client" and d.role == "client":
            raise TransportError(f"clients do not talk to each other: {src} -> {dst}")
        kind = Kind(kind)
        hops = self._hops + 1 if hops is None else hops
        frame = encode_frame(kind, src, dst, hops, payload)
        self.msg_count[kind.label] += 1
        self.byte_count[kind.label] += len(frame)
        if self.trace_level == "full":
            data = {"msg": kind.label, "peer": dst, "hops": hops}
            data.update(_rot_info(kind, payload))
            self._emit(src, "msg-send", data, _digest(frame), len(frame))
        q = self._links.get((src, dst))
        if q is None:
            q = self._links[(src, dst)] = asyncio.Queue()
            self._tasks.append(self._loop.create_task(self._pump(dst, q)))
        q.put_nowait(frame)

    def set_timer(self, node_id: str, period: float, callback: Callable[[], None], name: str = "timer"):
        if not period > 0:
            raise ValueError(f"timer period must be positive, got {period}")
        timer = _Timer(node_id, period, callback, name)

        def fire():
            if not timer.active:
                return
            self.step += 1
            self._hops = 0
            try:
                callback()
            except Exception as exc:
                log.exception("timer %s on %s failed", name, node_id)
                self.errors.append(exc)
            self._timers.append(self._loop.call_later(period / 1000.0, fire))

        self._timers.append(self._loop.call_later(period / 1000.0, fire))
        return timer

    def call_later(self, node_id: str, delay: float, callback: Callable[[], None]) -> None:
        hops = self._hops

        def fire():
            self.step += 1
            self._hops = hops
            try:
                callback()
            except Exception as exc:
                log.exception("callback on %s failed", node_id)
                self.errors.append(exc)
            finally:
                self._hops = 0

        self._timers.append(self._loop.call_later(max(delay, 0.0) / 1000.0, fire))

    def record(self, node_id: str, kind: str, data: dict) -> None:
        if kind == "op-start":
            self.pending_ops += 1
        elif kind == "op-end":
            self.pending_ops -= 1
        if self.trace_level != "none":
            self._emit(node_id, kind, data)

    def _emit(self, node: str, kind: str, data: dict, digest: str = "", size: int = 0) -> None:
        self.trace.append(TraceEvent(next(self._trace_seq), self.now(), self.step, node, kind, digest, size, data))

    async def _open(self) -> None:
        self._loop = asyncio.get_running_loop()
        for node_id in self.nodes:
            server = await asyncio.start_server(self._serve, self.host, 0)
            self._servers.append(server)
            self.addresses[node_id] = server.sockets[0].getsockname()[:2]
        self._t0 = time.monotonic()
        for node in self.nodes.values():
            if hasattr(node, "start"):
                node.start(self)

    async def _close(self) -> None:
        for handle in self._timers:
            handle.cancel()
        for q in self._links.values():
            q.put_nowait(None)
        await asyncio.gather(*self._tasks, return_exceptions=True)
        for server in self._servers:
            server.close()
            await server.wait_closed()

    async def run_async(self, duration_s: float, drain: Callable[["SocketNetwork"], Any] = None, drain_timeout_s: float = 10.0) -> None:
        await self._open()
        await asyncio.sleep(duration_s)
        if drain is not None:
            drain(self)
        deadline = time.monotonic() + drain_timeout_s
        while self.pending_ops > 0 and time.monotonic() < deadline:
            await asyncio.sleep(0.01)
        await self._close()
        if self.errors:
            raise self.errors[0]
        if self.pending_ops > 0:
            raise LivenessError(f"{self.pending_ops} client operations pending", self.trace)

    def run(self, duration_s: float, drain=None, drain_timeout_s: float = 10.0) -> list[TraceEvent]:
        asyncio.run(self.run_async(duration_s, drain, drain_timeout_s))
        return self.trace
