"""Seeded discrete-event network: gossip, partial synchrony, timers, crashes.

All randomness comes from one ``random.Random`` drawn in event order, and
events are processed in (time, insertion sequence) order, so a run is a
pure function of its inputs.
"""
from __future__ import annotations

import enum
import heapq
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

from .consensus import Message, Node, Note, Send, SetTimer, TimerKind
from .core_types import ConfigError, NodeId

log = logging.getLogger(__name__)


class Fanout(str, enum.Enum):
    ALL = "all"
    LOG2N = "log2n"


@dataclass(frozen=True)
class Partition:
    """Messages from ``nodes`` (and to them, if ``inbound``) sent in
    [start, end) are held until ``end``. Only allowed before GST."""
    start: int
    end: int
    nodes: FrozenSet[NodeId]
    inbound: bool = False

    def blocks(self, frm: NodeId, to: NodeId, t: int) -> bool:
        if not self.start <= t < self.end:
            return False
        return frm in self.nodes or (self.inbound and to in self.nodes)


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    delta: int = 100
    gst: int = 0
    pre_gst_delay: Tuple[int, int] = (1, 100)
    pre_gst_drop: float = 0.0
    delay_min: int = 1
    fanout: Fanout = Fanout.ALL
    duplicate_suppression: bool = True
    partitions: Tuple[Partition, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "partitions", tuple(self.partitions))
        object.__setattr__(self, "fanout", Fanout(self.fanout))
        if self.delta < 1:
            raise ConfigError("delta must be >= 1")
        if not 1 <= self.delay_min <= self.delta:
            raise ConfigError("delay_min must lie in 1..delta")
        lo, hi = self.pre_gst_delay
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad pre_gst_delay {self.pre_gst_delay}")
        if not 0.0 <= self.pre_gst_drop < 1.0:
            raise ConfigError("pre_gst_drop must be in [0, 1)")
        if self.gst < 0:
            raise ConfigError("gst must be >= 0")
        for p in self.partitions:
            if p.end > self.gst:
                raise ConfigError(f"partition ending at {p.end} extends past gst={self.gst}")


class EventKind(str, enum.Enum):
    DELIVER = "deliver"
    TIMER_FIRE = "timer"
    NODE_CRASH = "crash"
    NODE_RECOVER = "recover"
    CALL = "call"


@dataclass(order=True)
class SimEvent:
    at: int
    seq: int
    kind: EventKind = field(compare=False)
    data: tuple = field(compare=False, default=())


class MaxTimeExceeded(RuntimeError):
    def __init__(self, msg: str, trace: list):
        super().__init__(msg)
        self.trace = trace


class Simulation:
    """Owns the event queue, the RNG and the trace.

    ``adversaries`` maps a byzantine node id to an object with hooks
    ``outgoing(sim, node_id, sends)``, ``attach(sim, node_id)`` and
    ``on_timer_set(sim, node_id, kind, h, r, at)`` (see adversary module).
    """

    def __init__(self, nodes: Dict[NodeId, Node], cfg: SimConfig, *, target_height: int = 1,
                 max_time: Optional[int] = None, adversaries=None, crash_at: Optional[Dict[NodeId, int]] = None):
        self.nodes = nodes
        self.ids = list(nodes)
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        self.target = target_height
        self.max_time = max_time
        self.adversaries = dict(adversaries or {})
        self.byzantine: Set[NodeId] = set(self.adversaries)
        self.correct = [n for n in self.ids if n not in self.byzantine]
        self.crashed: Set[NodeId] = set()
        self.now = 0
        self._q: List[SimEvent] = []
        self._seq = 0
        self.trace: List[dict] = []
        # per message id: nodes holding it, and best scheduled arrival per node
        self._held: Dict[str, Set[NodeId]] = {}
        self._best: Dict[Tuple[str, NodeId], int] = {}
        self._msgs: Dict[str, Message] = {}
        self._parked: Dict[NodeId, List[Tuple[Message, NodeId, int]]] = {}
        self.timer_deadlines: Dict[Tuple[NodeId, str, int, int], int] = {}
        self.draining = False
        self.events_processed = 0
        for n, at in (crash_at or {}).items():
            self._push(at, EventKind.NODE_CRASH, (n,))
        for n, adv in self.adversaries.items():
            adv.attach(self, n)

    # ---- queue

    def _push(self, at: int, kind: EventKind, data: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._q, SimEvent(at, self._seq, kind, data))

    def call_at(self, at: int, fn: Callable[[], None]) -> None:
        self._push(max(at, self.now), EventKind.CALL, (fn,))

    def record(self, node: Optional[NodeId], kind: str, **data) -> None:
        rec = {"t": self.now, "kind": kind}
        if node is not None:
            rec["node"] = node
        rec.update(data)
        self.trace.append(rec)

    # ---- delays

    def delay(self, frm: NodeId, to: NodeId, depart: int) -> int:
        """Arrival time of a single hop leaving at ``depart``."""
        cfg = self.cfg
        for p in cfg.partitions:
            if p.blocks(frm, to, depart):
                depart = p.end
        if depart >= cfg.gst:
            return depart + self.rng.randint(cfg.delay_min, cfg.delta)
        lo, hi = cfg.pre_gst_delay
        if cfg.pre_gst_drop and self.rng.random() < cfg.pre_gst_drop:
            # lost copy, redelivered once the network stabilizes
            return cfg.gst + self.rng.randint(cfg.delay_min, cfg.delta)
        at = depart + self.rng.randint(lo, hi)
        return min(at, cfg.gst + cfg.delta)

    def fanout_targets(self, frm: NodeId) -> List[NodeId]:
        others = [n for n in self.ids if n != frm]
        if self.cfg.fanout is Fanout.ALL:
            return others
        k = min(len(others), math.ceil(math.log2(len(self.ids))))
        return sorted(self.rng.sample(others, k), key=self.ids.index)

    # ---- sending

    def _schedule(self, msg: Message, frm: NodeId, to: NodeId, arrive: int, sent: int) -> None:
        key = (msg.mid, to)
        if self.cfg.duplicate_suppression:
            if to in self._held.get(msg.mid, ()):
                return
            best = self._best.get(key)
            if best is not None and best <= arrive:
                return
            self._best[key] = arrive
        self._push(arrive, EventKind.DELIVER, (msg, frm, to, sent))

    def gossip_send(self, msg: Message, frm: NodeId, depart: Optional[int] = None,
                    targets: Optional[Iterable[NodeId]] = None, arrive_at: Optional[Dict[NodeId, int]] = None) -> None:
        """Originate ``msg`` at ``frm``. Byzantine senders may restrict targets or
        pin arrival times; correct senders always use the configured fanout."""
        depart = self.now if depart is None else depart
        if frm in self.crashed:
            return
        first = msg.mid not in self._msgs
        self._msgs.setdefault(msg.mid, msg)
        self._held.setdefault(msg.mid, set()).add(frm)
        rec = {"msg": dict(msg.summary(), id=msg.mid), "depart": depart}
        explicit = targets is not None or arrive_at is not None
        if explicit:
            tl = list(targets) if targets is not None else list(arrive_at)
            rec["to"] = tl
        if first or explicit:
            self.record(frm, "SEND", **rec)
        if explicit:
            for to in tl:
                if to == frm:
                    continue
                at = (arrive_at or {}).get(to)
                self._schedule(msg, frm, to, at if at is not None else self.delay(frm, to, depart), depart)
            return
        fan = self.fanout_targets(frm)
        for to in fan:
            self._schedule(msg, frm, to, self.delay(frm, to, depart), depart)
        if self.cfg.fanout is Fanout.LOG2N and frm not in self.byzantine:
            # eventual-delivery backstop for the sparse fanout
            for to in self.correct:
                if to != frm and to not in fan:
                    self._schedule(msg, frm, to, max(depart, self.cfg.gst) + self.cfg.delta, depart)

    def _relay(self, msg: Message, node: NodeId) -> None:
        if node in self.byzantine or node in self.crashed:
            return
        fan = self.fanout_targets(node)
        for to in fan:
            self._schedule(msg, node, to, self.delay(node, to, self.now), self.now)

    # ---- node outputs

    def apply_outputs(self, node: NodeId, outputs) -> None:
        if node in self.crashed:
            return
        sends = []
        for o in outputs:
            if isinstance(o, Send):
                sends.append(o)
            elif isinstance(o, SetTimer):
                self.set_timer(node, o)
            else:
                self.record(node, o.kind, **o.data)
        if not sends:
            return
        adv = self.adversaries.get(node)
        if adv is not None:
            adv.outgoing(self, node, sends)
            return
        for s in sends:
            self.gossip_send(s.msg, node, self.now + s.compute)

    def set_timer(self, node: NodeId, t: SetTimer) -> None:
        at = self.now + t.duration
        self.timer_deadlines[(node, t.kind.value, t.height, t.round)] = at
        self._push(at, EventKind.TIMER_FIRE, (node, t.kind, t.height, t.round))
        self.record(node, "TIMER", timer=t.kind.value, h=t.height, r=t.round, fire=at)
        if node not in self.byzantine:
            for b, adv in self.adversaries.items():
                adv.on_timer_set(self, node, t.kind, t.height, t.round, at)

    # ---- main loop

    def done(self) -> bool:
        return all(self.nodes[n].s.h >= self.target for n in self.correct if n not in self.crashed)

    def run(self) -> List[dict]:
        # nodes crashed from t=0 never get to start
        while self._q and self._q[0].at <= 0 and self._q[0].kind is EventKind.NODE_CRASH:
            self._dispatch(heapq.heappop(self._q))
        for n in self.ids:
            self.apply_outputs(n, self.nodes[n].start())
        while self._q:
            if not self.draining and self.done():
                self.draining = True
                self.record(None, "END", reason="target")
            ev = heapq.heappop(self._q)
            if self.max_time is not None and ev.at > self.max_time and not self.draining:
                self.now = self.max_time
                self.record(None, "END", reason="max_time")
                raise MaxTimeExceeded(f"no progress to height {self.target} by t={self.max_time}", self.trace)
            if self.draining and ev.kind is not EventKind.DELIVER:
                continue
            self.now = ev.at
            self.events_processed += 1
            self._dispatch(ev)
        if not self.done():
            self.record(None, "END", reason="quiescent")
            raise MaxTimeExceeded("event queue drained before target height", self.trace)
        return self.trace

    def _dispatch(self, ev: SimEvent) -> None:
        k = ev.kind
        if k is EventKind.DELIVER:
            msg, frm, to, sent = ev.data
            self._deliver(msg, frm, to, sent)
        elif k is EventKind.TIMER_FIRE:
            node, kind, h, r = ev.data
            if node in self.crashed:
                return
            self.apply_outputs(node, self.nodes[node].on_timer(kind, h, r))
        elif k is EventKind.NODE_CRASH:
            (node,) = ev.data
            self.crashed.add(node)
            self.record(node, "CRASH")
        elif k is EventKind.NODE_RECOVER:
            (node,) = ev.data
            self.crashed.discard(node)
            self.record(node, "RECOVER")
            for msg, frm, sent in self._parked.pop(node, []):
                self._deliver(msg, frm, node, sent)
        else:
            ev.data[0]()

    def _deliver(self, msg: Message, frm: NodeId, to: NodeId, sent: int) -> None:
        if to in self.crashed:
            self._parked.setdefault(to, []).append((msg, frm, sent))
            return
        holders = self._held.setdefault(msg.mid, set())
        if to in holders and self.cfg.duplicate_suppression:
            return
        holders.add(to)
        self.record(to, "DELIVER", id=msg.mid, **{"from": frm, "sent": sent})
        self._relay(msg, to)
        if self.draining:
            return
        self.apply_outputs(to, self.nodes[to].deliver(msg))
