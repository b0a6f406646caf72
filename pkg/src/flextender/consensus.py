"""FlexTender per-node state machine.

A :class:`Node` consumes deliveries and timer firings and returns outputs
(messages to gossip, timers to arm, trace notes). It never touches the
network itself, so the same event sequence always yields the same state.
"""
from __future__ import annotations

import enum
import hashlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

from .core_types import (ClusterConfig, ConfigError, Digest, NodeId, Transaction, TxId, Value,
                         quorum_size, removal_threshold, subsequence)
from .execution import (DepDag, ExecStats, WorldState, apply_committed, build_dag, execute_block,
                        reexecute_after_removal, snapshot_execute)
from .policy import (EndorsementRecord, EndorsementView, PolicyBinding, PolicyExpr, TxStatus,
                     aggregate_prevotes, applicable_bindings, endorsers_of, is_properly_endorsed,
                     is_vetoed, mutual_exclusion_check, threshold_of)


class Step(enum.IntEnum):
    PROPOSE = 0
    PREVOTE = 1
    PRECOMMIT = 2


class ExclusionKind(str, enum.Enum):
    REMOVE_IF_FIRST = "if_first"
    REMOVE_ALWAYS = "always"


class TimerKind(str, enum.Enum):
    PROPOSE = "propose"
    PREVOTE = "prevote"
    PRECOMMIT = "precommit"


# -- messages ---------------------------------------------------------------

def _mid(*parts) -> str:
    return hashlib.sha256("|".join(map(str, parts)).encode()).hexdigest()[:16]


class _Msg:
    """Identity of a message is its content id, so byte-identical copies merge."""
    mid: str

    def __eq__(self, other):
        return isinstance(other, _Msg) and self.mid == other.mid

    def __hash__(self):
        return hash(self.mid)


@dataclass(frozen=True, eq=False)
class Propose(_Msg):
    height: int
    round: int
    sender: NodeId
    digest: Digest
    vr: int = -1
    rr: int = -1
    value: Optional[Value] = None
    # hash-only re-proposals name the referenced examined value and the
    # txids dropped from it instead of carrying the payload
    ref_digest: Optional[Digest] = None
    removed: Tuple[TxId, ...] = ()
    mid: str = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "removed", tuple(self.removed))
        object.__setattr__(self, "mid", _mid("P", self.height, self.round, self.sender, self.digest, self.vr,
                                             self.rr, self.ref_digest, ",".join(self.removed),
                                             self.value is not None))

    @property
    def hash_only(self) -> bool:
        return self.value is None

    def summary(self) -> dict:
        d = {"type": "propose", "h": self.height, "r": self.round, "digest": self.digest[:12],
             "vr": self.vr, "rr": self.rr}
        if self.value is not None:
            d["txs"] = list(self.value.txids)
            d["status"] = [r.status.value for r in self.value.exec_results]
        else:
            d["ref"] = self.ref_digest[:12] if self.ref_digest else None
            d["removed"] = list(self.removed)
        return d


@dataclass(frozen=True, eq=False)
class Prevote(_Msg):
    height: int
    round: int
    sender: NodeId
    digest: Optional[Digest]
    endorsements: Optional[Tuple[Tuple[TxId, EndorsementView], ...]] = None
    con: bool = True
    mid: str = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.digest is None and self.endorsements is not None:
            raise ValueError("nil prevote cannot carry endorsements")
        if self.endorsements is not None:
            object.__setattr__(self, "endorsements", tuple(sorted(self.endorsements)))
        end = None if self.endorsements is None else ";".join(f"{t}={v.value}" for t, v in self.endorsements)
        object.__setattr__(self, "mid", _mid("V", self.height, self.round, self.sender, self.digest, end,
                                             self.con))

    def summary(self) -> dict:
        return {"type": "prevote", "h": self.height, "r": self.round,
                "digest": self.digest[:12] if self.digest else None,
                "end": None if self.endorsements is None else {t: v.value for t, v in self.endorsements},
                "con": self.con}


@dataclass(frozen=True, eq=False)
class Precommit(_Msg):
    height: int
    round: int
    sender: NodeId
    digest: Optional[Digest]
    exclusions: Tuple[Tuple[TxId, ExclusionKind], ...] = ()
    mid: str = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.digest is None and self.exclusions:
            raise ValueError("nil precommit cannot carry exclusions")
        object.__setattr__(self, "exclusions", tuple(sorted(self.exclusions)))
        exc = ";".join(f"{t}={k.value}" for t, k in self.exclusions)
        object.__setattr__(self, "mid", _mid("C", self.height, self.round, self.sender, self.digest, exc))

    def summary(self) -> dict:
        return {"type": "precommit", "h": self.height, "r": self.round,
                "digest": self.digest[:12] if self.digest else None,
                "excl": {t: k.value for t, k in self.exclusions}}


Message = Union[Propose, Prevote, Precommit]


# -- outputs ----------------------------------------------------------------

@dataclass(frozen=True)
class Send:
    msg: Message
    compute: int = 0  # simulated ticks of local work before the message leaves


@dataclass(frozen=True)
class SetTimer:
    kind: TimerKind
    height: int
    round: int
    duration: int


@dataclass(frozen=True)
class Note:
    kind: str  # PHASE | DECIDE | REMOVE | ABORT
    data: dict


Output = Union[Send, SetTimer, Note]


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class TimerConfig:
    propose_base: int
    propose_step: int
    prevote_base: int
    prevote_step: int
    precommit_base: int
    precommit_step: int
    delta: int = 100

    def __post_init__(self):
        if min(self.propose_step, self.prevote_step, self.precommit_step) < 0:
            raise ConfigError("timer steps must be non-negative")
        if self.prevote_base < 2 * self.delta:
            raise ConfigError(f"timeoutPrevote base {self.prevote_base} < 2*delta={2 * self.delta}")

    @classmethod
    def for_delta(cls, delta: int) -> "TimerConfig":
        return cls(2 * delta, delta, 2 * delta, delta, 2 * delta, delta, delta)

    def timeout(self, kind: TimerKind, round: int) -> int:
        base, step = {TimerKind.PROPOSE: (self.propose_base, self.propose_step),
                      TimerKind.PREVOTE: (self.prevote_base, self.prevote_step),
                      TimerKind.PRECOMMIT: (self.precommit_base, self.precommit_step)}[kind]
        return base + round * step


@dataclass(frozen=True)
class ProtocolConfig:
    cluster: ClusterConfig
    timers: TimerConfig
    bindings: Tuple[PolicyBinding, ...] = ()
    default_policy: Optional[PolicyExpr] = None
    batch: int = 16
    mode: str = "flextender"
    hash_only_reproposal: bool = True
    dependency_reexec: bool = True
    exec_cost_per_tx: int = 0
    sign_cost_per_tx: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bindings", tuple(self.bindings))
        if self.default_policy is None:
            object.__setattr__(self, "default_policy",
                               threshold_of(quorum_size(self.cluster), self.cluster.node_ids))
        if self.mode not in ("flextender", "eov"):
            raise ConfigError(f"unknown mode {self.mode!r}")

    @property
    def eov(self) -> bool:
        return self.mode == "eov"


# -- per-height message log ---------------------------------------------------

class HeightLog:
    def __init__(self):
        # round -> digest -> first proposal from that round's proposer
        self.proposals: Dict[int, Dict[Digest, Propose]] = defaultdict(dict)
        # con=true votes: round -> sender -> set of digests (None = nil)
        self.votes: Dict[int, Dict[NodeId, set]] = defaultdict(dict)
        # endorsement-carrying prevotes: round -> digest -> sender -> [<= 2 distinct]
        self.endorsements: Dict[int, Dict[Digest, Dict[NodeId, List[Prevote]]]] = defaultdict(dict)
        # round -> digest -> sender -> precommit
        self.precommits: Dict[int, Dict[Optional[Digest], Dict[NodeId, Precommit]]] = defaultdict(dict)
        self.senders: Dict[int, Set[NodeId]] = defaultdict(set)
        self.values: Dict[Digest, Value] = {}
        self.bad_values: Set[Digest] = set()
        self.version: Dict[Tuple[int, Digest], int] = defaultdict(int)

    def prevote_count(self, r: int, digest: Optional[Digest]) -> int:
        return sum(1 for ds in self.votes.get(r, {}).values() if digest in ds)

    def prevote_any(self, r: int) -> int:
        return len(self.votes.get(r, {}))

    def precommit_count(self, r: int, digest: Optional[Digest], clean_only: bool = False) -> int:
        pcs = self.precommits.get(r, {}).get(digest, {})
        if clean_only:
            return sum(1 for m in pcs.values() if not m.exclusions)
        return len(pcs)

    def precommit_any(self, r: int) -> int:
        return len({s for per in self.precommits.get(r, {}).values() for s in per})

    def endorsement_msgs(self, r: int, digest: Digest) -> List[Prevote]:
        return [m for per in self.endorsements.get(r, {}).get(digest, {}).values() for m in per]


@dataclass
class NodeState:
    h: int = 0
    round: int = 0
    step: Step = Step.PROPOSE
    decision: Dict[int, Value] = field(default_factory=dict)
    locked_value: Optional[Value] = None
    locked_round: int = -1
    valid_value: Optional[Value] = None
    valid_round: int = -1
    ref_value: Optional[Value] = None
    ref_round: int = -1
    msg_log: Dict[int, HeightLog] = field(default_factory=dict)
    sent_endorsement_rounds: Set[int] = field(default_factory=set)
    # "for the first time" guards and per-round bookkeeping
    prevote_timer_armed: Set[int] = field(default_factory=set)
    precommit_timer_armed: Set[int] = field(default_factory=set)
    lock_fired: Set[int] = field(default_factory=set)
    examined_seen: Set[Tuple[int, Digest]] = field(default_factory=set)
    advanced_from: Set[int] = field(default_factory=set)

    def reset_height(self):
        self.locked_value, self.locked_round = None, -1
        self.valid_value, self.valid_round = None, -1
        self.ref_value, self.ref_round = None, -1
        self.sent_endorsement_rounds = set()
        self.prevote_timer_armed = set()
        self.precommit_timer_armed = set()
        self.lock_fired = set()
        self.examined_seen = set()
        self.advanced_from = set()

    def fingerprint(self) -> tuple:
        dig = lambda v: None if v is None else v.digest
        return (self.h, self.round, int(self.step), tuple((h, v.digest) for h, v in sorted(self.decision.items())),
                dig(self.locked_value), self.locked_round, dig(self.valid_value), self.valid_round,
                dig(self.ref_value), self.ref_round, tuple(sorted(self.sent_endorsement_rounds)))


# -- the node -----------------------------------------------------------------

class Node:
    def __init__(self, node_id: NodeId, cfg: ProtocolConfig, genesis: Optional[WorldState] = None,
                 mempool: Sequence[Transaction] = (),
                 opinions: Optional[Mapping[TxId, EndorsementView]] = None,
                 oppose_insufficient: bool = False):
        if node_id not in cfg.cluster.node_ids:
            raise ConfigError(f"unknown node {node_id!r}")
        self.id = node_id
        self.cfg = cfg
        self.cluster = cfg.cluster
        self.q = quorum_size(cfg.cluster)
        self.f1 = removal_threshold(cfg.cluster)
        self.all_nodes = frozenset(cfg.cluster.node_ids)
        self.world = genesis or WorldState()
        self.mempool: List[Transaction] = list(mempool)
        self.gone: Set[TxId] = set()
        self.opinions = dict(opinions or {})
        self.oppose_insufficient = oppose_insufficient
        self.s = NodeState()
        self.stats = ExecStats()
        self._exec_cache: Dict[Tuple[TxId, ...], Tuple[list, DepDag]] = {}
        self._valid_cache: Dict[Digest, bool] = {}
        self._pol_cache: Dict[Digest, Dict[TxId, list]] = {}
        self._rec_cache: Dict[Tuple[int, Digest], Tuple[int, EndorsementRecord]] = {}
        self._out: List[Output] = []
        self._exec_mark = 0

    # ---- public transition API

    def start(self) -> List[Output]:
        self._begin()
        self._start_round(0)
        self._progress()
        return self._flush()

    def deliver(self, msg: Message) -> List[Output]:
        self._begin()
        if self._ingest(msg):
            self._progress()
        return self._flush()

    def on_timer(self, kind: TimerKind, height: int, round: int) -> List[Output]:
        self._begin()
        if kind is TimerKind.PROPOSE:
            self.on_timeout_propose(height, round)
        elif kind is TimerKind.PREVOTE:
            self.on_timeout_prevote(height, round)
        else:
            self.on_timeout_precommit(height, round)
        self._progress()
        return self._flush()

    # ---- plumbing

    def _begin(self):
        self._out = []
        self._exec_mark = self.stats.executed

    def _flush(self) -> List[Output]:
        out, self._out = self._out, []
        return out

    def _note(self, kind: str, **data):
        data.setdefault("h", self.s.h)
        self._out.append(Note(kind, data))

    def _compute(self) -> int:
        return (self.stats.executed - self._exec_mark) * self.cfg.exec_cost_per_tx

    def _send(self, msg: Message, extra: int = 0):
        self._out.append(Send(msg, self._compute() + extra))
        self._ingest(msg)

    def _log(self, h: Optional[int] = None) -> HeightLog:
        h = self.s.h if h is None else h
        log = self.s.msg_log.get(h)
        if log is None:
            log = self.s.msg_log[h] = HeightLog()
        return log

    def _ingest(self, m: Message) -> bool:
        if m.height < self.s.h:
            return False
        log = self._log(m.height)
        r = m.round
        if isinstance(m, Propose):
            if m.sender != self.cluster.proposer(m.height, r):
                return False
            if m.value is not None:
                if m.value.digest != m.digest:
                    return False
                log.values.setdefault(m.digest, m.value)
            log.proposals[r].setdefault(m.digest, m)
        elif isinstance(m, Prevote):
            if m.con:
                log.votes[r].setdefault(m.sender, set()).add(m.digest)
            if m.endorsements is not None:
                per = log.endorsements[r].setdefault(m.digest, {}).setdefault(m.sender, [])
                # at most two differing maps per endorser; a second one already
                # reads as endorsing everything, so further copies add nothing
                if len(per) < 2 and all(p.endorsements != m.endorsements for p in per):
                    per.append(m)
                    log.version[(r, m.digest)] += 1
        else:
            log.precommits[r].setdefault(m.digest, {}).setdefault(m.sender, m)
        log.senders[r].add(m.sender)
        return True

    # ---- values, execution, validity

    def _execute(self, txs: Sequence[Transaction]) -> Tuple[list, DepDag]:
        key = tuple(t.txid for t in txs)
        hit = self._exec_cache.get(key)
        if hit is None:
            hit = self._exec_cache[key] = execute_block(self.world, txs, self.stats)
        return hit

    def value_of(self, p: Propose) -> Optional[Value]:
        log = self._log(p.height)
        v = log.values.get(p.digest)
        if v is not None or p.value is not None or p.digest in log.bad_values:
            return v
        ref = log.values.get(p.ref_digest) if p.ref_digest else None
        if ref is None:
            return None
        if not set(p.removed) <= set(ref.txids):
            log.bad_values.add(p.digest)
            return None
        v = self._derive(ref, p.removed)
        if v.digest != p.digest:
            log.bad_values.add(p.digest)
            return None
        log.values[v.digest] = v
        return v

    def _derive(self, ref: Value, removed: Iterable[TxId]) -> Value:
        removed = set(removed)
        if not removed:
            return ref
        if self.cfg.eov:
            kept = tuple(t for t in ref.txs if t.txid not in removed)
            return Value(kept, snapshot_execute(self.world, kept, self.stats), self.s.h)
        dag = self._exec_cache.get(ref.txids, (None, None))[1] or build_dag(ref.txs)
        results, new_dag = reexecute_after_removal(self.world, ref.txs, removed, ref.exec_results, dag,
                                                   self.cfg.dependency_reexec, self.stats)
        kept = tuple(t for t in ref.txs if t.txid not in removed)
        self._exec_cache.setdefault(tuple(t.txid for t in kept), (results, new_dag))
        return Value(kept, results, self.s.h)

    def valid(self, v: Value) -> bool:
        ok = self._valid_cache.get(v.digest)
        if ok is None:
            ids = v.txids
            if len(set(ids)) != len(ids) or any(t in self.gone for t in ids):
                ok = False
            elif self.cfg.eov:
                ok = True
            else:
                results, _ = self._execute(v.txs)
                ok = tuple(results) == v.exec_results
            self._valid_cache[v.digest] = ok
        return ok

    def policies(self, v: Value) -> Dict[TxId, list]:
        pol = self._pol_cache.get(v.digest)
        if pol is None:
            pol = self._pol_cache[v.digest] = {
                tx.txid: [b.policy for b in applicable_bindings(tx, r, self.cfg.bindings)]
                for tx, r in zip(v.txs, v.exec_results or [None] * len(v.txs))}
        return pol

    def endorsement_views(self, v: Value) -> Tuple[Tuple[TxId, EndorsementView], ...]:
        views = []
        pols = self.policies(v)
        for tx, res in zip(v.txs, v.exec_results):
            if self.id not in endorsers_of(pols[tx.txid], self.cfg.default_policy):
                continue
            view = self.opinions.get(tx.txid)
            if view is None:
                if self.oppose_insufficient and res.status.value == "insufficient":
                    view = EndorsementView.OPPOSE_RESULT
                else:
                    view = EndorsementView.ENDORSE
            views.append((tx.txid, view))
        return tuple(views)

    def is_designated(self, v: Value) -> bool:
        pols = self.policies(v)
        return any(self.id in endorsers_of(pols[t], self.cfg.default_policy) for t in v.txids)

    # ---- endorsement and removal helpers

    def record(self, r: int, v: Value, h: Optional[int] = None) -> EndorsementRecord:
        log = self._log(h)
        key = (r, v.digest)
        ver = log.version.get(key, 0)
        hit = self._rec_cache.get(key)
        if hit is None or hit[0] != ver or hit[1] is None:
            rec = aggregate_prevotes(log.endorsement_msgs(r, v.digest), v.txids)
            self._rec_cache[key] = hit = (ver, rec)
        return hit[1]

    def statuses(self, r: int, v: Value) -> Dict[TxId, TxStatus]:
        return mutual_exclusion_check(self.record(r, v), self.policies(v), self.cfg.default_policy,
                                      self.all_nodes)

    def verify_endorsement(self, r: int, v: Value) -> bool:
        if self.cfg.eov:
            return True
        if r < 0:
            return False
        rec = self.record(r, v)
        pols = self.policies(v)
        return all(is_properly_endorsed(pols[t], self.cfg.default_policy, rec.endorsers(t)) for t in v.txids)

    def get_excluded_tx(self, r: int, v: Value) -> Tuple[Tuple[TxId, ExclusionKind], ...]:
        rec = self.record(r, v)
        pols = self.policies(v)
        out = []
        for tx, res in zip(v.txs, v.exec_results):
            t = tx.txid
            if is_properly_endorsed(pols[t], self.cfg.default_policy, rec.endorsers(t)):
                continue
            if is_vetoed(pols[t], self.cfg.default_policy, rec.opposers(t), self.all_nodes):
                always = is_vetoed(pols[t], self.cfg.default_policy, rec.opposers(t, always_only=True),
                                   self.all_nodes)
            else:
                # timed out: a context-free binding will be invoked again whatever precedes tx
                bound = applicable_bindings(tx, res, self.cfg.bindings)
                unmet = [b for b in bound if not b.policy.satisfied(rec.endorsers(t))]
                always = bool(unmet) and all(b.trigger.context_free for b in unmet)
            out.append((t, ExclusionKind.REMOVE_ALWAYS if always else ExclusionKind.REMOVE_IF_FIRST))
        return tuple(out)

    def removable(self, r: int, v: Value, h: Optional[int] = None) -> Tuple[Dict[TxId, int], Set[TxId]]:
        """Exclusion backing per tx in round-r precommits for v, and the
        subset removable irrespective of preceding transactions."""
        pcs = self._log(h).precommits.get(r, {}).get(v.digest, {})
        any_count: Dict[TxId, int] = defaultdict(int)
        always_count: Dict[TxId, int] = defaultdict(int)
        for m in pcs.values():
            for t, kind in m.exclusions:
                any_count[t] += 1
                if kind is ExclusionKind.REMOVE_ALWAYS:
                    always_count[t] += 1
        backed = {t: c for t, c in any_count.items() if c >= self.f1}
        always = {t for t, c in always_count.items() if c >= self.f1}
        return backed, always

    def extract_removals(self, r: int, v: Value) -> Tuple[TxId, ...]:
        backed, always = self.removable(r, v)
        drop = set(always)
        for t in v.txids:
            if t in backed and t not in always:
                drop.add(t)
                break
        return tuple(t for t in v.txids if t in drop)

    def extract(self, r: int, v: Value) -> Value:
        return self._derive(v, self.extract_removals(r, v))

    def _examined_candidates(self, r: int, ref_digest: Optional[Digest]):
        log = self._log()
        for d, p in log.proposals.get(r, {}).items():
            if p.vr != -1 or (ref_digest is not None and d != ref_digest):
                continue
            if log.precommit_count(r, d) < self.q:
                continue
            ref = self.value_of(p)
            if ref is not None:
                yield ref

    def verify_reference(self, r: int, v: Value, ref_digest: Optional[Digest] = None) -> bool:
        if r < 0:
            return False
        for ref in self._examined_candidates(r, ref_digest):
            if not subsequence(v.txids, ref.txids):
                continue
            dropped = [t for t in ref.txids if t not in set(v.txids)]
            backed, always = self.removable(r, ref)
            if not all(t in backed for t in dropped):
                continue
            ok = True
            if any(t not in always for t in dropped):
                st = self.statuses(r, ref)
                dropped_set = set(dropped)
                for i, t in enumerate(ref.txids):
                    if t in dropped_set and t not in always:
                        # the if-first drop must be the first removable one
                        for prev in ref.txids[:i]:
                            if prev in dropped_set and prev in always:
                                continue
                            if st[prev] is not TxStatus.ENDORSED:
                                ok = False
                                break
                    if not ok:
                        break
            if ok:
                return True
        return False

    # ---- round start and timeouts

    def _fresh_value(self) -> Value:
        txs = []
        for tx in self.mempool:
            if tx.txid in self.gone:
                continue
            txs.append(tx)
            if len(txs) >= self.cfg.batch:
                break
        if self.cfg.eov:
            return Value(tuple(txs), snapshot_execute(self.world, txs, self.stats), self.s.h)
        results, _ = self._execute(txs)
        return Value(tuple(txs), tuple(results), self.s.h)

    def _start_round(self, r: int):
        s = self.s
        s.round, s.step = r, Step.PROPOSE
        self._note("PHASE", event="round", r=r)
        if self.cluster.proposer(s.h, r) != self.id:
            self._out.append(SetTimer(TimerKind.PROPOSE, s.h, r, self.cfg.timers.timeout(TimerKind.PROPOSE, r)))
            return
        sign = 0
        if s.valid_value is not None:
            v = s.valid_value
            prop = Propose(s.h, r, self.id, v.digest, s.valid_round, s.ref_round, v)
        elif s.ref_value is not None:
            removed = self.extract_removals(s.ref_round, s.ref_value)
            v = self._derive(s.ref_value, removed)
            self._log().values.setdefault(v.digest, v)
            self._note_removals(s.ref_round, s.ref_value, removed, r)
            if self.cfg.hash_only_reproposal:
                prop = Propose(s.h, r, self.id, v.digest, -1, s.ref_round, None, s.ref_value.digest, removed)
            else:
                prop = Propose(s.h, r, self.id, v.digest, -1, s.ref_round, v, s.ref_value.digest, removed)
        else:
            v = self._fresh_value()
            prop = Propose(s.h, r, self.id, v.digest, -1, -1, v)
            if self.cfg.eov:
                sign = len(v) * self.cfg.sign_cost_per_tx
        self._log().values.setdefault(v.digest, v)
        self._note("PHASE", event="propose", r=r, digest=v.digest[:12], txs=list(v.txids),
                   status=[x.status.value for x in v.exec_results], vr=prop.vr, rr=prop.rr)
        self._send(prop, sign)

    def _note_removals(self, ref_round: int, ref: Value, removed: Sequence[TxId], new_round: int):
        if not removed:
            return
        st = self.statuses(ref_round, ref)
        for t in removed:
            cause = "veto" if st.get(t) is TxStatus.VETOED else "timeout"
            self._note("REMOVE", r=ref_round, txid=t, cause=cause, proposal_round=new_round)

    def on_timeout_propose(self, height: int, round: int):
        s = self.s
        if height == s.h and round == s.round and s.step is Step.PROPOSE:
            self._note("PHASE", event="timeout", timer="propose", r=round)
            self._prevote(None)

    def on_timeout_prevote(self, height: int, round: int):
        s = self.s
        if not (height == s.h and round == s.round and s.step is Step.PREVOTE):
            return
        self._note("PHASE", event="timeout", timer="prevote", r=round)
        log = self._log()
        if not self.cfg.eov:
            for d, p in log.proposals.get(round, {}).items():
                if p.vr != -1 or log.prevote_count(round, d) < self.q:
                    continue
                v = self.value_of(p)
                if v is None or not self.valid(v):
                    continue
                self._precommit(d, self.get_excluded_tx(round, v))
                return
        self._precommit(None)

    def on_timeout_precommit(self, height: int, round: int):
        s = self.s
        if height == s.h and round == s.round:
            self._note("PHASE", event="timeout", timer="precommit", r=round)
            self._start_round(round + 1)

    # ---- emit helpers

    def _prevote(self, digest, endorsements=None, con=True):
        s = self.s
        self._send(Prevote(s.h, s.round, self.id, digest, endorsements, con))
        if con:
            s.step = Step.PREVOTE

    def _precommit(self, digest, exclusions=()):
        s = self.s
        self._send(Precommit(s.h, s.round, self.id, digest, tuple(exclusions)))
        s.step = Step.PRECOMMIT

    # ---- upon-clauses

    def _progress(self):
        rules = (self._rule_commit, self._rule_quorum_precommits, self._rule_round_skip,
                 self._rule_conflicting, self._rule_propose, self._rule_prevote_timer,
                 self._rule_valid_update, self._rule_lock, self._rule_rapid_removal,
                 self._rule_nil_prevotes, self._rule_precommit_timer, self._rule_endorse_only)
        fired = True
        while fired:
            fired = False
            for rule in rules:
                if rule():
                    fired = True
                    break

    def _proposals(self, r: int):
        return list(self._log().proposals.get(r, {}).values())

    def _rule_commit(self) -> bool:
        log = self._log()
        for r in sorted(log.proposals):
            for d, p in log.proposals[r].items():
                if log.precommit_count(r, d, clean_only=True) < self.q:
                    continue
                v = self.value_of(p)
                if v is not None and self.valid(v):
                    self._commit(r, p, v)
                    return True
        return False

    def _commit(self, r: int, p: Propose, v: Value):
        s = self.s
        h = s.h
        s.decision[h] = v
        log = self._log()
        if self.cfg.eov:
            from .eovsim import eov_validate
            rec = eov_validate(v, h)
            committed = [res for res in v.exec_results if res.txid in set(rec.committed_txids)]
            self.world = apply_committed(self.world, committed, h)
            self._note("ABORT", r=r, aborted=list(rec.aborted_txids), committed=list(rec.committed_txids))
            self.gone.update(rec.committed_txids)
            aborted = [t for t in v.txs if t.txid in set(rec.aborted_txids)]
            # aborted txs leave every mempool; only the next primary requeues them
            ordered = set(v.txids)
            self.mempool = [t for t in self.mempool if t.txid not in ordered]
        else:
            self.world = apply_committed(self.world, v.exec_results, h)
            self.gone.update(v.txids)
            # txs dropped from examined values at this height leave the mempool
            for rr, props in log.proposals.items():
                for d, pp in props.items():
                    if pp.vr == -1 and (rr, d) in s.examined_seen and d in log.values:
                        self.gone.update(log.values[d].txids)
            aborted = []
        self._note("DECIDE", r=r, digest=v.digest[:12], txs=list(v.txids), rr=p.rr, vr=p.vr,
                   status=[x.status.value for x in v.exec_results])
        self.mempool = [t for t in self.mempool if t.txid not in self.gone]
        if aborted and self.cluster.proposer(h + 1, 0) == self.id:
            self.mempool = aborted + self.mempool
        s.reset_height()
        del s.msg_log[h]
        self._exec_cache.clear()
        self._valid_cache.clear()
        self._pol_cache.clear()
        self._rec_cache.clear()
        s.h = h + 1
        self._start_round(0)

    def _rule_quorum_precommits(self) -> bool:
        """2f+1 precommits for a proposed value: the examined clause and
        the round advance."""
        s, log = self.s, self._log()
        for r in sorted(log.proposals):
            for d, p in log.proposals[r].items():
                if log.precommit_count(r, d) < self.q:
                    continue
                did = False
                if p.vr == -1 and (r, d) not in s.examined_seen:
                    v = self.value_of(p)
                    if v is not None:
                        s.examined_seen.add((r, d))
                        self._note("PHASE", event="examined", r=r, digest=d[:12], txs=list(v.txids))
                        if s.ref_round == -1 or (s.valid_round == -1 and len(v) < len(s.ref_value)):
                            s.ref_round, s.ref_value = r, v
                            self._note("PHASE", event="ref", r=r, txs=list(v.txids))
                        did = True
                if s.round == r and r not in s.advanced_from:
                    s.advanced_from.add(r)
                    self._start_round(r + 1)
                    return True
                if did:
                    return True
        return False

    def _rule_round_skip(self) -> bool:
        s, log = self.s, self._log()
        ahead = [r for r, snd in log.senders.items() if r > s.round and len(snd) >= self.f1]
        if ahead:
            self._start_round(max(ahead))
            return True
        return False

    def _rule_conflicting(self) -> bool:
        s = self.s
        if s.step < Step.PRECOMMIT and len(self._log().proposals.get(s.round, {})) >= 2:
            self._note("PHASE", event="conflict", r=s.round)
            self._precommit(None)
            return True
        return False

    def _rule_propose(self) -> bool:
        s = self.s
        if s.step is not Step.PROPOSE:
            return False
        props = self._proposals(s.round)
        if not props:
            return False
        p = props[0]
        v = self.value_of(p)
        if v is None:
            return False
        if p.vr == -1:
            return self.on_propose_new(p, v)
        return self.on_propose_requeued(p, v)

    def on_propose_new(self, p: Propose, v: Value) -> bool:
        s = self.s
        if p.rr == -1:
            gate = s.ref_round == -1
            if not gate:
                # can never pass at this height: refRound only resets on commit
                self._prevote(None)
                return True
        elif not self.verify_reference(p.rr, v, p.ref_digest):
            return False
        if self.valid(v) and (s.locked_round == -1 or s.locked_value.digest == v.digest):
            if self.cfg.eov:
                self._prevote(v.digest, None)
            else:
                s.sent_endorsement_rounds.add(s.round)
                self._prevote(v.digest, self.endorsement_views(v))
        else:
            self._prevote(None)
        return True

    def on_propose_requeued(self, p: Propose, v: Value) -> bool:
        s, log = self.s, self._log()
        if not (0 <= p.vr < s.round):
            return False
        if log.prevote_count(p.vr, v.digest) < self.q or not self.verify_endorsement(p.rr, v):
            return False
        if self.valid(v) and (s.locked_round <= p.vr or s.locked_value.digest == v.digest):
            self._prevote(v.digest, None)
        else:
            self._prevote(None)
        return True

    def _rule_prevote_timer(self) -> bool:
        s = self.s
        if (s.step is Step.PREVOTE and s.round not in s.prevote_timer_armed
                and self._log().prevote_any(s.round) >= self.q):
            s.prevote_timer_armed.add(s.round)
            self._out.append(SetTimer(TimerKind.PREVOTE, s.h, s.round,
                                      self.cfg.timers.timeout(TimerKind.PREVOTE, s.round)))
            return True
        return False

    def _rule_valid_update(self) -> bool:
        s, log = self.s, self._log()
        for r in sorted(log.proposals):
            if r <= s.valid_round:
                continue
            for d, p in log.proposals[r].items():
                if log.prevote_count(r, d) < self.q:
                    continue
                v = self.value_of(p)
                if v is None or not self.valid(v):
                    continue
                here = self.verify_endorsement(r, v)
                if here or (p.rr >= 0 and self.verify_endorsement(p.rr, v)):
                    s.valid_value, s.valid_round = v, r
                    s.ref_round = r if here else p.rr
                    self._note("PHASE", event="valid", r=r, ref=s.ref_round, digest=d[:12])
                    return True
        return False

    def _rule_lock(self) -> bool:
        s, log = self.s, self._log()
        if s.step is not Step.PREVOTE or s.round in s.lock_fired:
            return False
        for d, p in log.proposals.get(s.round, {}).items():
            if log.prevote_count(s.round, d) < self.q:
                continue
            v = self.value_of(p)
            if v is None or not self.valid(v):
                continue
            if self.verify_endorsement(s.round, v) or (p.rr >= 0 and self.verify_endorsement(p.rr, v)):
                s.lock_fired.add(s.round)
                s.locked_value, s.locked_round = v, s.round
                self._note("PHASE", event="lock", r=s.round, digest=d[:12])
                self._precommit(d)
                return True
        return False

    def _rule_rapid_removal(self) -> bool:
        s, log = self.s, self._log()
        if self.cfg.eov or s.step is not Step.PREVOTE:
            return False
        for d, p in log.proposals.get(s.round, {}).items():
            if p.vr != -1 or log.prevote_count(s.round, d) < self.q:
                continue
            v = self.value_of(p)
            if v is None or not self.valid(v):
                continue
            st = self.statuses(s.round, v)
            if any(x is TxStatus.PENDING for x in st.values()):
                continue
            if not any(x is TxStatus.VETOED for x in st.values()):
                continue
            self._note("PHASE", event="rapid", r=s.round, digest=d[:12])
            self._precommit(d, self.get_excluded_tx(s.round, v))
            return True
        return False

    def _rule_nil_prevotes(self) -> bool:
        s = self.s
        if s.step is Step.PREVOTE and self._log().prevote_count(s.round, None) >= self.q:
            self._precommit(None)
            return True
        return False

    def _rule_precommit_timer(self) -> bool:
        s = self.s
        if s.round not in s.precommit_timer_armed and self._log().precommit_any(s.round) >= self.q:
            s.precommit_timer_armed.add(s.round)
            self._out.append(SetTimer(TimerKind.PRECOMMIT, s.h, s.round,
                                      self.cfg.timers.timeout(TimerKind.PRECOMMIT, s.round)))
            return True
        return False

    def _rule_endorse_only(self) -> bool:
        """Endorsers always publish their views, even after a nil prevote or
        while locked elsewhere; such prevotes carry con=false."""
        s, log = self.s, self._log()
        if self.cfg.eov:
            return False
        for r in sorted(log.proposals):
            if r in s.sent_endorsement_rounds:
                continue
            first = next(iter(log.proposals[r].values()))
            if first.vr != -1:
                continue
            v = self.value_of(first)
            if v is None or not self.valid(v) or not self.is_designated(v):
                continue
            s.sent_endorsement_rounds.add(r)
            msg = Prevote(s.h, r, self.id, v.digest, self.endorsement_views(v), con=False)
            self._send(msg)
            return True
        return False
