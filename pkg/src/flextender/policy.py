"""Endorsement policies: monotone expressions over node sets, triggers, and
aggregation of the endorsement views carried by prevotes."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

from .core_types import ConfigError, ExecResult, ExecStatus, NodeId, Transaction, TxId


class PolicyExpr:
    """Base class of the policy tree. Subclasses are frozen dataclasses."""

    def satisfied(self, endorsers: FrozenSet[NodeId]) -> bool:
        raise NotImplementedError

    def members(self) -> FrozenSet[NodeId]:
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Leaf(PolicyExpr):
    node: NodeId

    def satisfied(self, endorsers):
        return self.node in endorsers

    def members(self):
        return frozenset((self.node,))

    def to_json(self):
        return {"node": self.node}


@dataclass(frozen=True)
class And(PolicyExpr):
    children: Tuple[PolicyExpr, ...]

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if not self.children:
            raise ConfigError("AND needs at least one child")

    def satisfied(self, endorsers):
        return all(c.satisfied(endorsers) for c in self.children)

    def members(self):
        return frozenset().union(*(c.members() for c in self.children))

    def to_json(self):
        return {"and": [c.to_json() for c in self.children]}


@dataclass(frozen=True)
class Or(PolicyExpr):
    children: Tuple[PolicyExpr, ...]

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if not self.children:
            raise ConfigError("OR needs at least one child")

    def satisfied(self, endorsers):
        return any(c.satisfied(endorsers) for c in self.children)

    def members(self):
        return frozenset().union(*(c.members() for c in self.children))

    def to_json(self):
        return {"or": [c.to_json() for c in self.children]}


@dataclass(frozen=True)
class Threshold(PolicyExpr):
    t: int
    children: Tuple[PolicyExpr, ...]

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if not 1 <= self.t <= len(self.children):
            raise ConfigError(f"threshold t={self.t} outside 1..{len(self.children)}")

    def satisfied(self, endorsers):
        hits = 0
        for c in self.children:
            if c.satisfied(endorsers):
                hits += 1
                if hits >= self.t:
                    return True
        return False

    def members(self):
        return frozenset().union(*(c.members() for c in self.children))

    def to_json(self):
        return {"threshold": {"t": self.t, "of": [c.to_json() for c in self.children]}}


def threshold_of(t: int, nodes: Iterable[NodeId]) -> Threshold:
    return Threshold(t, tuple(Leaf(n) for n in nodes))


def parse_policy(obj) -> PolicyExpr:
    if not isinstance(obj, dict) or len(obj) != 1:
        raise ConfigError(f"policy must be an object with exactly one key, got {obj!r}")
    (key, body), = obj.items()
    if key == "node":
        return Leaf(str(body))
    if key in ("and", "or"):
        if not isinstance(body, list):
            raise ConfigError(f"'{key}' expects a list")
        children = tuple(parse_policy(c) for c in body)
        return And(children) if key == "and" else Or(children)
    if key == "threshold":
        if not isinstance(body, dict) or "t" not in body or "of" not in body:
            raise ConfigError("'threshold' expects {\"t\": k, \"of\": [...]}")
        return Threshold(int(body["t"]), tuple(parse_policy(c) for c in body["of"]))
    raise ConfigError(f"unknown policy operator {key!r}")


# -- triggers ---------------------------------------------------------------

class TriggerKind(str, enum.Enum):
    ALWAYS = "always"
    AMOUNT_EXCEEDS = "amount_exceeds"
    CUSTOM = "custom"


# Named predicates usable from scenario files. They see the result, so the
# bindings using them are execution-context dependent.
CUSTOM_PREDICATES: Dict[str, Callable[[Transaction, Optional[ExecResult]], bool]] = {
    "insufficient": lambda tx, res: res is not None and res.status is ExecStatus.INSUFFICIENT,
    "ok": lambda tx, res: res is not None and res.status is ExecStatus.OK,
}


@dataclass(frozen=True)
class Trigger:
    kind: TriggerKind = TriggerKind.ALWAYS
    limit: int = 0
    name: str = ""

    def holds(self, tx: Transaction, result: Optional[ExecResult]) -> bool:
        if self.kind is TriggerKind.ALWAYS:
            return True
        if self.kind is TriggerKind.AMOUNT_EXCEEDS:
            return tx.amount > self.limit
        return CUSTOM_PREDICATES[self.name](tx, result)

    @property
    def context_free(self) -> bool:
        """True when the trigger depends only on the transaction itself."""
        return self.kind is not TriggerKind.CUSTOM

    def to_json(self):
        if self.kind is TriggerKind.ALWAYS:
            return "always"
        if self.kind is TriggerKind.AMOUNT_EXCEEDS:
            return {"amount_exceeds": self.limit}
        return {"custom": self.name}


def parse_trigger(obj) -> Trigger:
    if obj is None or obj == "always":
        return Trigger()
    if isinstance(obj, dict) and len(obj) == 1:
        (key, body), = obj.items()
        if key == "amount_exceeds":
            return Trigger(TriggerKind.AMOUNT_EXCEEDS, limit=int(body))
        if key == "custom":
            if body not in CUSTOM_PREDICATES:
                raise ConfigError(f"unknown custom trigger {body!r}")
            return Trigger(TriggerKind.CUSTOM, name=str(body))
    raise ConfigError(f"invalid trigger {obj!r}")


@dataclass(frozen=True)
class PolicyBinding:
    target: str
    policy: PolicyExpr
    trigger: Trigger = Trigger()

    def matches(self, tx: Transaction) -> bool:
        return self.target == "*" or self.target in (tx.src, tx.dst)

    def to_json(self):
        return {"target": self.target, "policy": self.policy.to_json(),
                "trigger": self.trigger.to_json()}

    @classmethod
    def from_json(cls, d) -> "PolicyBinding":
        if not isinstance(d, dict) or "target" not in d or "policy" not in d:
            raise ConfigError(f"binding needs 'target' and 'policy': {d!r}")
        return cls(str(d["target"]), parse_policy(d["policy"]), parse_trigger(d.get("trigger")))


def applicable_bindings(tx: Transaction, result: Optional[ExecResult],
                        bindings: Sequence[PolicyBinding]) -> List[PolicyBinding]:
    return [b for b in bindings if b.matches(tx) and b.trigger.holds(tx, result)]


def applicable_policies(tx: Transaction, result: Optional[ExecResult],
                        bindings: Sequence[PolicyBinding]) -> List[PolicyExpr]:
    """Policies of the bindings triggered by ``tx``; empty means the default applies."""
    return [b.policy for b in applicable_bindings(tx, result, bindings)]


def _effective(policies: Sequence[PolicyExpr], default_policy: PolicyExpr) -> Sequence[PolicyExpr]:
    return policies if policies else (default_policy,)


def is_properly_endorsed(policies: Sequence[PolicyExpr], default_policy: PolicyExpr,
                         endorsers: Iterable[NodeId]) -> bool:
    endorsers = frozenset(endorsers)
    return all(p.satisfied(endorsers) for p in _effective(policies, default_policy))


def is_vetoed(policies: Sequence[PolicyExpr], default_policy: PolicyExpr,
              opposers: Iterable[NodeId], all_nodes: Iterable[NodeId]) -> bool:
    # by monotonicity, a policy is unsatisfiable by every subset of the
    # remaining nodes iff the remaining set itself fails it
    remaining = frozenset(all_nodes) - frozenset(opposers)
    return any(not p.satisfied(remaining) for p in _effective(policies, default_policy))


def endorsers_of(policies: Sequence[PolicyExpr], default_policy: PolicyExpr) -> FrozenSet[NodeId]:
    return frozenset().union(*(p.members() for p in _effective(policies, default_policy)))


# -- endorsement views and aggregation ---------------------------------------

class EndorsementView(str, enum.Enum):
    ENDORSE = "endorse"
    OPPOSE_RESULT = "oppose_result"
    OPPOSE_ALWAYS = "oppose_always"


class TxStatus(str, enum.Enum):
    ENDORSED = "endorsed"
    VETOED = "vetoed"
    PENDING = "pending"


EndorsementMap = Tuple[Tuple[TxId, EndorsementView], ...]


@dataclass(frozen=True)
class EndorsementRecord:
    """Per-tx views, ``views[txid][endorser]``, for one (round, digest)."""
    views: Mapping[TxId, Mapping[NodeId, EndorsementView]]

    def endorsers(self, txid: TxId) -> FrozenSet[NodeId]:
        return frozenset(n for n, v in self.views.get(txid, {}).items()
                         if v is EndorsementView.ENDORSE)

    def opposers(self, txid: TxId, *, always_only: bool = False) -> FrozenSet[NodeId]:
        wanted = ((EndorsementView.OPPOSE_ALWAYS,) if always_only else
                  (EndorsementView.OPPOSE_RESULT, EndorsementView.OPPOSE_ALWAYS))
        return frozenset(n for n, v in self.views.get(txid, {}).items() if v in wanted)


def aggregate_prevotes(msgs, txids: Optional[Sequence[TxId]] = None) -> EndorsementRecord:
    """Merge the endorsement maps of prevotes sharing (height, round, digest).

    ``msgs`` are objects with ``sender`` and ``endorsements`` attributes (a
    mapping-like tuple of pairs, or None). An endorser that issued two
    differing maps is read as endorsing every transaction in the value.
    """
    per_sender: Dict[NodeId, set] = {}
    for m in msgs:
        if m.endorsements is None:
            continue
        per_sender.setdefault(m.sender, set()).add(tuple(sorted(m.endorsements)))
    if txids is None:
        txids = sorted({t for maps in per_sender.values() for mp in maps for t, _ in mp})
    views: Dict[TxId, Dict[NodeId, EndorsementView]] = {t: {} for t in txids}
    for sender, maps in per_sender.items():
        if len(maps) > 1:
            for t in txids:
                views[t][sender] = EndorsementView.ENDORSE
            continue
        (mp,) = maps
        for t, view in mp:
            if t in views:
                views[t][sender] = EndorsementView(view)
    return EndorsementRecord(views)


def mutual_exclusion_check(record: EndorsementRecord, policies_by_tx: Mapping[TxId, Sequence[PolicyExpr]],
                           default_policy: PolicyExpr, all_nodes: Iterable[NodeId]) -> Dict[TxId, TxStatus]:
    """Classify each tx. ENDORSED wins when malicious views make both hold."""
    all_nodes = frozenset(all_nodes)
    out = {}
    for txid, pols in policies_by_tx.items():
        if is_properly_endorsed(pols, default_policy, record.endorsers(txid)):
            out[txid] = TxStatus.ENDORSED
        elif is_vetoed(pols, default_policy, record.opposers(txid), all_nodes):
            out[txid] = TxStatus.VETOED
        else:
            out[txid] = TxStatus.PENDING
    return out
