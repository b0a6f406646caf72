"""Byzantine behaviours.

A byzantine node runs an ordinary :class:`~flextender.consensus.Node`; its
outgoing messages pass through a chain of strategies before reaching the
network. The adversary sees every timer deadline the scheduler knows about
but cannot forge messages from correct nodes.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

from .consensus import Precommit, Prevote, Propose, Send, TimerKind
from .core_types import ConfigError, NodeId, TxId, Value
from .policy import EndorsementView


class StrategyKind(str, enum.Enum):
    CRASH = "crash"
    SILENT = "silent"
    WITHHOLD_ENDORSEMENT = "withhold_endorsement"
    LAST_MOMENT_ENDORSEMENT = "last_moment_endorsement"
    UNEVEN_ENDORSEMENT = "uneven_endorsement"
    EQUIVOCATE_PROPOSALS = "equivocate_proposals"
    WITHHOLD_PROPOSAL_FROM = "withhold_proposal_from"
    DUPLICATE_PREVOTE_DIFFERING = "duplicate_prevote_differing"
    # proposer drops the listed txids from proposals it builds on a reference
    CENSOR_PROPOSAL = "censor_proposal"


@dataclass(frozen=True)
class AdversaryStrategy:
    kind: StrategyKind
    at: int = 0                                   # CRASH
    txids: Tuple[TxId, ...] = ()                  # WITHHOLD_ENDORSEMENT / CENSOR_PROPOSAL (empty = all)
    count: int = 0                                # LAST_MOMENT_ENDORSEMENT target correct count
    nodes: Tuple[NodeId, ...] = ()                # WITHHOLD_PROPOSAL_FROM / UNEVEN_ENDORSEMENT split

    @classmethod
    def from_json(cls, d) -> "AdversaryStrategy":
        if isinstance(d, str):
            d = {"kind": d}
        if not isinstance(d, dict) or "kind" not in d:
            raise ConfigError(f"strategy needs a 'kind': {d!r}")
        try:
            kind = StrategyKind(d["kind"])
        except ValueError:
            raise ConfigError(f"unknown adversary strategy {d['kind']!r}") from None
        extra = set(d) - {"kind", "at", "txids", "count", "nodes"}
        if extra:
            raise ConfigError(f"unexpected strategy fields {sorted(extra)}")
        return cls(kind, int(d.get("at", 0)), tuple(d.get("txids", ())), int(d.get("count", 0)),
                   tuple(d.get("nodes", ())))

    def to_json(self) -> dict:
        d = {"kind": self.kind.value}
        if self.kind is StrategyKind.CRASH:
            d["at"] = self.at
        if self.txids:
            d["txids"] = list(self.txids)
        if self.count:
            d["count"] = self.count
        if self.nodes:
            d["nodes"] = list(self.nodes)
        return d


@dataclass
class Outgoing:
    msg: object
    depart: int
    targets: Optional[List[NodeId]] = None
    arrive_at: Optional[Dict[NodeId, int]] = None


def _strip(prevote: Prevote, txids) -> Prevote:
    if prevote.endorsements is None:
        return prevote
    kept = tuple((t, v) for t, v in prevote.endorsements if txids and t not in txids)
    return replace(prevote, endorsements=kept)


class Adversary:
    """Composes the strategies assigned to one byzantine node."""

    def __init__(self, strategies: Sequence[AdversaryStrategy]):
        self.strategies = list(strategies)
        self.kinds = {s.kind for s in self.strategies}
        self.node = None
        self._held: List[Prevote] = []

    def _get(self, kind: StrategyKind) -> Optional[AdversaryStrategy]:
        return next((s for s in self.strategies if s.kind is kind), None)

    def attach(self, sim, node_id: NodeId) -> None:
        self.node = sim.nodes[node_id]
        crash = self._get(StrategyKind.CRASH)
        if crash is not None:
            from .netsim import EventKind
            sim._push(crash.at, EventKind.NODE_CRASH, (node_id,))
        censor = self._get(StrategyKind.CENSOR_PROPOSAL)
        if censor is not None:
            self._install_censor(censor)

    def _install_censor(self, strat: AdversaryStrategy) -> None:
        node = self.node
        honest = node.extract_removals

        def extract_removals(r, v):
            dropped = set(honest(r, v))
            dropped.update(t for t in v.txids if not strat.txids or t in strat.txids)
            return tuple(t for t in v.txids if t in dropped)
        node.extract_removals = extract_removals

    # ---- output path

    def outgoing(self, sim, node_id: NodeId, sends: Sequence[Send]) -> None:
        if StrategyKind.SILENT in self.kinds:
            return
        outs = [Outgoing(s.msg, sim.now + s.compute) for s in sends]
        for strat in self.strategies:
            fn = getattr(self, "_" + strat.kind.value, None)
            if fn is not None:
                outs = fn(sim, node_id, strat, outs)
        for o in outs:
            sim.gossip_send(o.msg, node_id, o.depart, o.targets, o.arrive_at)

    def _withhold_endorsement(self, sim, me, strat, outs):
        res = []
        for o in outs:
            if isinstance(o.msg, Prevote) and o.msg.endorsements is not None:
                o.msg = _strip(o.msg, set(strat.txids))
            res.append(o)
        return res

    def _duplicate_prevote_differing(self, sim, me, strat, outs):
        res = []
        for o in outs:
            res.append(o)
            m = o.msg
            if isinstance(m, Prevote) and m.endorsements:
                flipped = tuple((t, EndorsementView.OPPOSE_RESULT if i == 0 else v)
                                for i, (t, v) in enumerate(m.endorsements))
                if flipped == m.endorsements:
                    flipped = m.endorsements[1:]
                res.append(Outgoing(replace(m, endorsements=flipped), o.depart))
        return res

    def _uneven_endorsement(self, sim, me, strat, outs):
        res = []
        others = [n for n in sim.ids if n != me]
        half = list(strat.nodes) or others[: len(others) // 2]
        rest = [n for n in others if n not in half]
        for o in outs:
            m = o.msg
            if isinstance(m, Prevote) and m.endorsements and len(m.endorsements) > 1:
                k = len(m.endorsements) // 2
                a = replace(m, endorsements=m.endorsements[:k])
                b = replace(m, endorsements=m.endorsements[k:])
                res.append(Outgoing(a, o.depart, half))
                res.append(Outgoing(b, o.depart, rest))
            else:
                res.append(o)
        return res

    def _equivocate_proposals(self, sim, me, strat, outs):
        res = []
        node = self.node
        for o in outs:
            m = o.msg
            if isinstance(m, Propose) and m.value is not None and len(m.value) > 0 and m.vr == -1:
                txs = m.value.txs[:-1]
                results, _ = node._execute(txs) if not node.cfg.eov else (m.value.exec_results[:-1], None)
                v2 = Value(txs, tuple(results), m.height)
                p2 = Propose(m.height, m.round, me, v2.digest, -1, m.rr, v2, m.ref_digest, m.removed)
                others = [n for n in sim.ids if n != me]
                half = others[: len(others) // 2]
                res.append(Outgoing(m, o.depart, half))
                res.append(Outgoing(p2, o.depart, [n for n in others if n not in half]))
            else:
                res.append(o)
        return res

    def _withhold_proposal_from(self, sim, me, strat, outs):
        res = []
        for o in outs:
            m = o.msg
            if isinstance(m, Propose):
                victims = [n for n in strat.nodes if n != me]
                normal = [n for n in sim.ids if n != me and n not in victims]
                res.append(Outgoing(m, o.depart, normal))
                late = {}
                for n in victims:
                    # hold the proposal until just after the victim's propose timer
                    deadline = o.depart + node_timeout(self.node, TimerKind.PROPOSE, m.round)
                    late[n] = deadline + 1
                if late:
                    res.append(Outgoing(m, o.depart, None, late))
            else:
                res.append(o)
        return res

    def _last_moment_endorsement(self, sim, me, strat, outs):
        res = []
        for o in outs:
            m = o.msg
            if isinstance(m, Prevote) and m.endorsements:
                self._held.append(m)
                self._try_release(sim, me, strat, m)
            else:
                res.append(o)
        return res

    def on_timer_set(self, sim, node_id, kind, h, r, at) -> None:
        strat = self._get(StrategyKind.LAST_MOMENT_ENDORSEMENT)
        if strat is None or kind is not TimerKind.PREVOTE:
            return
        me = self.node.id
        for m in list(self._held):
            if m.height == h and m.round == r:
                self._try_release(sim, me, strat, m)

    def _try_release(self, sim, me, strat, m: Prevote) -> None:
        """Once every live correct node armed its prevote timer for the round,
        deliver to the ``count`` latest deadlines one tick early; everyone
        else only learns it via relays, which land after their timers."""
        live = [n for n in sim.correct if n not in sim.crashed]
        deadlines = {n: sim.timer_deadlines.get((n, TimerKind.PREVOTE.value, m.height, m.round)) for n in live}
        if any(d is None for d in deadlines.values()):
            return
        self._held.remove(m)
        order = sorted(live, key=lambda n: (-deadlines[n], sim.ids.index(n)))
        chosen = order[: strat.count or (sim.nodes[me].f1)]
        arrive = {n: max(sim.now + 1, deadlines[n] - 1) for n in chosen}
        sim.gossip_send(m, me, sim.now, None, arrive)


def node_timeout(node, kind: TimerKind, r: int) -> int:
    return node.cfg.timers.timeout(kind, r)


def build_adversaries(spec: Dict[NodeId, Sequence[AdversaryStrategy]]) -> Dict[NodeId, Adversary]:
    return {n: Adversary(s) for n, s in spec.items()}
