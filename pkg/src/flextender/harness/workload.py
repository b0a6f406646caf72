"""Deterministic transaction streams and their split across mempools."""
from __future__ import annotations

import enum
import itertools
import random
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from ..core_types import ConfigError, NodeId, Transaction


class WorkloadKind(str, enum.Enum):
    CONFLICT_FREE = "conflict_free"
    ALL_CONFLICT = "all_conflict"
    ZIPF = "zipf"
    SCRIPTED = "scripted"


@dataclass(frozen=True)
class WorkloadSpec:
    kind: WorkloadKind
    tx_count: int = 0
    batch: int = 16
    accounts: int = 0
    skew: float = 1.0
    amount: int = 1
    initial_balance: int = 10 ** 6
    txs: Tuple[Transaction, ...] = ()
    balances: Optional[Tuple[Tuple[str, int], ...]] = None
    # scripted only: explicit node -> txids placement
    mempools: Optional[Tuple[Tuple[NodeId, Tuple[str, ...]], ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", WorkloadKind(self.kind))
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.kind is WorkloadKind.SCRIPTED:
            ids = [t.txid for t in self.txs]
            if len(set(ids)) != len(ids):
                raise ConfigError("scripted txids must be unique")
        elif self.tx_count < 0:
            raise ConfigError("tx_count must be >= 0")
        if self.kind is WorkloadKind.ZIPF:
            if self.accounts < 2:
                raise ConfigError("zipf needs at least 2 accounts")
            if self.skew < 0:
                raise ConfigError("zipf skew must be >= 0")

    def to_json(self) -> dict:
        d = {"kind": self.kind.value, "batch": self.batch}
        if self.kind is WorkloadKind.SCRIPTED:
            d["txs"] = [t.to_json() for t in self.txs]
            if self.mempools is not None:
                d["mempools"] = {n: list(ts) for n, ts in self.mempools}
        else:
            d["tx_count"] = self.tx_count
            d["amount"] = self.amount
        if self.kind is WorkloadKind.ZIPF:
            d["accounts"] = self.accounts
            d["skew"] = self.skew
        if self.balances is not None:
            d["balances"] = dict(self.balances)
        else:
            d["initial_balance"] = self.initial_balance
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "WorkloadSpec":
        if not isinstance(d, Mapping) or "kind" not in d:
            raise ConfigError("workload needs a 'kind'")
        try:
            kind = WorkloadKind(d["kind"])
        except ValueError:
            raise ConfigError(f"unknown workload kind {d['kind']!r}") from None
        known = {"kind", "tx_count", "batch", "accounts", "skew", "amount", "initial_balance", "txs",
                 "balances", "mempools"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unexpected workload fields {sorted(extra)}")
        txs = ()
        if kind is WorkloadKind.SCRIPTED:
            if not isinstance(d.get("txs"), list):
                raise ConfigError("scripted workload needs a 'txs' list")
            try:
                txs = tuple(Transaction.from_json(t) for t in d["txs"])
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError(f"bad transaction: {e}") from None
        bal = d.get("balances")
        mp = d.get("mempools")
        return cls(kind, int(d.get("tx_count", 0)), int(d.get("batch", 16)), int(d.get("accounts", 0)),
                   float(d.get("skew", 1.0)), int(d.get("amount", 1)), int(d.get("initial_balance", 10 ** 6)),
                   txs, None if bal is None else tuple(sorted((str(k), int(v)) for k, v in bal.items())),
                   None if mp is None else tuple((str(k), tuple(v)) for k, v in mp.items()))


def _stream(spec: WorkloadSpec, seed: int) -> List[Transaction]:
    k = spec.kind
    if k is WorkloadKind.SCRIPTED:
        return list(spec.txs)
    if k is WorkloadKind.CONFLICT_FREE:
        return [Transaction(f"tx{i}", f"a{2 * i}", f"a{2 * i + 1}", spec.amount) for i in range(spec.tx_count)]
    if k is WorkloadKind.ALL_CONFLICT:
        return [Transaction(f"tx{i}", "a0", "a1", spec.amount) for i in range(spec.tx_count)]
    rng = random.Random(seed)
    cum = list(itertools.accumulate(1.0 / (r ** spec.skew) for r in range(1, spec.accounts + 1)))
    pop = range(spec.accounts)
    out = []
    for i in range(spec.tx_count):
        src = rng.choices(pop, cum_weights=cum)[0]
        dst = src
        while dst == src:
            dst = rng.choices(pop, cum_weights=cum)[0]
        out.append(Transaction(f"tx{i}", f"a{src}", f"a{dst}", spec.amount))
    return out


def accounts_of(txs: Sequence[Transaction]) -> List[str]:
    seen = {}
    for t in txs:
        for a in (t.src, t.dst):
            seen.setdefault(a, None)
    return list(seen)


@dataclass
class Workload:
    txs: List[Transaction]
    mempools: Dict[NodeId, List[Transaction]]
    balances: Dict[str, int] = field(default_factory=dict)

    def by_id(self) -> Dict[str, Transaction]:
        return {t.txid: t for t in self.txs}


def generate_workload(spec: WorkloadSpec, seed: int, node_ids: Sequence[NodeId]) -> Workload:
    """Pure function of (spec, seed). Batch j goes to node j mod n, which is
    the round-0 proposer of height j, so nodes propose in global order."""
    txs = _stream(spec, seed)
    pools: Dict[NodeId, List[Transaction]] = {n: [] for n in node_ids}
    if spec.mempools is not None:
        by_id = {t.txid: t for t in txs}
        for n, ids in spec.mempools:
            if n not in pools:
                raise ConfigError(f"mempool for unknown node {n!r}")
            for t in ids:
                if t not in by_id:
                    raise ConfigError(f"mempool references unknown tx {t!r}")
                pools[n].append(by_id[t])
    else:
        for j in range(0, len(txs), spec.batch):
            pools[node_ids[(j // spec.batch) % len(node_ids)]].extend(txs[j:j + spec.batch])
    if spec.balances is not None:
        balances = dict(spec.balances)
    else:
        balances = {a: spec.initial_balance for a in accounts_of(txs)}
    return Workload(txs, pools, balances)
