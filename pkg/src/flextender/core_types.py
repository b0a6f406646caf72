"""Shared domain types, content digests and quorum arithmetic."""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import NewType, Optional, Sequence, Tuple

Digest = NewType("Digest", str)
NodeId = str
TxId = str


class ConfigError(ValueError):
    """Raised for invalid cluster or scenario configuration."""


@dataclass(frozen=True)
class ClusterConfig:
    n: int
    f: int
    node_ids: Tuple[NodeId, ...] = ()

    def __post_init__(self):
        if not self.node_ids:
            object.__setattr__(self, "node_ids", tuple(f"n{i}" for i in range(self.n)))
        else:
            object.__setattr__(self, "node_ids", tuple(self.node_ids))
        if self.f < 0:
            raise ConfigError("f must be non-negative")
        if self.n < 3 * self.f + 1:
            raise ConfigError(f"n={self.n} < 3f+1={3 * self.f + 1}")
        if len(self.node_ids) != self.n:
            raise ConfigError(f"expected {self.n} node ids, got {len(self.node_ids)}")
        if len(set(self.node_ids)) != self.n:
            raise ConfigError("node ids must be distinct")

    def proposer(self, height: int, round: int) -> NodeId:
        return self.node_ids[(height + round) % self.n]

    def index(self, node: NodeId) -> int:
        return self.node_ids.index(node)


def quorum_size(cfg: ClusterConfig) -> int:
    return (cfg.n + cfg.f) // 2 + 1


def removal_threshold(cfg: ClusterConfig) -> int:
    return cfg.f + 1


@dataclass(frozen=True, order=True)
class RoundId:
    height: int
    round: int


@dataclass(frozen=True)
class Transaction:
    txid: TxId
    src: str
    dst: str
    amount: int
    group_tag: Optional[str] = None

    def __post_init__(self):
        if self.amount < 0:
            raise ValueError(f"{self.txid}: negative amount")

    @property
    def accounts(self) -> Tuple[str, ...]:
        return (self.src,) if self.src == self.dst else (self.src, self.dst)

    def to_json(self) -> dict:
        d = {"txid": self.txid, "from": self.src, "to": self.dst, "amount": self.amount}
        if self.group_tag is not None:
            d["tag"] = self.group_tag
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Transaction":
        return cls(str(d["txid"]), str(d["from"]), str(d["to"]), int(d["amount"]), d.get("tag"))


class ExecStatus(str, enum.Enum):
    OK = "ok"
    INSUFFICIENT = "insufficient"


@dataclass(frozen=True)
class ExecResult:
    txid: TxId
    read_set: frozenset
    # sorted (account, new_balance) pairs
    write_set: Tuple[Tuple[str, int], ...]
    status: ExecStatus = ExecStatus.OK

    def writes(self) -> dict:
        return dict(self.write_set)


def _lp(b: bytes) -> bytes:
    return len(b).to_bytes(4, "big") + b


def _s(x) -> bytes:
    return _lp(str(x).encode())


@dataclass(frozen=True)
class Value:
    txs: Tuple[Transaction, ...] = ()
    exec_results: Tuple[ExecResult, ...] = ()
    origin_height: int = field(default=0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "txs", tuple(self.txs))
        object.__setattr__(self, "exec_results", tuple(self.exec_results))
        if self.exec_results and len(self.exec_results) != len(self.txs):
            raise ValueError("exec_results must align with txs")

    def __len__(self) -> int:
        return len(self.txs)

    @property
    def txids(self) -> Tuple[TxId, ...]:
        return tuple(tx.txid for tx in self.txs)

    def result_of(self, txid: TxId) -> Optional[ExecResult]:
        for r in self.exec_results:
            if r.txid == txid:
                return r
        return None

    def canonical_bytes(self) -> bytes:
        parts = [_s(len(self.txs))]
        for tx in self.txs:
            parts.append(_lp(_s(tx.txid) + _s(tx.src) + _s(tx.dst) + _s(tx.amount)
                             + _s(tx.group_tag or "")))
        parts.append(_s(len(self.exec_results)))
        for r in self.exec_results:
            body = _s(r.txid) + _s(r.status.value) + _s(len(r.read_set))
            body += b"".join(_s(a) for a in sorted(r.read_set))
            body += _s(len(r.write_set))
            body += b"".join(_s(a) + _s(v) for a, v in r.write_set)
            parts.append(_lp(body))
        return b"".join(parts)

    @cached_property
    def digest(self) -> Digest:
        return value_digest(self)

    def is_subsequence_of(self, other: "Value") -> bool:
        it = iter(other.txids)
        return all(t in it for t in self.txids)


def value_digest(v: Value) -> Digest:
    return Digest(hashlib.sha256(v.canonical_bytes()).hexdigest())


def short(d: Optional[str]) -> Optional[str]:
    return None if d is None else d[:12]


def subsequence(txids: Sequence[TxId], of: Sequence[TxId]) -> bool:
    it = iter(of)
    return all(t in it for t in txids)
