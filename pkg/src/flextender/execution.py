"""Deterministic account-transfer execution with a dependency DAG, used for
both full and dependency-limited re-execution after removals."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

from .core_types import ExecResult, ExecStatus, Transaction, TxId

DepDag = Dict[TxId, FrozenSet[TxId]]


class ExecutionError(ValueError):
    pass


class RemovedNotPresent(ExecutionError):
    pass


class VersionMismatch(ExecutionError):
    pass


@dataclass(frozen=True)
class WorldState:
    balances: Mapping[str, int] = field(default_factory=dict)
    # height of the last committed block; -1 at genesis
    version: int = -1

    def balance(self, account: str) -> int:
        return self.balances.get(account, 0)

    def total(self) -> int:
        return sum(self.balances.values())


@dataclass
class ExecStats:
    executed: int = 0
    # txs recomputed while deriving a value after removals
    reexecuted: int = 0


def _run_transfer(tx: Transaction, view: Mapping[str, int]) -> ExecResult:
    src = view.get(tx.src, 0)
    status = ExecStatus.OK if src >= tx.amount else ExecStatus.INSUFFICIENT
    if tx.src == tx.dst:
        writes = ((tx.src, src),)
    else:
        writes = tuple(sorted(((tx.src, src - tx.amount), (tx.dst, view.get(tx.dst, 0) + tx.amount))))
    return ExecResult(tx.txid, frozenset(tx.accounts), writes, status)


def build_dag(txs: Sequence[Transaction]) -> DepDag:
    last: Dict[str, TxId] = {}
    dag: DepDag = {}
    for tx in txs:
        dag[tx.txid] = frozenset(last[a] for a in tx.accounts if a in last)
        for a in tx.accounts:
            last[a] = tx.txid
    return dag


def execute_block(state: WorldState, txs: Sequence[Transaction],
                  stats: Optional[ExecStats] = None) -> Tuple[List[ExecResult], DepDag]:
    """Serial in-order execution against a scratch copy of ``state``."""
    scratch = dict(state.balances)
    results = []
    for tx in txs:
        r = _run_transfer(tx, scratch)
        scratch.update(r.write_set)
        results.append(r)
    if stats is not None:
        stats.executed += len(txs)
    return results, build_dag(txs)


def _dependents(dag: DepDag, order: Sequence[TxId], roots: Iterable[TxId]) -> set:
    hit = set(roots)
    for t in order:  # dag edges point backwards, so one forward pass suffices
        if t not in hit and dag.get(t, frozenset()) & hit:
            hit.add(t)
    return hit


def reexecute_after_removal(state: WorldState, txs: Sequence[Transaction], removed: Iterable[TxId],
                            prev_results: Sequence[ExecResult], prev_dag: DepDag,
                            optimized: bool = True,
                            stats: Optional[ExecStats] = None) -> Tuple[List[ExecResult], DepDag]:
    removed = set(removed)
    known = {tx.txid for tx in txs}
    if not removed <= known:
        raise RemovedNotPresent(f"unknown txids {sorted(removed - known)}")
    kept = [tx for tx in txs if tx.txid not in removed]
    if not optimized:
        if stats is not None:
            stats.reexecuted += len(kept)
        return execute_block(state, kept, stats)

    prev = {r.txid: r for r in prev_results}
    dirty = _dependents(prev_dag, [tx.txid for tx in txs], removed)
    latest = dict(state.balances)
    results = []
    recomputed = 0
    for tx in kept:
        if tx.txid in dirty:
            r = _run_transfer(tx, latest)
            recomputed += 1
            old = prev[tx.txid]
            if r.read_set != old.read_set or {a for a, _ in r.write_set} != {a for a, _ in old.write_set}:
                # new dependencies: fall back to executing everything
                if stats is not None:
                    stats.executed += recomputed
                    stats.reexecuted += recomputed + len(kept)
                return execute_block(state, kept, stats)
        else:
            r = prev[tx.txid]
        latest.update(r.write_set)
        results.append(r)
    if stats is not None:
        stats.executed += recomputed
        stats.reexecuted += recomputed
    return results, build_dag(kept)


def apply_committed(state: WorldState, results: Sequence[ExecResult], height: Optional[int] = None) -> WorldState:
    if height is not None and height != state.version + 1:
        raise VersionMismatch(f"state at version {state.version} cannot apply height {height}")
    balances = dict(state.balances)
    for r in results:
        balances.update(r.write_set)
    return WorldState(balances, state.version + 1)


def snapshot_execute(state: WorldState, txs: Sequence[Transaction],
                     stats: Optional[ExecStats] = None) -> List[ExecResult]:
    """Execute every tx independently against the same snapshot (EOV pre-execution)."""
    if stats is not None:
        stats.executed += len(txs)
    return [_run_transfer(tx, state.balances) for tx in txs]
