"""Execute-order-validate baseline.

The primary pre-executes its batch against one snapshot; after ordering,
every node validates serially and aborts any tx that read a key written by
an earlier surviving tx of the same block. Ordering reuses the consensus
skeleton with endorsement checks switched off (``mode="eov"``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from .core_types import ExecResult, NodeId, Transaction, TxId, Value
from .execution import WorldState, apply_committed, execute_block


@dataclass(frozen=True)
class EovBlock:
    txs: Tuple[Transaction, ...]
    # rw-sets from the primary's snapshot pre-execution
    results: Tuple[ExecResult, ...]
    proposer: Optional[NodeId] = None
    height: int = 0

    @classmethod
    def from_value(cls, v: Value, height: int = 0, proposer: Optional[NodeId] = None) -> "EovBlock":
        return cls(v.txs, v.exec_results, proposer, height)


@dataclass(frozen=True)
class AbortRecord:
    height: int
    aborted_txids: Tuple[TxId, ...]
    committed_txids: Tuple[TxId, ...]
    retry_queue_depth: int = 0

    @property
    def abort_rate(self) -> float:
        total = len(self.aborted_txids) + len(self.committed_txids)
        return len(self.aborted_txids) / total if total else 0.0


def eov_validate(block, height: Optional[int] = None, retry_depth: int = 0) -> AbortRecord:
    """Serial validation. Accepts an :class:`EovBlock` or a consensus Value."""
    if isinstance(block, Value):
        block = EovBlock.from_value(block, height or 0)
    written: set = set()
    aborted, committed = [], []
    for res in block.results:
        if res.read_set & written:
            aborted.append(res.txid)
        else:
            committed.append(res.txid)
            written.update(a for a, _ in res.write_set)
    h = block.height if height is None else height
    return AbortRecord(h, tuple(aborted), tuple(committed), retry_depth + len(aborted))


def apply_eov_block(state: WorldState, block: EovBlock, record: AbortRecord) -> WorldState:
    keep = set(record.committed_txids)
    return apply_committed(state, [r for r in block.results if r.txid in keep])


def replay_committed(genesis: WorldState, txs: Sequence[Transaction]) -> WorldState:
    """Serially execute only committed txs from genesis; used to check final state."""
    results, _ = execute_block(genesis, txs)
    return apply_committed(genesis, results)


def eov_run(scenario, seed: int, **kw):
    """Run a scenario in EOV mode and return the simulation result."""
    from dataclasses import replace
    from .harness.runner import run_scenario
    return run_scenario(replace(scenario, mode="eov"), seed, **kw)
