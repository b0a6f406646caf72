from __future__ import annotations

from flextender.consensus import Node, ProtocolConfig, TimerConfig
from flextender.core_types import ClusterConfig, Transaction, Value
from flextender.execution import WorldState, execute_block

CL4 = ClusterConfig(4, 1)
GENESIS = WorldState({a: 100 for a in ("a", "b", "c", "d", "e", "f", "g", "h")})


def tx(txid, src, dst, amount=10):
    return Transaction(txid, src, dst, amount)


TX1, TX2, TX3 = tx("tx1", "a", "b"), tx("tx2", "c", "d"), tx("tx3", "e", "f")


def proto(cluster=CL4, **kw):
    return ProtocolConfig(cluster, TimerConfig.for_delta(100), **kw)


def value(txs, world=GENESIS, h=0):
    res, _ = execute_block(world, txs)
    return Value(tuple(txs), tuple(res), h)


def node(nid="n1", cfg=None, mempool=(), **kw):
    return Node(nid, cfg or proto(), GENESIS, mempool, **kw)


def sends(outs, cls=None):
    from flextender.consensus import Send
    return [o.msg for o in outs if isinstance(o, Send) and (cls is None or isinstance(o.msg, cls))]


def timers(outs):
    from flextender.consensus import SetTimer
    return [o for o in outs if isinstance(o, SetTimer)]


def notes(outs, kind=None):
    from flextender.consensus import Note
    return [o for o in outs if isinstance(o, Note) and (kind is None or o.kind == kind)]
