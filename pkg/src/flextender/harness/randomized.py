"""Random small scenarios for the safety / termination property suites."""
from __future__ import annotations

import random
from typing import List, Optional

from ..adversary import StrategyKind
from .scenario import Scenario, scenario_from_dict

STRATEGIES = [
    StrategyKind.CRASH, StrategyKind.SILENT, StrategyKind.WITHHOLD_ENDORSEMENT,
    StrategyKind.LAST_MOMENT_ENDORSEMENT, StrategyKind.UNEVEN_ENDORSEMENT,
    StrategyKind.EQUIVOCATE_PROPOSALS, StrategyKind.WITHHOLD_PROPOSAL_FROM,
    StrategyKind.DUPLICATE_PREVOTE_DIFFERING, StrategyKind.CENSOR_PROPOSAL,
]

DELTA = 100


def _strategy(kind: StrategyKind, rng: random.Random, me: str, ids: List[str], txids: List[str]) -> dict:
    d = {"kind": kind.value}
    if kind is StrategyKind.CRASH:
        d["at"] = rng.randint(0, 8 * DELTA)
    elif kind in (StrategyKind.WITHHOLD_ENDORSEMENT, StrategyKind.CENSOR_PROPOSAL):
        d["txids"] = rng.sample(txids, k=rng.randint(1, min(2, len(txids))))
    elif kind is StrategyKind.WITHHOLD_PROPOSAL_FROM:
        others = [n for n in ids if n != me]
        d["nodes"] = rng.sample(others, k=rng.randint(1, len(others) // 2))
    return d


def random_scenario(kind: StrategyKind, index: int, *, gst: Optional[int] = None) -> Scenario:
    """Deterministic in (kind, index). Byzantine nodes all run ``kind``; one in
    four runs also composes a second random strategy."""
    rng = random.Random(f"{kind.value}:{index}")
    n = 7 if index % 4 == 3 else 4
    f = (n - 1) // 3
    ids = [f"n{i}" for i in range(n)]
    g = rng.randint(0, 10) * DELTA if gst is None else gst
    tx_count = rng.randint(3, 6)
    batch = rng.randint(2, 3)
    txids = [f"tx{i}" for i in range(tx_count)]
    accounts = [f"a{i}" for i in range(6)]
    txs = []
    for t in txids:
        src, dst = rng.sample(accounts, 2)
        txs.append({"txid": t, "from": src, "to": dst, "amount": rng.randint(1, 30)})
    byz = rng.sample(ids, k=rng.randint(1, f))
    policies = []
    for a in rng.sample(accounts, k=rng.randint(0, 3)):
        shape = rng.random()
        if shape < 0.4:
            pol = {"node": rng.choice(ids)}
        elif shape < 0.7:
            pol = {"or": [{"node": x} for x in rng.sample(ids, 2)]}
        else:
            pol = {"threshold": {"t": 2, "of": [{"node": x} for x in rng.sample(ids, 3)]}}
        trig = rng.choice(["always", {"amount_exceeds": 10}, {"custom": "ok"}])
        policies.append({"target": a, "policy": pol, "trigger": trig})
    opinions = {}
    for node in ids:
        if node not in byz and rng.random() < 0.25:
            t = rng.choice(txids)
            opinions[node] = {t: rng.choice(["oppose_result", "oppose_always"])}
    advs = {}
    for b in byz:
        strat = [_strategy(kind, rng, b, ids, txids)]
        if rng.random() < 0.25:
            extra = rng.choice([s for s in STRATEGIES if s not in (kind, StrategyKind.CRASH, StrategyKind.SILENT)])
            strat.append(_strategy(extra, rng, b, ids, txids))
        advs[b] = strat
    d = {
        "name": f"random-{kind.value}-{index}",
        "cluster": {"n": n, "f": f},
        "sim": {"delta": DELTA, "gst": g, "pre_gst_delay": [1, 3 * DELTA],
                "pre_gst_drop": rng.choice([0.0, 0.0, 0.1])},
        "policies": policies,
        "workload": {"kind": "scripted", "batch": batch, "txs": txs, "initial_balance": 40},
        "adversaries": advs,
        "opinions": opinions,
        "oppose_insufficient": [x for x in ids if x not in byz and rng.random() < 0.3],
        "target_heights": 2,
        "max_sim_time": g + 200 * DELTA,
    }
    return scenario_from_dict(d)
