"""Build nodes from a scenario, run the simulation, derive metrics."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from ..adversary import build_adversaries
from ..consensus import Node
from ..execution import WorldState
from ..netsim import MaxTimeExceeded, Simulation
from .scenario import Scenario
from .workload import Workload, generate_workload

log = logging.getLogger(__name__)

TRACE_VERSION = 1


@dataclass
class RunResult:
    scenario: Scenario
    seed: int
    status: str                       # "ok" | "liveness"
    trace: List[dict]
    metrics: Dict
    error: Optional[str] = None
    nodes: Dict[str, Node] = field(default_factory=dict, repr=False)
    workload: Optional[Workload] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def header(sc: Scenario, seed: int) -> dict:
    return {"kind": "HEADER", "version": TRACE_VERSION, "seed": seed, "scenario": sc.to_json(),
            "byzantine": sc.byzantine}


def default_max_time(sc: Scenario) -> int:
    return sc.sim.gst + 200 * sc.sim.delta * sc.target_heights


def build_nodes(sc: Scenario, wl: Workload) -> Dict[str, Node]:
    proto = sc.protocol()
    genesis = WorldState(dict(wl.balances))
    return {n: Node(n, proto, genesis, wl.mempools[n], sc.opinion_map(n), n in sc.oppose_insufficient)
            for n in sc.cluster.node_ids}


def run_scenario(sc: Scenario, seed: int, max_time: Optional[int] = None) -> RunResult:
    sc = sc.with_seed(seed)
    wl = generate_workload(sc.workload, seed, sc.cluster.node_ids)
    nodes = build_nodes(sc, wl)
    advs = build_adversaries(sc.adversary_map())
    limit = max_time if max_time is not None else (sc.max_sim_time or default_max_time(sc))
    sim = Simulation(nodes, sc.sim, target_height=sc.target_heights, max_time=limit, adversaries=advs)
    status, err = "ok", None
    try:
        records = sim.run()
    except MaxTimeExceeded as e:
        status, err, records = "liveness", str(e), e.trace
        log.warning("seed %d: %s", seed, e)
    trace = [header(sc, seed)] + records
    metrics = compute_metrics(sc, trace, nodes, status)
    metrics["seed"] = seed
    metrics["events"] = sim.events_processed
    return RunResult(sc, seed, status, trace, metrics, err, nodes, wl)


def compute_metrics(sc: Scenario, trace: List[dict], nodes: Dict[str, Node], status: str) -> dict:
    byz = set(sc.byzantine)
    correct = [n for n in sc.cluster.node_ids if n not in byz]
    observer = correct[0]
    decides = [r for r in trace if r.get("kind") == "DECIDE" and r.get("node") == observer]
    aborts = [r for r in trace if r.get("kind") == "ABORT" and r.get("node") == observer]
    first_seen: Dict[str, int] = {}
    for r in trace:
        if r.get("kind") == "PHASE" and r.get("event") == "propose" and r.get("node") not in byz:
            for t in r["txs"]:
                first_seen.setdefault(t, r["t"])
    eov = sc.mode == "eov"
    if eov:
        committed_ids = [t for a in aborts for t in a["committed"]]
        commit_time = {t: a["t"] for a in aborts for t in a["committed"]}
    else:
        committed_ids = [t for d in decides for t in d["txs"]]
        commit_time = {t: d["t"] for d in decides for t in d["txs"]}
    end = decides[-1]["t"] if decides else 0
    removals: Counter = Counter()
    seen = set()
    for r in trace:
        if r.get("kind") == "REMOVE" and r.get("node") not in byz:
            key = (r["h"], r["txid"])
            if key not in seen:
                seen.add(key)
                removals[r["cause"]] += 1
    rates = [len(a["aborted"]) / (len(a["aborted"]) + len(a["committed"]))
             for a in aborts if a["aborted"] or a["committed"]]
    # blocks each tx rode in before it finally committed
    rides: Counter = Counter()
    for a in aborts:
        for t in a["aborted"]:
            rides[t] += 1
    lat = [commit_time[t] - first_seen.get(t, 0) for t in committed_ids]
    return {
        "mode": sc.mode,
        "scenario": sc.name,
        "status": status,
        "heights": len(decides),
        "committed_tx": len(committed_ids),
        "end_time": end,
        "throughput": round(len(committed_ids) * 1e6 / end, 6) if end else 0.0,
        "rounds_per_height": {str(k): v for k, v in sorted(Counter(d["r"] for d in decides).items())},
        "removals": {"veto": removals.get("veto", 0), "timeout": removals.get("timeout", 0)},
        "abort_rate": round(sum(rates) / len(rates), 9) if rates else 0.0,
        "abort_rates": [round(x, 9) for x in rates],
        "max_blocks_to_commit": max((rides[t] + 1 for t in committed_ids), default=0) if eov else 1,
        "recomputed": sum(nodes[n].stats.reexecuted for n in correct),
        "latency_mean": round(sum(lat) / len(lat), 6) if lat else 0.0,
    }
