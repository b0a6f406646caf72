"""Offline re-check of a run trace.

Every check is recomputed from the trace alone (plus the workload, which is
regenerated from the scenario and seed stored in the header).
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from ..core_types import ClusterConfig, ConfigError, ExecResult, ExecStatus, quorum_size, subsequence
from ..policy import (EndorsementView, applicable_bindings, is_properly_endorsed, is_vetoed,
                      threshold_of)
from .scenario import scenario_from_dict
from .trace import TraceCorrupt
from .workload import generate_workload

PASS, FAIL, NA = "PASS", "FAIL", "NOT_APPLICABLE"

CHECKS = ("agreement", "safety_with_endorsement", "invariant1", "invariant2", "remove_only",
          "post_gst_delivery", "eventual_delivery")


@dataclass
class CheckResult:
    status: str
    detail: str = ""


@dataclass
class AuditReport:
    results: Dict[str, CheckResult] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(r.status != FAIL for r in self.results.values())

    def failures(self) -> List[str]:
        return [k for k, r in self.results.items() if r.status == FAIL]

    def lines(self) -> List[str]:
        return [f"{k}: {r.status}" + (f" ({r.detail})" if r.detail else "") for k, r in self.results.items()]

    def to_json(self) -> dict:
        return {k: {"status": r.status, "detail": r.detail} for k, r in self.results.items()}


def _endorsers(maps_by_sender: Dict[str, Set[tuple]], txids) -> Dict[str, Dict[str, str]]:
    """Same aggregation as the nodes use: two differing maps = endorse all."""
    views: Dict[str, Dict[str, str]] = {t: {} for t in txids}
    for s, maps in maps_by_sender.items():
        if len(maps) > 1:
            for t in txids:
                views[t][s] = EndorsementView.ENDORSE.value
            continue
        for t, v in next(iter(maps)):
            if t in views:
                views[t][s] = v
    return views


class _Ctx:
    def __init__(self, records: List[dict]):
        if not records or records[0].get("kind") != "HEADER":
            raise TraceCorrupt("trace must start with a HEADER record")
        h = records[0]
        try:
            self.sc = scenario_from_dict(h["scenario"])
            self.seed = int(h["seed"])
        except (KeyError, TypeError, ValueError, ConfigError) as e:
            raise TraceCorrupt(f"bad header: {e}") from None
        self.records = records[1:]
        self.byz = set(h.get("byzantine", []))
        cl: ClusterConfig = self.sc.cluster
        self.nodes = list(cl.node_ids)
        self.correct = [n for n in self.nodes if n not in self.byz]
        self.q = quorum_size(cl)
        self.f1 = cl.f + 1
        self.all_nodes = frozenset(self.nodes)
        self.default = self.sc.default_policy or threshold_of(self.q, self.nodes)
        self.txs = generate_workload(self.sc.workload, self.seed, self.nodes).by_id()
        self.msgs: Dict[str, dict] = {}
        self.origin: Dict[str, str] = {}
        self.values: Dict[str, Tuple[tuple, tuple]] = {}
        self.ended = None
        for r in self.records:
            k = r["kind"]
            if k == "SEND":
                m = r.get("msg") or {}
                if "id" not in m:
                    raise TraceCorrupt("SEND without message id")
                self.msgs.setdefault(m["id"], m)
                self.origin.setdefault(m["id"], r["node"])
                if m.get("type") == "propose" and "txs" in m:
                    self.values.setdefault(m["digest"], (tuple(m["txs"]), tuple(m["status"])))
            elif k == "PHASE" and r.get("event") == "propose":
                self.values.setdefault(r["digest"], (tuple(r["txs"]), tuple(r["status"])))
            elif k == "DECIDE":
                self.values.setdefault(r["digest"], (tuple(r["txs"]), tuple(r.get("status", ()))))
            elif k == "DELIVER" and r["id"] not in self.msgs:
                raise TraceCorrupt(f"DELIVER of unknown message {r['id']}")
            elif k == "END" and self.ended is None:
                self.ended = r["reason"]

    def policies(self, txid: str, status: Optional[str]):
        tx = self.txs.get(txid)
        if tx is None:
            raise TraceCorrupt(f"unknown transaction {txid}")
        res = ExecResult(txid, frozenset(), (), ExecStatus(status)) if status else None
        return [b.policy for b in applicable_bindings(tx, res, self.sc.policies)]

    def endorsed(self, digest: str, views) -> bool:
        txids, status = self.values[digest]
        status = status or (None,) * len(txids)
        for t, st in zip(txids, status):
            ends = {s for s, v in views[t].items() if v == EndorsementView.ENDORSE.value}
            if not is_properly_endorsed(self.policies(t, st), self.default, ends):
                return False
        return True


def audit(records: List[dict]) -> AuditReport:
    ctx = _Ctx(records)
    rep = AuditReport()
    rep.results["agreement"] = _agreement(ctx)
    rep.results["safety_with_endorsement"] = _safety(ctx)
    rep.results["invariant1"] = _invariant1(ctx)
    rep.results["invariant2"] = _invariant2(ctx)
    rep.results["remove_only"] = _remove_only(ctx)
    rep.results["post_gst_delivery"] = _delivery_bound(ctx)
    rep.results["eventual_delivery"] = _eventual(ctx)
    return rep


def _agreement(ctx: _Ctx) -> CheckResult:
    seen: Dict[int, Tuple[str, str]] = {}
    n = 0
    for r in ctx.records:
        if r["kind"] == "DECIDE" and r["node"] in ctx.correct:
            n += 1
            prev = seen.setdefault(r["h"], (r["digest"], r["node"]))
            if prev[0] != r["digest"]:
                return CheckResult(FAIL, f"height {r['h']}: {prev[1]} decided {prev[0]}, "
                                         f"{r['node']} decided {r['digest']}")
    return CheckResult(PASS, f"{n} decisions over {len(seen)} heights")


def _prevote_views(ctx: _Ctx, mids, h: int, rounds, digest: str) -> Dict[str, Set[tuple]]:
    per: Dict[str, Set[tuple]] = defaultdict(set)
    for mid in mids:
        m = ctx.msgs[mid]
        if (m["type"] == "prevote" and m["h"] == h and m["r"] in rounds and m["digest"] == digest
                and m.get("end") is not None):
            per[ctx.origin[mid]].add(tuple(sorted(m["end"].items())))
    return per


def _safety(ctx: _Ctx) -> CheckResult:
    """At each correct DECIDE, some correct node's log must already prove the
    value properly endorsed at the commit round or its referenced round."""
    if ctx.sc.mode == "eov":
        return CheckResult(NA, "no endorsements in eov mode")
    logs: Dict[str, List[str]] = defaultdict(list)
    proven = set()
    checked = 0
    for r in ctx.records:
        k = r["kind"]
        if k == "SEND":
            logs[r["node"]].append(r["msg"]["id"])
        elif k == "DELIVER":
            logs[r["node"]].append(r["id"])
        elif k == "DECIDE" and r["node"] in ctx.correct:
            d, h = r["digest"], r["h"]
            checked += 1
            if (h, d) in proven:
                continue
            txids = ctx.values[d][0]
            rounds = ({r["r"]}, {r["rr"]})
            if any(ctx.endorsed(d, _endorsers(_prevote_views(ctx, logs[n], h, rs, d), txids))
                   for n in ctx.correct for rs in rounds):
                proven.add((h, d))
                continue
            return CheckResult(FAIL, f"{r['node']} committed {d} at h={h} r={r['r']} without proper endorsement")
    return CheckResult(PASS, f"{checked} commits verified")


def _precommits(ctx: _Ctx):
    """(h, r, digest) -> sender -> exclusions, counting only messages some
    correct node holds."""
    held = set()
    for r in ctx.records:
        if r["kind"] == "DELIVER" and r["node"] in ctx.correct:
            held.add(r["id"])
        elif r["kind"] == "SEND" and r["node"] in ctx.correct:
            held.add(r["msg"]["id"])
    out: Dict[tuple, Dict[str, dict]] = defaultdict(dict)
    for mid in held:
        m = ctx.msgs[mid]
        if m["type"] == "precommit" and m["digest"] is not None:
            out[(m["h"], m["r"], m["digest"])].setdefault(ctx.origin[mid], m["excl"])
    return out, held


def _proposals(ctx: _Ctx):
    out = {}
    for mid, m in ctx.msgs.items():
        if m["type"] == "propose":
            out.setdefault((m["h"], m["r"], m["digest"]), m)
    return out


def _invariant1(ctx: _Ctx) -> CheckResult:
    if ctx.sc.mode == "eov":
        return CheckResult(NA, "no endorsements in eov mode")
    pcs, held = _precommits(ctx)
    props = _proposals(ctx)
    per_node: Dict[str, List[str]] = defaultdict(list)
    for r in ctx.records:
        if r["kind"] == "DELIVER":
            per_node[r["node"]].append(r["id"])
        elif r["kind"] == "SEND":
            per_node[r["node"]].append(r["msg"]["id"])
    examined = 0
    for (h, rnd, d), senders in sorted(pcs.items()):
        p = props.get((h, rnd, d))
        if p is None or p["vr"] != -1 or len(senders) < ctx.q or d not in ctx.values:
            continue
        examined += 1
        txids = ctx.values[d][0]
        counts = defaultdict(int)
        for excl in senders.values():
            for t in excl:
                counts[t] += 1
        if any(c >= ctx.f1 for c in counts.values()):
            continue
        rounds = {rnd} | ({p["rr"]} if p["rr"] >= 0 else set())
        if any(ctx.endorsed(d, _endorsers(_prevote_views(ctx, per_node[n], h, rounds, d), txids))
               for n in ctx.correct):
            continue
        return CheckResult(FAIL, f"examined value {d} at h={h} r={rnd} neither endorsed nor removable")
    return CheckResult(PASS, f"{examined} examined values")


def _invariant2(ctx: _Ctx) -> CheckResult:
    sc = ctx.sc
    if sc.mode == "eov":
        return CheckResult(NA, "no endorsements in eov mode")
    if sc.exec_cost_per_tx or sc.timers.prevote_base < 2 * sc.sim.delta:
        return CheckResult(NA, "preconditions unmet: compute delays or short prevote timer")
    gst = sc.sim.gst
    entry: Dict[Tuple[int, int], int] = {}
    for r in ctx.records:
        if r["kind"] == "PHASE" and r.get("event") == "round" and r["node"] in ctx.correct:
            entry.setdefault((r["h"], r["r"]), r["t"])
    post = {k for k, t in entry.items() if t >= gst}
    if not post:
        return CheckResult(NA, "no round started after gst")
    all_views: Dict[tuple, Dict[str, Set[tuple]]] = defaultdict(lambda: defaultdict(set))
    correct_views: Dict[tuple, Dict[str, Set[tuple]]] = defaultdict(lambda: defaultdict(set))
    for mid, m in ctx.msgs.items():
        if m["type"] == "prevote" and m.get("end") is not None:
            key = (m["h"], m["r"], m["digest"])
            mp = tuple(sorted(m["end"].items()))
            all_views[key][ctx.origin[mid]].add(mp)
            if ctx.origin[mid] in ctx.correct:
                correct_views[key][ctx.origin[mid]].add(mp)
    checked = 0
    for r in ctx.records:
        if r["kind"] != "SEND" or r["node"] not in ctx.correct:
            continue
        m = r["msg"]
        if m["type"] != "precommit" or not m["excl"] or (m["h"], m["r"]) not in post:
            continue
        key = (m["h"], m["r"], m["digest"])
        txids, status = ctx.values[m["digest"]]
        cv = _endorsers(correct_views.get(key, {}), txids)
        av = _endorsers(all_views.get(key, {}), txids)
        st = dict(zip(txids, status or (None,) * len(txids)))
        for t in m["excl"]:
            checked += 1
            pols = ctx.policies(t, st[t])
            good = {s for s, v in cv[t].items() if v == EndorsementView.ENDORSE.value}
            opp = {s for s, v in av[t].items() if v != EndorsementView.ENDORSE.value}
            if is_properly_endorsed(pols, ctx.default, good) and not is_vetoed(pols, ctx.default, opp, ctx.all_nodes):
                return CheckResult(FAIL, f"{r['node']} suggested removing endorsed {t} at h={m['h']} r={m['r']}")
    return CheckResult(PASS, f"{len(post)} post-gst rounds, {checked} suggestions checked")


def _remove_only(ctx: _Ctx) -> CheckResult:
    ref: Dict[Tuple[str, int], tuple] = {}
    n = 0
    for r in ctx.records:
        if r["kind"] != "PHASE" or r["node"] not in ctx.correct:
            continue
        key = (r["node"], r["h"])
        if r.get("event") == "ref":
            prev = ref.get(key)
            txs = tuple(r["txs"])
            if prev is not None and not len(txs) < len(prev):
                return CheckResult(FAIL, f"{r['node']} ref at h={r['h']} grew from {len(prev)} to {len(txs)}")
            ref[key] = txs
            n += 1
        elif r.get("event") == "propose" and r["rr"] >= 0 and r["vr"] == -1:
            prev = ref.get(key)
            if prev is None or not subsequence(r["txs"], prev):
                return CheckResult(FAIL, f"{r['node']} re-proposal at h={r['h']} r={r['r']} adds transactions")
            n += 1
    return CheckResult(PASS, f"{n} reference steps")


def _delivery_bound(ctx: _Ctx) -> CheckResult:
    gst, delta = ctx.sc.sim.gst, ctx.sc.sim.delta
    n = 0
    for r in ctx.records:
        if r["kind"] != "DELIVER" or r["node"] in ctx.byz or r["from"] in ctx.byz:
            continue
        n += 1
        bound = (r["sent"] if r["sent"] >= gst else gst) + delta
        if r["t"] > bound:
            return CheckResult(FAIL, f"{r['from']}->{r['node']} sent {r['sent']} arrived {r['t']} > {bound}")
    return CheckResult(PASS, f"{n} correct hops")


def _eventual(ctx: _Ctx) -> CheckResult:
    if ctx.ended != "target":
        return CheckResult(NA, "run did not complete")
    holders: Dict[str, Set[str]] = defaultdict(set)
    for r in ctx.records:
        if r["kind"] == "SEND":
            holders[r["msg"]["id"]].add(r["node"])
        elif r["kind"] == "DELIVER":
            holders[r["id"]].add(r["node"])
    crashed = {r["node"] for r in ctx.records if r["kind"] == "CRASH"}
    want = set(ctx.correct) - crashed
    n = 0
    for mid, hs in holders.items():
        if hs & want:
            n += 1
            missing = want - hs
            if missing:
                return CheckResult(FAIL, f"message {mid} never reached {sorted(missing)}")
    return CheckResult(PASS, f"{n} messages reached all correct nodes")
