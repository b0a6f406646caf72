"""Scenario files: JSON documents describing one reproducible experiment.

Validation errors carry the JSON path and the 1-based line where the
offending value starts, e.g. ``fig5.json:14: policies[0].policy: ...``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from ..adversary import AdversaryStrategy
from ..consensus import ProtocolConfig, TimerConfig
from ..core_types import ClusterConfig, ConfigError, NodeId
from ..netsim import Fanout, Partition, SimConfig
from ..policy import EndorsementView, PolicyBinding, PolicyExpr, parse_policy
from .workload import WorkloadSpec

PathT = Tuple[Union[str, int], ...]


class ScenarioError(ConfigError):
    def __init__(self, msg: str, path: PathT = (), line: Optional[int] = None, source: str = "<scenario>"):
        self.msg, self.path, self.line, self.source = msg, tuple(path), line, source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + (f"{fmt_path(self.path)}: " if self.path else "") + msg)


def fmt_path(path: PathT) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


def json_lines(text: str) -> Dict[PathT, int]:
    """Map every JSON path in ``text`` to the line its value starts on.
    Assumes ``text`` is valid JSON (json.loads already succeeded)."""
    lines: Dict[PathT, int] = {}
    i, line, n = 0, 1, len(text)

    def skip_ws():
        nonlocal i, line
        while i < n and text[i] in " \t\r\n":
            if text[i] == "\n":
                line += 1
            i += 1

    def string() -> str:
        nonlocal i
        start = i
        i += 1
        while text[i] != '"':
            i += 2 if text[i] == "\\" else 1
        i += 1
        return json.loads(text[start:i])

    def value(path: PathT):
        nonlocal i
        skip_ws()
        lines[path] = line
        c = text[i]
        if c == "{":
            i += 1
            skip_ws()
            if text[i] == "}":
                i += 1
                return
            while True:
                skip_ws()
                key = string()
                skip_ws()
                i += 1  # ':'
                value(path + (key,))
                skip_ws()
                c = text[i]
                i += 1
                if c == "}":
                    return
        elif c == "[":
            i += 1
            skip_ws()
            if text[i] == "]":
                i += 1
                return
            k = 0
            while True:
                value(path + (k,))
                k += 1
                skip_ws()
                c = text[i]
                i += 1
                if c == "]":
                    return
        elif c == '"':
            string()
        else:
            while i < n and text[i] not in ",]} \t\r\n":
                i += 1

    value(())
    return lines


@dataclass(frozen=True)
class Scenario:
    name: str
    mode: str
    cluster: ClusterConfig
    sim: SimConfig
    timers: TimerConfig
    policies: Tuple[PolicyBinding, ...]
    default_policy: Optional[PolicyExpr]
    workload: WorkloadSpec
    adversaries: Tuple[Tuple[NodeId, Tuple[AdversaryStrategy, ...]], ...] = ()
    opinions: Tuple[Tuple[NodeId, Tuple[Tuple[str, EndorsementView], ...]], ...] = ()
    oppose_insufficient: Tuple[NodeId, ...] = ()
    target_heights: int = 1
    max_sim_time: Optional[int] = None
    hash_only_reproposal: bool = True
    dependency_reexec: bool = True
    exec_cost_per_tx: int = 0
    sign_cost_per_tx: int = 0

    @property
    def byzantine(self) -> List[NodeId]:
        return [n for n, _ in self.adversaries]

    def adversary_map(self) -> Dict[NodeId, Tuple[AdversaryStrategy, ...]]:
        return dict(self.adversaries)

    def opinion_map(self, node: NodeId) -> Dict[str, EndorsementView]:
        return dict(dict(self.opinions).get(node, ()))

    def protocol(self) -> ProtocolConfig:
        return ProtocolConfig(self.cluster, self.timers, self.policies, self.default_policy,
                              self.workload.batch, self.mode, self.hash_only_reproposal,
                              self.dependency_reexec, self.exec_cost_per_tx, self.sign_cost_per_tx)

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, sim=replace(self.sim, seed=seed))

    def to_json(self) -> dict:
        t = self.timers
        s = self.sim
        d = {
            "name": self.name,
            "mode": self.mode,
            "cluster": {"n": self.cluster.n, "f": self.cluster.f, "node_ids": list(self.cluster.node_ids)},
            "sim": {"delta": s.delta, "gst": s.gst, "pre_gst_delay": list(s.pre_gst_delay),
                    "pre_gst_drop": s.pre_gst_drop, "delay_min": s.delay_min, "fanout": s.fanout.value,
                    "duplicate_suppression": s.duplicate_suppression,
                    "partitions": [{"start": p.start, "end": p.end, "nodes": sorted(p.nodes), "inbound": p.inbound}
                                   for p in s.partitions]},
            "timers": {"propose": [t.propose_base, t.propose_step], "prevote": [t.prevote_base, t.prevote_step],
                       "precommit": [t.precommit_base, t.precommit_step]},
            "policies": [b.to_json() for b in self.policies],
            "workload": self.workload.to_json(),
            "adversaries": {n: [x.to_json() for x in ss] for n, ss in self.adversaries},
            "opinions": {n: {t: v.value for t, v in ops} for n, ops in self.opinions},
            "oppose_insufficient": list(self.oppose_insufficient),
            "target_heights": self.target_heights,
            "max_sim_time": self.max_sim_time,
            "optimizations": {"hash_only_reproposal": self.hash_only_reproposal,
                              "dependency_reexec": self.dependency_reexec},
            "costs": {"exec_per_tx": self.exec_cost_per_tx, "sign_per_tx": self.sign_cost_per_tx},
        }
        if self.default_policy is not None:
            d["default_policy"] = self.default_policy.to_json()
        return d


_TOP = {"name", "mode", "cluster", "sim", "timers", "policies", "default_policy", "workload", "adversaries",
        "opinions", "oppose_insufficient", "target_heights", "max_sim_time", "optimizations", "costs",
        "description"}


class _Ctx:
    def __init__(self, lines: Optional[Dict[PathT, int]], source: str):
        self.lines = lines or {}
        self.source = source

    def fail(self, path: PathT, msg: str):
        p = tuple(path)
        while p and p not in self.lines:
            p = p[:-1]
        raise ScenarioError(msg, path, self.lines.get(p), self.source)

    def run(self, path: PathT, fn, *a):
        try:
            return fn(*a)
        except ScenarioError:
            raise
        except (ConfigError, ValueError, TypeError, KeyError) as e:
            self.fail(path, str(e) or type(e).__name__)


def _int(ctx, path, v, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        ctx.fail(path, f"expected integer, got {v!r}")
    if lo is not None and v < lo:
        ctx.fail(path, f"must be >= {lo}")
    return v


def _obj(ctx, path, v):
    if not isinstance(v, dict):
        ctx.fail(path, f"expected object, got {type(v).__name__}")
    return v


def scenario_from_dict(d, lines=None, source: str = "<scenario>") -> Scenario:
    ctx = _Ctx(lines, source)
    _obj(ctx, (), d)
    for k in d:
        if k not in _TOP:
            ctx.fail((k,), "unknown field")
    mode = d.get("mode", "flextender")
    if mode not in ("flextender", "eov"):
        ctx.fail(("mode",), f"mode must be 'flextender' or 'eov', got {mode!r}")

    c = _obj(ctx, ("cluster",), d.get("cluster", {"n": 4, "f": 1}))
    n = _int(ctx, ("cluster", "n"), c.get("n", 4), 1)
    f = _int(ctx, ("cluster", "f"), c.get("f", (n - 1) // 3), 0)
    cluster = ctx.run(("cluster",), ClusterConfig, n, f, tuple(c.get("node_ids", ())))

    s = _obj(ctx, ("sim",), d.get("sim", {}))
    delta = _int(ctx, ("sim", "delta"), s.get("delta", 100), 1)
    parts = []
    for i, p in enumerate(s.get("partitions", [])):
        path = ("sim", "partitions", i)
        _obj(ctx, path, p)
        nodes = p.get("nodes", [])
        for j, x in enumerate(nodes):
            if x not in cluster.node_ids:
                ctx.fail(path + ("nodes", j), f"unknown node {x!r}")
        parts.append(ctx.run(path, Partition, _int(ctx, path + ("start",), p.get("start", 0), 0),
                             _int(ctx, path + ("end",), p.get("end", 0), 0), frozenset(nodes),
                             bool(p.get("inbound", False))))
    pgd = s.get("pre_gst_delay", [1, delta])
    if not (isinstance(pgd, list) and len(pgd) == 2):
        ctx.fail(("sim", "pre_gst_delay"), "expected [min, max]")
    fan = s.get("fanout", "all")
    if fan not in ("all", "log2n"):
        ctx.fail(("sim", "fanout"), f"fanout must be 'all' or 'log2n', got {fan!r}")
    sim = ctx.run(("sim",), SimConfig, 0, delta, _int(ctx, ("sim", "gst"), s.get("gst", 0), 0),
                  (_int(ctx, ("sim", "pre_gst_delay", 0), pgd[0], 1), _int(ctx, ("sim", "pre_gst_delay", 1), pgd[1], 1)),
                  float(s.get("pre_gst_drop", 0.0)), _int(ctx, ("sim", "delay_min"), s.get("delay_min", 1), 1),
                  Fanout(fan), bool(s.get("duplicate_suppression", True)), tuple(parts))

    t = _obj(ctx, ("timers",), d.get("timers", {}))
    tv = {}
    for k in ("propose", "prevote", "precommit"):
        pair = t.get(k, [2 * delta, delta])
        if not (isinstance(pair, list) and len(pair) == 2):
            ctx.fail(("timers", k), "expected [base, step]")
        tv[k] = (_int(ctx, ("timers", k, 0), pair[0], 1), _int(ctx, ("timers", k, 1), pair[1], 0))
    timers = ctx.run(("timers",), TimerConfig, *tv["propose"], *tv["prevote"], *tv["precommit"], delta)

    pol = d.get("policies", [])
    if not isinstance(pol, list):
        ctx.fail(("policies",), "expected a list of bindings")
    bindings = tuple(ctx.run(("policies", i), PolicyBinding.from_json, b) for i, b in enumerate(pol))
    for i, b in enumerate(bindings):
        for m in sorted(b.policy.members()):
            if m not in cluster.node_ids:
                ctx.fail(("policies", i, "policy"), f"policy names unknown node {m!r}")
    default = None
    if "default_policy" in d:
        default = ctx.run(("default_policy",), parse_policy, d["default_policy"])
        for m in sorted(default.members()):
            if m not in cluster.node_ids:
                ctx.fail(("default_policy",), f"policy names unknown node {m!r}")

    if "workload" not in d:
        ctx.fail(("workload",), "missing workload")
    workload = ctx.run(("workload",), WorkloadSpec.from_json, _obj(ctx, ("workload",), d["workload"]))

    adv = _obj(ctx, ("adversaries",), d.get("adversaries", {}))
    advs = []
    for node, strats in adv.items():
        if node not in cluster.node_ids:
            ctx.fail(("adversaries", node), f"unknown node {node!r}")
        if not isinstance(strats, list):
            strats = [strats]
        advs.append((node, tuple(ctx.run(("adversaries", node, i), AdversaryStrategy.from_json, x)
                                 for i, x in enumerate(strats))))
    if len(advs) > cluster.f:
        ctx.fail(("adversaries",), f"{len(advs)} byzantine nodes exceed f={cluster.f}")

    ops = _obj(ctx, ("opinions",), d.get("opinions", {}))
    opinions = []
    for node, m in ops.items():
        if node not in cluster.node_ids:
            ctx.fail(("opinions", node), f"unknown node {node!r}")
        _obj(ctx, ("opinions", node), m)
        opinions.append((node, tuple(sorted((tx, ctx.run(("opinions", node, tx), EndorsementView, v))
                                            for tx, v in m.items()))))
    oi = d.get("oppose_insufficient", [])
    for i, x in enumerate(oi):
        if x not in cluster.node_ids:
            ctx.fail(("oppose_insufficient", i), f"unknown node {x!r}")

    opt = _obj(ctx, ("optimizations",), d.get("optimizations", {}))
    costs = _obj(ctx, ("costs",), d.get("costs", {}))
    mst = d.get("max_sim_time")
    if mst is not None:
        _int(ctx, ("max_sim_time",), mst, 1)
    return Scenario(
        name=str(d.get("name", "scenario")), mode=mode, cluster=cluster, sim=sim, timers=timers,
        policies=bindings, default_policy=default, workload=workload, adversaries=tuple(advs),
        opinions=tuple(opinions), oppose_insufficient=tuple(oi),
        target_heights=_int(ctx, ("target_heights",), d.get("target_heights", 1), 1), max_sim_time=mst,
        hash_only_reproposal=bool(opt.get("hash_only_reproposal", True)),
        dependency_reexec=bool(opt.get("dependency_reexec", True)),
        exec_cost_per_tx=_int(ctx, ("costs", "exec_per_tx"), costs.get("exec_per_tx", 0), 0),
        sign_cost_per_tx=_int(ctx, ("costs", "sign_per_tx"), costs.get("sign_per_tx", 0), 0),
    )


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"invalid JSON: {e.msg} (column {e.colno})", (), e.lineno, source) from None
    return scenario_from_dict(d, json_lines(text), source)


def load_scenario(path: Union[str, Path]) -> Scenario:
    p = Path(path)
    if not p.exists():
        builtin = Path(__file__).resolve().parent.parent / "scenarios" / (p.name if p.suffix else p.name + ".json")
        if builtin.exists():
            p = builtin
        else:
            raise ScenarioError(f"no such scenario file", (), None, str(path))
    return parse_scenario(p.read_text(), str(path))


def builtin_scenarios() -> List[str]:
    d = Path(__file__).resolve().parent.parent / "scenarios"
    return sorted(x.stem for x in d.glob("*.json"))
