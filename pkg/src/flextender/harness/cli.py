"""Command line: ``flextender run | compare | audit``.

Exit codes: 0 success, 1 configuration/usage error, 2 liveness failure,
3 invariant violation.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional

from .audit import audit
from .runner import run_scenario
from .scenario import ScenarioError, builtin_scenarios, load_scenario
from .trace import TraceCorrupt, dumps_metrics, dumps_trace, read_trace, write_atomic

EXIT_OK, EXIT_CONFIG, EXIT_LIVENESS, EXIT_INVARIANT = 0, 1, 2, 3


def _setup_logging() -> None:
    level = os.environ.get("FLEXTENDER_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flextender", description="FlexTender consensus simulator")
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("--scenario", required=True, help="scenario file or built-in name")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--trace", help="write the JSONL trace here")
    r.add_argument("--metrics", help="write the metrics JSON here")
    c = sub.add_parser("compare", help="run FlexTender and EOV on the same workload")
    c.add_argument("--scenario", required=True)
    c.add_argument("--seeds", type=int, default=3)
    a = sub.add_parser("audit", help="re-check the invariants of a trace")
    a.add_argument("--trace", required=True)
    sub.add_parser("list", help="list built-in scenarios")
    return p


def cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    if not 0 <= args.seed < 2 ** 64:
        raise ScenarioError("seed must be an unsigned 64-bit integer")
    res = run_scenario(sc, args.seed)
    rep = audit(res.trace)
    # outputs are written only once the run finished, and atomically
    if args.trace:
        write_atomic(args.trace, dumps_trace(res.trace))
    if args.metrics:
        write_atomic(args.metrics, dumps_metrics(res.metrics))
    m = res.metrics
    print(f"{sc.name} seed={args.seed} status={res.status} heights={m['heights']} "
          f"committed={m['committed_tx']} throughput={m['throughput']} rounds={m['rounds_per_height']} "
          f"removals={m['removals']} abort_rate={m['abort_rate']}")
    for line in rep.lines():
        print("  " + line)
    if not res.ok:
        print(f"liveness failure: {res.error}", file=sys.stderr)
        return EXIT_LIVENESS
    if not rep.ok:
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_compare(args) -> int:
    sc = load_scenario(args.scenario)
    rows = {}
    code = EXIT_OK
    for mode in ("flextender", "eov"):
        tp, ab, rm = [], [], []
        for seed in range(args.seeds):
            res = run_scenario(replace(sc, mode=mode), seed)
            if not res.ok:
                code = EXIT_LIVENESS
            if not audit(res.trace).ok:
                code = max(code, EXIT_INVARIANT)
            tp.append(res.metrics["throughput"])
            ab.append(res.metrics["abort_rate"])
            rm.append(sum(res.metrics["removals"].values()))
        rows[mode] = (sum(tp) / len(tp), sum(ab) / len(ab), sum(rm) / len(rm))
    for mode, (tp, ab, rm) in rows.items():
        print(f"{mode:10s} throughput={tp:.3f} abort_rate={ab:.6f} removals={rm:.2f}")
    eov_tp = rows["eov"][0]
    ratio = rows["flextender"][0] / eov_tp if eov_tp else float("inf")
    print(f"throughput ratio flextender/eov = {ratio:.3f}")
    return code


def cmd_audit(args) -> int:
    rep = audit(read_trace(args.trace))
    for line in rep.lines():
        print(line)
    return EXIT_OK if rep.ok else EXIT_INVARIANT


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    try:
        if args.cmd == "run":
            return cmd_run(args)
        if args.cmd == "compare":
            return cmd_compare(args)
        if args.cmd == "audit":
            return cmd_audit(args)
        for name in builtin_scenarios():
            print(name)
        return EXIT_OK
    except ScenarioError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceCorrupt as e:
        print(f"TRACE_CORRUPT: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
