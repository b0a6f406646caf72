"""Scenario loading, workloads, runs, metrics, trace audit and the CLI."""
from .audit import AuditReport, audit
from .runner import RunResult, run_scenario
from .scenario import Scenario, ScenarioError, load_scenario, parse_scenario, scenario_from_dict
from .workload import WorkloadKind, WorkloadSpec, generate_workload

__all__ = ["AuditReport", "audit", "RunResult", "run_scenario", "Scenario", "ScenarioError", "load_scenario",
           "parse_scenario", "scenario_from_dict", "WorkloadKind", "WorkloadSpec", "generate_workload"]
