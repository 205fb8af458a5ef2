"""Workloads, scenario runner and reports."""

from .report import RunReport, aggregate, format_compare, hit_ratio, report_compare
from .scenarios import SCENARIOS, BenchConfig, ConfigError, Topology, load_config, run_scenario
from .workloads import Schedule, WorkloadSpec, fill_expected, generate_workload

__all__ = [
    "BenchConfig", "ConfigError", "RunReport", "SCENARIOS", "Schedule", "Topology", "WorkloadSpec", "aggregate",
    "fill_expected", "format_compare", "generate_workload", "hit_ratio", "load_config", "report_compare",
    "run_scenario",
]
