"""``kvbench``: run scenarios and compare reports.

Examples::

    kvbench run --scenario cpu_offload --workload qa.json --config tiers.toml --out report.json
    kvbench compare blocking.json layerwise.json
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .report import RunReport, format_compare, report_compare
from .scenarios import SCENARIOS, ConfigError, load_config, run_scenario
from .workloads import WorkloadSpec


def _workload(path: str | None, seed: int | None) -> WorkloadSpec:
    d = {}
    if path:
        with open(path) as f:
            d = json.load(f)
    if seed is not None:
        d["seed"] = seed
    return WorkloadSpec.from_dict(d)


def cmd_run(args) -> int:
    try:
        spec = _workload(args.workload, args.seed)
        cfg = load_config(args.config)
    except (OSError, ValueError) as e:
        print(f"kvbench: {e}", file=sys.stderr)
        return 2
    report = run_scenario(args.scenario, spec, cfg, check_outputs=not args.no_check)
    if args.out:
        report.save(args.out)
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            f.write(report.to_csv())
    a = report.aggregates
    summary = {
        "scenario": report.scenario, "queries": a["queries"], "ttft_mean": a["ttft"]["mean"],
        "ttft_p95": a["ttft"]["p95"], "itl_mean": a["itl"]["mean"], "hit_ratio_round2plus": a["hit_ratio_round2plus"],
        "outputs_match": report.outputs_match,
    }
    print(json.dumps(summary, indent=2))
    return 0 if report.outputs_match is not False else 1


def cmd_compare(args) -> int:
    cmp = report_compare(RunReport.load(args.a), RunReport.load(args.b))
    print(json.dumps(cmp, indent=2) if args.json else format_compare(cmp))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvbench", description="KV cache benchmark harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one scenario and write a report")
    r.add_argument("--scenario", choices=SCENARIOS, required=True)
    r.add_argument("--workload", help="workload spec JSON (defaults apply to missing fields)")
    r.add_argument("--config", help="topology and cost-model config (.toml or .json)")
    r.add_argument("--out", help="report JSON path; a .csv of per-query rows is written next to it")
    r.add_argument("--csv", help="extra path for the per-query CSV")
    r.add_argument("--seed", type=int, help="override the workload seed")
    r.add_argument("--no-check", action="store_true", help="skip the cache-free output comparison")
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("compare", help="compare two reports (b relative to a)")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--json", action="store_true")
    c.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"kvbench: config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
