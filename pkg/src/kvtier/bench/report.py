"""Run reports: per-query rows, aggregates and comparison."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

PERCENTILES = (50, 95, 99)
SCHEMA_VERSION = 1


def _stats(values) -> dict:
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if not v.size:
        return {"count": 0, "mean": None, **{f"p{p}": None for p in PERCENTILES}}
    out = {"count": int(v.size), "mean": float(v.mean())}
    for p in PERCENTILES:
        out[f"p{p}"] = float(np.percentile(v, p))
    return out


def hit_ratio(rows: list[dict], min_round: int = 1) -> float | None:
    """Prompt tokens served from cache over prompt tokens, for rows with ``round >= min_round``."""
    sel = [r for r in rows if r.get("round", 1) >= min_round]
    total = sum(r["prompt_tokens"] for r in sel)
    return None if not total else sum(r["loaded_tokens"] for r in sel) / total


def aggregate(rows: list[dict]) -> dict:
    """Aggregates derived only from ``rows``."""
    return {
        "queries": len(rows),
        "ttft": _stats(r["ttft"] for r in rows),
        "itl": _stats(g for r in rows for g in r["itl"]),
        "e2e": _stats(r["e2e"] for r in rows),
        "ttft_cold": _stats(r["ttft"] for r in rows if not r["loaded_tokens"]),
        "ttft_warm": _stats(r["ttft"] for r in rows if r["loaded_tokens"]),
        "hit_ratio": hit_ratio(rows),
        "hit_ratio_round2plus": hit_ratio(rows, 2),
        "output_tokens": sum(r["output_tokens"] for r in rows),
    }


def record_row(rec, query) -> dict:
    """Flatten a :class:`QueryRecord` plus its query into a report row."""
    times = rec.token_times
    return {
        "query_id": str(rec.query_id),
        "session": None if query.session is None else str(query.session),
        "round": int(query.round),
        "engine": rec.engine,
        "arrival": float(rec.ready_at),
        "prompt_tokens": int(rec.prompt_tokens),
        "output_tokens": len(rec.outputs),
        "matched_tokens": int(rec.matched_tokens),
        "loaded_tokens": int(rec.loaded_tokens),
        "mode": rec.mode,
        "ttft": None if rec.ttft is None else float(rec.ttft),
        "itl": [float(x) for x in np.diff(times)] if len(times) > 1 else [],
        "e2e": float(rec.e2e),
        "details": {k: float(v) for k, v in sorted(rec.details.items())},
        "segments": {k: float(v) for k, v in sorted(rec.segments.items())},
        "loaded_from": dict(sorted(rec.loaded_from.items())),
    }


@dataclass
class RunReport:
    scenario: str
    workload: dict
    config: dict
    rows: list[dict]
    aggregates: dict = field(default_factory=dict)
    bytes_moved: dict = field(default_factory=dict)
    outputs_match: bool | None = None
    mismatches: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    schema: int = SCHEMA_VERSION

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = aggregate(self.rows)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        return cls(**d)

    @classmethod
    def load(cls, path) -> RunReport:
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())
        if str(path).endswith(".json"):
            with open(str(path)[:-5] + ".csv", "w", newline="") as f:
                f.write(self.to_csv())

    def to_csv(self) -> str:
        cols = ["query_id", "session", "round", "engine", "arrival", "prompt_tokens", "output_tokens",
                "matched_tokens", "loaded_tokens", "mode", "ttft", "itl_mean", "itl_count", "e2e"]
        seg_names = sorted({k for r in self.rows for k in r["segments"]})
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(cols + [f"seg_{s}" for s in seg_names])
        for r in self.rows:
            itl = r["itl"]
            vals = {**r, "itl_mean": float(np.mean(itl)) if itl else "", "itl_count": len(itl)}
            w.writerow([("" if vals[c] is None else vals[c]) for c in cols]
                       + [r["segments"].get(s, "") for s in seg_names])
        return buf.getvalue()

    def consistent(self, tol: float = 1e-9) -> bool:
        """Do the stored aggregates match a recomputation from the rows?"""
        return _close(self.aggregates, aggregate(self.rows), tol)


def _close(a, b, tol) -> bool:
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_close(a[k], b[k], tol) for k in a)
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return math.isclose(a, b, rel_tol=tol, abs_tol=tol)
    return a == b


def report_compare(a: RunReport, b: RunReport) -> dict:
    """Deltas and ratios (b relative to a) for TTFT/ITL/E2E aggregates, plus paired TTFT."""
    table = {}
    for metric in ("ttft", "itl", "e2e", "ttft_cold", "ttft_warm"):
        for stat in ("mean", *(f"p{p}" for p in PERCENTILES)):
            x, y = a.aggregates[metric][stat], b.aggregates[metric][stat]
            if x is None or y is None:
                continue
            table[f"{metric}.{stat}"] = {"a": x, "b": y, "delta": y - x, "ratio": (y / x) if x else None}
    for name in ("hit_ratio", "hit_ratio_round2plus"):
        x, y = a.aggregates.get(name), b.aggregates.get(name)
        if x is not None and y is not None:
            table[name] = {"a": x, "b": y, "delta": y - x, "ratio": (y / x) if x else None}
    rows_a = {r["query_id"]: r for r in a.rows}
    pairs = [(rows_a[r["query_id"]]["ttft"], r["ttft"]) for r in b.rows
             if r["query_id"] in rows_a and r["ttft"] and rows_a[r["query_id"]]["ttft"]]
    paired = {"pairs": len(pairs)}
    if pairs:
        ratios = np.array([y / x for x, y in pairs])
        paired.update({"ttft_ratio_mean": float(ratios.mean()), "ttft_ratio_p50": float(np.median(ratios)),
                       "b_faster": int((ratios < 1).sum())})
    return {"a": a.scenario, "b": b.scenario, "metrics": table, "paired": paired}


def format_compare(cmp: dict) -> str:
    lines = [f"{'metric':24s} {'a':>12s} {'b':>12s} {'delta':>12s} {'b/a':>8s}"]
    for name, m in cmp["metrics"].items():
        ratio = "" if m["ratio"] is None else f"{m['ratio']:.3f}"
        lines.append(f"{name:24s} {m['a']:12.6f} {m['b']:12.6f} {m['delta']:12.6f} {ratio:>8s}")
    p = cmp["paired"]
    if p.get("pairs"):
        lines.append(f"paired TTFT over {p['pairs']} queries: mean b/a {p['ttft_ratio_mean']:.3f}, "
                     f"b faster on {p['b_faster']}")
    return "\n".join(lines)
