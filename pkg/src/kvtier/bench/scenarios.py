"""Scenario topologies and the runner that turns a schedule into a report.

* ``cpu_offload``: one engine whose store has a RAM tier and optionally a
  local disk tier.
* ``central_storage``: a shared cache server plus ``instances`` engines,
  each with a local RAM tier and the server as a remote tier. Queries are
  assigned round-robin, so a session's next round usually lands on another
  engine and can only hit through the server.
* ``pd``: a prefill engine pushing KV to a decode engine.

Configuration is a dict (loaded from TOML or JSON) with the sections
``model``, ``cost``, ``engine``, ``tiers``, ``remote`` and ``pd``. Every
section and key is checked before anything starts.
"""

from __future__ import annotations

import json
import logging
import math
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..connector import BLOCKING, LAYERWISE
from ..kv import ModelSpec
from ..sim.clock import make_clock
from ..sim.cost import CostModel
from ..sim.engine import SimEngine, run_engines
from ..sim.pd import PdPair
from ..storage.backends import LocalDiskBackend, RamPoolBackend
from ..storage.engine import StorageEngine
from ..storage.tiers import DISK, RAM, DeviceModel, Remote
from ..transfer.remote import RemoteBackend
from ..transfer.server import serve
from .report import RunReport, record_row
from .workloads import Schedule, WorkloadSpec, fill_expected, generate_workload

logger = logging.getLogger(__name__)

SCENARIOS = ("cpu_offload", "central_storage", "pd")
MB = 1 << 20


class ConfigError(ValueError):
    pass


# Defaults: a small KV layout (1 KiB per token) keeps the default workload
# of 40 users with 10K-token documents within a few hundred MB.
DEFAULTS = {
    "model": {"num_layers": 8, "bytes_per_token_per_layer": 128, "page_tokens": 16, "model_tag": "bench-8x128"},
    "cost": {"a": 2e-5, "b": 1e-10, "decode_cost_per_token": 0.02},
    "engine": {"mode": LAYERWISE, "clock": "virtual", "max_concurrent": 8, "num_pages": 0, "chunk_size": 256,
               "prefetch": False, "store_decode": True, "staging_mb": 0, "instances": 2},
    "tiers": {
        "ram": {"capacity_mb": 1024, "bandwidth": 2.0e10, "latency": 1e-6},
        "disk": {"enabled": False, "path": "", "capacity_mb": 4096, "bandwidth": 2.0e9, "latency": 1e-4},
    },
    "remote": {"capacity_mb": 2048, "bandwidth": 1.25e9, "latency": 2e-4, "local_ram_mb": 256},
    "pd": {"prefill_pages": 0, "decode_pages": 0, "link_bandwidth": 2.5e10, "link_latency": 1e-5},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = dict(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            out[k] = _merge(base[k], v, where + ".")
        else:
            if isinstance(base[k], bool) != isinstance(v, bool) or (
                    isinstance(base[k], (int, float)) and not isinstance(v, (int, float))):
                raise ConfigError(f"config key {where!r} has the wrong type ({type(v).__name__})")
            out[k] = v
    return out


@dataclass
class BenchConfig:
    """Validated configuration for one run."""

    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        self.raw = _merge(DEFAULTS, self.raw)
        e = self.raw["engine"]
        if e["mode"] not in (LAYERWISE, BLOCKING):
            raise ConfigError(f"engine.mode must be {LAYERWISE!r} or {BLOCKING!r}")
        if e["clock"] not in ("virtual", "wall"):
            raise ConfigError("engine.clock must be 'virtual' or 'wall'")
        if e["max_concurrent"] < 1 or e["instances"] < 1:
            raise ConfigError("engine.max_concurrent and engine.instances must be >= 1")
        try:
            self.model.check_chunk_size(e["chunk_size"])
            self.cost  # noqa: B018 - validates
        except ValueError as err:
            raise ConfigError(str(err)) from None
        for name, t in self.raw["tiers"].items():
            if t["capacity_mb"] <= 0 or t["bandwidth"] <= 0 or t["latency"] < 0:
                raise ConfigError(f"tiers.{name}: capacity and bandwidth must be positive")
        if self.raw["tiers"]["ram"]["capacity_mb"] * MB < self.model.chunk_bytes(e["chunk_size"]):
            raise ConfigError("tiers.ram is smaller than one chunk")

    @property
    def model(self) -> ModelSpec:
        return ModelSpec(**self.raw["model"])

    @property
    def cost(self) -> CostModel:
        return CostModel(num_layers=self.raw["model"]["num_layers"], **self.raw["cost"])

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.raw))


def load_config(path=None) -> BenchConfig:
    """Read a TOML (``.toml``) or JSON config; ``None`` gives the defaults."""
    if path is None:
        return BenchConfig({})
    p = Path(path)
    try:
        if p.suffix == ".toml":
            with open(p, "rb") as f:
                raw = tomllib.load(f)
        else:
            with open(p) as f:
                raw = json.load(f)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read config {p}: {e}") from None
    return BenchConfig(raw)


def _device(d: dict) -> DeviceModel:
    return DeviceModel(bandwidth=float(d["bandwidth"]), latency=float(d["latency"]))


def _pages_needed(model: ModelSpec, schedule: Schedule, concurrent: int) -> int:
    biggest = max((len(q.tokens) + q.max_out for q in schedule.queries), default=1)
    per_query = -(-biggest // model.page_tokens) * model.num_layers
    return per_query * concurrent


def _bytes(stores: dict[str, StorageEngine]) -> dict:
    out: dict[str, dict[str, int]] = {}
    for store in stores.values():
        for tier, n in store.bytes_read.items():
            out.setdefault(str(tier), {"read": 0, "written": 0})["read"] += int(n)
        for tier, n in store.bytes_written.items():
            out.setdefault(str(tier), {"read": 0, "written": 0})["written"] += int(n)
    return dict(sorted(out.items()))


class Topology:
    """Engines and servers for one scenario; a context manager that tears everything down."""

    def __init__(self, scenario: str, cfg: BenchConfig, schedule: Schedule, vocab: int = 32000):
        if scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
        self.scenario = scenario
        self.cfg = cfg
        self.model = cfg.model
        self.cost = cfg.cost
        self.vocab = vocab
        self.engines: list[SimEngine] = []
        self.stores: dict[str, StorageEngine] = {}
        self.servers: list = []
        self.pair: PdPair | None = None
        self._tmp: tempfile.TemporaryDirectory | None = None
        e = cfg.raw["engine"]
        self.pages = e["num_pages"] or _pages_needed(self.model, schedule, e["max_concurrent"])
        if self.pages < _pages_needed(self.model, schedule, 1):
            raise ConfigError(f"engine.num_pages={self.pages} cannot hold the largest query")
        try:
            getattr(self, "_build_" + scenario)()
        except BaseException:
            self.close()
            raise

    # -- builders -------------------------------------------------------------

    def _ram(self, capacity_mb: float) -> RamPoolBackend:
        slot = self.model.chunk_bytes(self.cfg.raw["engine"]["chunk_size"])
        return RamPoolBackend(int(capacity_mb * MB), slot, _device(self.cfg.raw["tiers"]["ram"]))

    def _disk(self) -> LocalDiskBackend:
        d = self.cfg.raw["tiers"]["disk"]
        root = d["path"]
        if not root:
            self._tmp = tempfile.TemporaryDirectory(prefix="kvbench-")
            root = self._tmp.name
        return LocalDiskBackend(root, int(d["capacity_mb"] * MB), _device(d))

    def _engine(self, name: str, store: StorageEngine | None, finished: dict) -> SimEngine:
        e = self.cfg.raw["engine"]
        kw = {}
        if e["staging_mb"]:
            kw["staging_bytes"] = int(e["staging_mb"] * MB)
        eng = SimEngine(self.model, self.pages, store=store, mode=e["mode"], clock=make_clock(e["clock"]),
                        cost=self.cost, vocab=self.vocab, max_concurrent=e["max_concurrent"],
                        store_decode=e["store_decode"], name=name, finished=finished, connector_kwargs=kw,
                        prefetch=e["prefetch"])
        self.engines.append(eng)
        return eng

    def _store(self, name: str, backends: list, default_tiers) -> StorageEngine:
        e = self.cfg.raw["engine"]
        store = StorageEngine(self.model, backends, chunk_size=e["chunk_size"], default_tiers=default_tiers,
                              realtime=e["clock"] == "wall")
        self.stores[name] = store
        return store

    def _build_cpu_offload(self) -> None:
        backends = [self._ram(self.cfg.raw["tiers"]["ram"]["capacity_mb"])]
        tiers = [RAM]
        if self.cfg.raw["tiers"]["disk"]["enabled"]:
            backends.append(self._disk())
            tiers.append(DISK)
        self._engine("engine0", self._store("engine0", backends, tiers), {})

    def _build_central_storage(self) -> None:
        r = self.cfg.raw["remote"]
        server_store = self._store("central", [self._ram(r["capacity_mb"])], [RAM])
        server = serve("127.0.0.1:0", server_store)
        self.servers.append(server)
        finished: dict = {}
        link = DeviceModel(bandwidth=float(r["bandwidth"]), latency=float(r["latency"]))
        for i in range(self.cfg.raw["engine"]["instances"]):
            name = f"engine{i}"
            remote = RemoteBackend("central", server.endpoint, link)
            store = self._store(name, [self._ram(r["local_ram_mb"]), remote], [RAM, Remote("central")])
            self._engine(name, store, finished)

    def _build_pd(self) -> None:
        p = self.cfg.raw["pd"]
        e = self.cfg.raw["engine"]
        self.pair = PdPair(self.model, prefill_pages=p["prefill_pages"] or self.pages,
                           decode_pages=p["decode_pages"] or self.pages, cost=self.cost, clock=e["clock"],
                           link=DeviceModel(bandwidth=float(p["link_bandwidth"]), latency=float(p["link_latency"])),
                           vocab=self.vocab, max_concurrent=e["max_concurrent"], chunk_size=e["chunk_size"])

    # -- run --------------------------------------------------------------------

    def run(self, schedule: Schedule) -> dict:
        if self.pair is not None:
            return self.pair.run(schedule.queries)
        for i, q in enumerate(schedule.queries):
            self.engines[i % len(self.engines)].submit(q)
        return run_engines(self.engines)

    def bytes_moved(self) -> dict:
        if self.pair is not None:
            return {"link": {"read": 0, "written": int(self.pair.prefiller.pushed_bytes)}}
        out = _bytes({k: v for k, v in self.stores.items() if k != "central"})
        if "central" in self.stores:
            out["server:ram"] = _bytes({"central": self.stores["central"]})["ram"]
        return out

    def close(self) -> None:
        for e in self.engines:
            e.close()
        if self.pair is not None:
            self.pair.close()
        for s in self.stores.values():
            for b in s.backends.values():
                if isinstance(b, RemoteBackend):
                    b.close()
            s.close()
        for srv in self.servers:
            srv.close()
        if self._tmp is not None:
            self._tmp.cleanup()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_scenario(scenario: str, workload: WorkloadSpec | Schedule, config: BenchConfig | dict | None = None,
                 *, check_outputs: bool = True) -> RunReport:
    """Build the scenario's topology, run the schedule and report.

    Args:
        scenario: ``cpu_offload``, ``central_storage`` or ``pd``.
        workload: a spec (generated here) or an already generated schedule.
        config: run configuration; defaults when ``None``.
        check_outputs: compare every output with the cache-free reference.

    Returns:
        The run's :class:`RunReport`.
    """
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    cfg = config if isinstance(config, BenchConfig) else BenchConfig(config or {})
    model = cfg.model
    if isinstance(workload, WorkloadSpec):
        spec = workload
        schedule = generate_workload(spec, model)
        vocab = spec.vocab
        wl = spec.to_dict()
    else:
        schedule = workload
        vocab = 32000
        wl = {"kind": "schedule", "queries": len(schedule)}
    if not schedule.queries:
        raise ConfigError("the workload has no queries")
    with Topology(scenario, cfg, schedule, vocab) as topo:
        records = topo.run(schedule)
        bytes_moved = topo.bytes_moved()
        extra = {"engines": [e.name for e in topo.engines] or ["prefiller", "decoder"], "num_pages": topo.pages}
        if topo.pair is not None:
            extra["first_token_mismatches"] = topo.pair.decoder.first_token_mismatches
    by_id = {q.query_id: q for q in schedule.queries}
    rows = [record_row(records[q.query_id], q) for q in schedule.queries]
    outputs_match, mismatches = None, []
    if check_outputs:
        fill_expected(schedule, model, vocab)
        mismatches = [str(qid) for qid, q in by_id.items() if records[qid].outputs != list(schedule.expected[qid])]
        outputs_match = not mismatches
    report = RunReport(scenario, wl, cfg.to_dict(), rows, bytes_moved=bytes_moved, outputs_match=outputs_match,
                       mismatches=mismatches, extra=extra)
    logger.info("%s: %d queries, mean TTFT %.4f s, outputs_match=%s", scenario, len(rows),
                report.aggregates["ttft"]["mean"] or math.nan, outputs_match)
    return report
