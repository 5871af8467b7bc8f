"""Benchmark harness: the two workflows, head to head, on one dataset.

Four scenarios run strictly in sequence on a self-hosted local facility:

    legacy-pre    per-file single-pass skim jobs (with payload sandboxes)
    new-pre       one distributed run producing an equivalent skim
    legacy-post   per-file multi-pass histogram jobs over the legacy skim
    new-post      one distributed single-loop run over the new skim

Each scenario repeats a configurable number of times; every repeat's
byte accounting is checked for exact closure against the data server's
own served-byte counter, and the postselection results of the two
workflows are checked for per-universe agreement before the comparison
table is rendered. metrics.csv and mem.csv are rewritten after every
repeat, so an aborted benchmark still leaves the completed rows behind.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

from .cluster.client import RunResult, run_distributed
from .colstore.dataset import REMOTE_SCHEME, server_totals
from .datagen import GenConfig, generate, load_manifest, manifest_files
from .engine import PartialResult
from .facility import MiniFacility
from .hist import AccumKind, Histo1D, ScalarAccumulator
from .legacy import (
    LegacyRunReport,
    run_legacy_postselection,
    run_legacy_preselection,
)
from .metrics import (
    JobRecord,
    RunMetrics,
    aggregate,
    metrics_row,
    write_jobs_csv,
    write_mem_csv,
    write_metrics_csv,
)
from .report import BenchReport, render_report, summarize


class BenchError(Exception):
    pass


SKIM_COLUMNS = ("event_weight", "MET_pt", "nJet", "Jet_pt")

# calibrated to keep roughly 5% of generated events
PRE_SELECTION = "MET_pt > 96.0 && nJet >= 2"


@dataclass(frozen=True)
class BenchConfig:
    out_dir: str
    data_dir: str = ""  # default: <out_dir>/data
    n_files: int = 8
    events_per_file: int = 100_000
    cluster_size: int = 10_000
    seed: int = 2024
    workers: int = 4
    slots: int = 1
    repeats: int = 3
    factor: int = 3
    payload_bytes: int = 1_000_000
    parallel_jobs: int = 4
    timeout: float = 600.0

    def __post_init__(self):
        for field_name in ("n_files", "events_per_file", "cluster_size"):
            if getattr(self, field_name) < 0:
                raise BenchError(f"{field_name} must be >= 0")
        for field_name in ("workers", "slots", "repeats", "factor", "parallel_jobs"):
            if getattr(self, field_name) < 1:
                raise BenchError(f"{field_name} must be >= 1")
        if self.payload_bytes < 0:
            raise BenchError("payload_bytes must be >= 0")


def default_pre_document(files: list[str], skim_prefix: str) -> str:
    """Skim document: one cut, one control histogram, one snapshot."""
    doc = {
        "dataset": list(files),
        "stages": [
            {"op": "filter", "expr": PRE_SELECTION, "label": "skim"},
            {
                "op": "histo1d",
                "name": "h_met_skim",
                "column": "MET_pt",
                "weight": "event_weight",
                "nbins": 50,
                "xmin": 0.0,
                "xmax": 500.0,
            },
            {"op": "count", "name": "n_selected"},
            {"op": "snapshot", "columns": list(SKIM_COLUMNS), "out": skim_prefix},
        ],
    }
    return json.dumps(doc, indent=2)


def default_post_document(files: list[str]) -> str:
    """Histogramming document: 3 observables, 30 variations (8 topology).

    Every pass of a per-file multi-pass execution touches the same four
    columns, so with 8 topology variations the pass-count law predicts
    exactly 9x the nominal data volume.
    """
    stages = [
        {
            "op": "vary",
            "column": "Jet_pt",
            "kind": "topology",
            "tags": ["jes_up", "jes_down", "jer_up", "jer_down"],
            "exprs": [
                "Jet_pt * 1.05",
                "Jet_pt * 0.95",
                "Jet_pt * 1.02",
                "Jet_pt * 0.98",
            ],
        },
        {
            "op": "vary",
            "column": "MET_pt",
            "kind": "topology",
            "tags": ["met_jes_up", "met_jes_down", "met_unclust_up", "met_unclust_down"],
            "exprs": [
                "MET_pt * 1.03",
                "MET_pt * 0.97",
                "MET_pt + 5.0",
                "MET_pt - 5.0",
            ],
        },
    ]
    wtags, wexprs = [], []
    for k in range(11):
        delta = (k + 1) / 100.0
        wtags += [f"w{k}_up", f"w{k}_down"]
        wexprs += [
            f"event_weight * {1.0 + delta:.2f}",
            f"event_weight * {1.0 - delta:.2f}",
        ]
    stages.append(
        {"op": "vary", "column": "event_weight", "kind": "weight", "tags": wtags, "exprs": wexprs}
    )
    stages += [
        {"op": "define", "name": "ht", "expr": "sum(Jet_pt)"},
        {"op": "define", "name": "lead_pt", "expr": "nJet > 0 ? Jet_pt[0] : 0.0"},
        {"op": "filter", "expr": "lead_pt > 25.0", "label": "leading jet"},
    ]
    for name, col, hi in (
        ("h_ht", "ht", 1500.0),
        ("h_lead_pt", "lead_pt", 500.0),
        ("h_met", "MET_pt", 500.0),
    ):
        stages.append(
            {
                "op": "histo1d",
                "name": name,
                "column": col,
                "weight": "event_weight",
                "nbins": 50,
                "xmin": 0.0,
                "xmax": hi,
            }
        )
    stages.append({"op": "count", "name": "n_events"})
    return json.dumps({"dataset": list(files), "stages": stages}, indent=2)


def ensure_dataset(config: BenchConfig, data_dir: str) -> dict:
    """Load the manifest in data_dir, generating the dataset if absent."""
    manifest_path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        gen = GenConfig(
            n_files=config.n_files,
            events_per_file=config.events_per_file,
            cluster_size=config.cluster_size,
            seed=config.seed,
        )
        generate(gen, data_dir)
    return load_manifest(data_dir)


# --- result equivalence -------------------------------------------------------


def check_equivalence(a: PartialResult, b: PartialResult, rtol: float = 1e-9) -> None:
    """Per-universe agreement of two runs' results, within rtol per bin."""
    if set(a.universes) != set(b.universes):
        raise BenchError(
            f"universe sets differ: {sorted(a.universes)} vs {sorted(b.universes)}"
        )
    for universe in a.universes:
        ra, rb = a.universes[universe], b.universes[universe]
        if set(ra) != set(rb):
            raise BenchError(f"universe {universe!r}: result names differ")
        for name in ra:
            _check_result(universe, name, ra[name], rb[name], rtol)


def _close(x: float, y: float, rtol: float) -> bool:
    return x == y or math.isclose(x, y, rel_tol=rtol, abs_tol=0.0)


def _check_result(universe: str, name: str, x, y, rtol: float) -> None:
    where = f"universe {universe!r} result {name!r}"
    if isinstance(x, Histo1D):
        if not isinstance(y, Histo1D) or not x.same_axis(y):
            raise BenchError(f"{where}: histogram axes differ")
        if x.entries != y.entries:
            raise BenchError(f"{where}: entry counts differ ({x.entries} vs {y.entries})")
        for b in range(x.nbins + 2):
            if not _close(x.sumw[b], y.sumw[b], rtol):
                raise BenchError(
                    f"{where}: bin {b} disagrees ({x.sumw[b]!r} vs {y.sumw[b]!r})"
                )
        return
    if isinstance(x, ScalarAccumulator):
        if not isinstance(y, ScalarAccumulator) or x.kind is not y.kind:
            raise BenchError(f"{where}: accumulator kinds differ")
        if x.kind is AccumKind.COUNT:
            if x.value != y.value:
                raise BenchError(f"{where}: counts differ ({x.value} vs {y.value})")
        elif not _close(x.value, y.value, rtol):
            raise BenchError(f"{where}: sums differ ({x.value!r} vs {y.value!r})")
        return
    raise BenchError(f"{where}: unknown result type {type(x).__name__}")


# --- scenario execution -------------------------------------------------------


@dataclass
class ScenarioRun:
    """One repeat of one scenario, with its run-level accounting."""

    run_id: str
    mode: str
    phase: str
    metrics: RunMetrics
    records: tuple[JobRecord, ...]
    partial: PartialResult
    served_delta: int


@dataclass
class BenchResult:
    report: BenchReport
    table: str
    out_dir: str
    metrics_path: str
    mem_path: str
    runs: list[ScenarioRun]


def _served_uri(path: str, data_dir: str, address: str) -> str:
    rel = os.path.relpath(os.path.abspath(path), data_dir)
    if rel.startswith(".."):
        raise BenchError(f"skim {path} landed outside the served data root")
    return f"{REMOTE_SCHEME}{address}/{rel}"


class _Harness:
    """Mutable state of one benchmark execution."""

    def __init__(self, config: BenchConfig):
        self.config = config
        self.out_dir = os.path.abspath(config.out_dir)
        self.data_dir = os.path.abspath(config.data_dir or os.path.join(self.out_dir, "data"))
        self.records_dir = os.path.join(self.out_dir, "records")
        self.metrics_path = os.path.join(self.out_dir, "metrics.csv")
        self.mem_path = os.path.join(self.out_dir, "mem.csv")
        self.rows: list[dict] = []
        self.mem_rows: list[dict] = []
        self.runs: list[ScenarioRun] = []
        self.facility: MiniFacility | None = None

    def record(self, run: ScenarioRun) -> None:
        if run.metrics.network_read != run.served_delta:
            raise BenchError(
                f"{run.run_id}: client-side byte accounting ({run.metrics.network_read}) "
                f"does not match the data server ({run.served_delta})"
            )
        self.runs.append(run)
        self.rows.append(metrics_row(run.run_id, run.mode, run.phase, run.metrics))
        self.mem_rows.append(
            {
                "run_id": run.run_id,
                "mode": run.mode,
                "phase": run.phase,
                "mem_peak_bytes": run.metrics.mem_peak,
            }
        )
        # rewrite after every repeat: an aborted run keeps completed rows
        write_metrics_csv(self.metrics_path, self.rows)
        write_mem_csv(self.mem_path, self.mem_rows)
        write_jobs_csv(
            os.path.join(self.records_dir, f"{run.run_id}.csv"), list(run.records)
        )

    def repeat(self, mode: str, phase: str, k: int, fn) -> ScenarioRun:
        before, _ = server_totals(self.facility.data_address)
        run_id = f"{mode}-{phase}-r{k}"
        metrics, records, partial = fn(run_id)
        after, _ = server_totals(self.facility.data_address)
        run = ScenarioRun(
            run_id=run_id,
            mode=mode,
            phase=phase,
            metrics=metrics,
            records=records,
            partial=partial,
            served_delta=after - before,
        )
        self.record(run)
        return run


def _legacy_metrics(report: LegacyRunReport) -> RunMetrics:
    m = aggregate(list(report.records), report.total_time)
    m.network_read = report.network_read  # includes payloads and client-side sizing
    return m


def _new_metrics(result: RunResult) -> RunMetrics:
    m = aggregate(list(result.records), result.wall_time)
    m.network_read = result.network_read  # includes scheduler planning reads
    return m


def run_bench(config: BenchConfig) -> BenchResult:
    """Run all four scenarios and render the comparison."""
    h = _Harness(config)
    os.makedirs(h.out_dir, exist_ok=True)
    os.makedirs(h.records_dir, exist_ok=True)
    manifest = ensure_dataset(config, h.data_dir)

    log_dir = os.path.join(h.out_dir, "logs")
    with MiniFacility(
        h.data_dir, log_dir, n_workers=config.workers, slots=config.slots
    ) as facility:
        h.facility = facility
        files = manifest_files(manifest, base=facility.data_address)
        payload_uri = files[0] if config.payload_bytes > 0 else ""
        legacy_pre_doc = default_pre_document(
            files, os.path.join(h.data_dir, "skim_legacy", "skim")
        )
        new_pre_doc = default_pre_document(
            files, os.path.join(h.data_dir, "skim_new", "skim")
        )

        # scenario 1: legacy preselection
        legacy_skims: list[str] = []

        def legacy_pre(run_id: str):
            skims, report = run_legacy_preselection(
                legacy_pre_doc,
                files,
                scheduler_address=facility.scheduler_address,
                payload_bytes=config.payload_bytes,
                payload_uri=payload_uri,
                parallel_jobs=config.parallel_jobs,
                timeout=config.timeout,
            )
            legacy_skims[:] = skims
            return _legacy_metrics(report), report.records, report.partial

        for k in range(config.repeats):
            legacy_pre_run = h.repeat("legacy", "pre", k, legacy_pre)

        # scenario 2: new preselection
        new_skims: list[str] = []

        def new_pre(run_id: str):
            result = run_distributed(
                new_pre_doc,
                facility.scheduler_address,
                factor=config.factor,
                timeout=config.timeout,
            )
            new_skims[:] = list(result.partial.snapshots)
            return _new_metrics(result), result.records, result.partial

        for k in range(config.repeats):
            new_pre_run = h.repeat("new", "pre", k, new_pre)

        check_equivalence(legacy_pre_run.partial, new_pre_run.partial)

        legacy_skim_uris = [
            _served_uri(p, h.data_dir, facility.data_address) for p in legacy_skims
        ]
        new_skim_uris = [
            _served_uri(p, h.data_dir, facility.data_address) for p in new_skims
        ]
        legacy_post_doc = default_post_document(legacy_skim_uris)
        new_post_doc = default_post_document(new_skim_uris)
        jobs_dir = os.path.join(h.out_dir, "legacy_jobs")

        # scenario 3: legacy postselection over the legacy skim
        def legacy_post(run_id: str):
            _, report = run_legacy_postselection(
                legacy_post_doc,
                legacy_skim_uris,
                scheduler_address=facility.scheduler_address,
                out_dir=jobs_dir,
                parallel_jobs=config.parallel_jobs,
                timeout=config.timeout,
            )
            return _legacy_metrics(report), report.records, report.partial

        for k in range(config.repeats):
            legacy_post_run = h.repeat("legacy", "post", k, legacy_post)

        # scenario 4: new postselection over the new skim
        def new_post(run_id: str):
            result = run_distributed(
                new_post_doc,
                facility.scheduler_address,
                factor=config.factor,
                timeout=config.timeout,
            )
            return _new_metrics(result), result.records, result.partial

        for k in range(config.repeats):
            new_post_run = h.repeat("new", "post", k, new_post)

        check_equivalence(legacy_post_run.partial, new_post_run.partial)

    report = summarize(h.rows)
    table = render_report(report, h.mem_rows)
    with open(os.path.join(h.out_dir, "table.txt"), "w") as f:
        f.write(table)
    return BenchResult(
        report=report,
        table=table,
        out_dir=h.out_dir,
        metrics_path=h.metrics_path,
        mem_path=h.mem_path,
        runs=h.runs,
    )
