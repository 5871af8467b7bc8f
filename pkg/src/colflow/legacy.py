"""Per-file batch baseline: skim jobs, multi-pass jobs, local merge.

The measurement baseline the distributed mode is compared against. Every
input file becomes one batch job, executed on the same cluster workers the
distributed mode uses, with no retries: a failed job fails the run.

Preselection jobs download a payload blob first (the job sandbox, counted
into bytes_read), run the nominal universe once over the whole file and
write a skim. Postselection jobs traverse their file once for nominal plus
once per topology variation; weight variations ride the nominal pass. Each
postselection job writes a result file; a final local merge folds these
together in file order and its duration is reported separately, since the
distributed mode has no such step.

Jobs are throttled client-side in waves of ``parallel_jobs``, mimicking a
fixed-size batch queue. Job ids are global across waves, so skim part
names never collide.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, replace
from enum import Enum

from .cluster.client import ClusterError, submit_run
from .cluster.worker import read_result_file
from .colstore import open_dataset
from .engine import MULTI_PASS, EntryRange, PartialResult, only_universe
from .graph import SnapshotStage, VariationKind, VaryStage, load_spec
from .metrics import JobRecord
from .proto import Task


class LegacyError(Exception):
    """Bad job plan, failed job, or mismatched job outputs."""


class Phase(Enum):
    PRESELECTION = "pre"
    POSTSELECTION = "post"


@dataclass(frozen=True)
class LegacyJobSpec:
    """One batch job: a whole input file plus its sequential pass plan."""

    job_id: int
    file: str
    phase: Phase
    passes: tuple[str, ...]
    payload_bytes: int = 0

    def __post_init__(self):
        if self.phase is Phase.PRESELECTION and self.passes != ("nominal",):
            raise LegacyError("preselection jobs run exactly one nominal pass")
        if self.phase is Phase.POSTSELECTION and (not self.passes or self.passes[0] != "nominal"):
            raise LegacyError("postselection pass list must start with nominal")
        if self.payload_bytes < 0:
            raise LegacyError("payload_bytes must be >= 0")


@dataclass
class LegacyRunReport:
    """One record per job, plus the merged outcome of the whole run."""

    records: tuple[JobRecord, ...]
    merge_duration: float
    partial: PartialResult
    wall_time: float  # job execution end to end, queue waits included
    client_bytes: int  # orchestrator metadata reads (sizing each input)

    @property
    def total_events(self) -> int:
        return self.partial.events

    @property
    def network_read(self) -> int:
        """Every byte this run pulled: job reads plus orchestrator reads."""
        return sum(r.bytes_read for r in self.records) + self.client_bytes

    @property
    def total_time(self) -> float:
        return self.wall_time + self.merge_duration


def plan_legacy_jobs(
    document: str,
    files: list[str],
    phase: Phase,
    payload_bytes: int = 0,
) -> list[LegacyJobSpec]:
    """One job per file; pass plans derived from the pipeline's vary stages."""
    if not files:
        raise LegacyError("no input files")
    spec = load_spec(document)
    if phase is Phase.PRESELECTION:
        if not any(isinstance(s, SnapshotStage) for s in spec.stages):
            raise LegacyError("preselection pipeline must contain a snapshot stage")
        passes = ("nominal",)
    else:
        topology = [
            t
            for s in spec.stages
            if isinstance(s, VaryStage) and s.kind is VariationKind.TOPOLOGY
            for t in s.tags
        ]
        passes = ("nominal", *topology)
        payload_bytes = 0  # sandboxes are a preselection cost only
    return [LegacyJobSpec(i, f, phase, passes, payload_bytes) for i, f in enumerate(files)]


def _size_inputs(files: list[str]) -> tuple[list[int], int]:
    """Entry totals per file, and the metadata bytes spent finding out."""
    totals, meta = [], 0
    for uri in files:
        try:
            with open_dataset(uri) as h:
                totals.append(h.total_entries)
                meta += h.account.bytes_read
        except Exception as e:
            raise LegacyError(f"cannot open input {uri}: {e}") from e
    return totals, meta


def _run_jobs(
    document: str,
    tasks: list[Task],
    scheduler_address: str,
    parallel_jobs: int,
    timeout: float,
    phase: Phase,
) -> tuple[tuple[JobRecord, ...], PartialResult, float]:
    if parallel_jobs < 1:
        raise LegacyError("parallel_jobs must be >= 1")
    records: list[JobRecord] = []
    merged: PartialResult | None = None
    t0 = time.perf_counter()
    for start in range(0, len(tasks), parallel_jobs):
        wave = tuple(tasks[start : start + parallel_jobs])
        try:
            result = submit_run(
                scheduler_address, document, max_retries=0, tasks=wave, timeout=timeout
            )
        except ClusterError as e:
            raise LegacyError(f"{phase.value} job failed: {e}") from e
        records.extend(replace(r, phase=phase.value) for r in result.records)
        if merged is None:
            merged = result.partial
        else:
            merged.merge_in(result.partial)
    wall = time.perf_counter() - t0
    assert merged is not None
    return tuple(records), merged, wall


def run_legacy_preselection(
    document: str,
    files: list[str],
    *,
    scheduler_address: str,
    payload_bytes: int = 0,
    payload_uri: str = "",
    parallel_jobs: int = 4,
    timeout: float = 600.0,
) -> tuple[list[str], LegacyRunReport]:
    """Skim every file through its own single-pass nominal job.

    Returns the skim files (one per job, in job order) and the run report.
    """
    jobs = plan_legacy_jobs(document, files, Phase.PRESELECTION, payload_bytes)
    if payload_bytes > 0 and not payload_uri:
        raise LegacyError("payload_bytes set but no payload_uri to fetch from")
    totals, meta = _size_inputs(files)
    nominal = only_universe("nominal")
    tasks = [
        Task(
            j.job_id,
            "",
            EntryRange(j.file, 0, n),
            nominal,
            payload_uri=payload_uri if j.payload_bytes else "",
            payload_bytes=j.payload_bytes,
        )
        for j, n in zip(jobs, totals)
    ]
    records, merged, wall = _run_jobs(
        document, tasks, scheduler_address, parallel_jobs, timeout, Phase.PRESELECTION
    )
    if len(merged.snapshots) != len(files):
        raise LegacyError(
            f"expected one skim per job, got {len(merged.snapshots)} for {len(files)} jobs"
        )
    report = LegacyRunReport(records, 0.0, merged, wall, meta)
    return list(merged.snapshots), report


def run_legacy_postselection(
    document: str,
    skim_files: list[str],
    *,
    scheduler_address: str,
    out_dir: str,
    parallel_jobs: int = 4,
    timeout: float = 600.0,
) -> tuple[list[str], LegacyRunReport]:
    """Multi-pass histogramming jobs over the skims, then a local merge.

    Returns the per-job result files (in job order) and the run report,
    whose merged results come from those files, not from the wire.
    """
    jobs = plan_legacy_jobs(document, skim_files, Phase.POSTSELECTION)
    totals, meta = _size_inputs(skim_files)
    os.makedirs(out_dir, exist_ok=True)
    result_files = [os.path.join(out_dir, f"job{j.job_id}.res") for j in jobs]
    tasks = [
        Task(j.job_id, "", EntryRange(j.file, 0, n), MULTI_PASS, result_file=rf)
        for j, n, rf in zip(jobs, totals, result_files)
    ]
    records, _, wall = _run_jobs(
        document, tasks, scheduler_address, parallel_jobs, timeout, Phase.POSTSELECTION
    )
    merged, duration = merge_outputs(result_files)
    report = LegacyRunReport(records, duration, merged, wall, meta)
    return result_files, report


def merge_outputs(result_files: list[str]) -> tuple[PartialResult, float]:
    """Fold per-job result files in the given order; timed.

    All files must carry the same graph identity. Returns the merged
    result and the merge duration in seconds.
    """
    if not result_files:
        raise LegacyError("nothing to merge")
    t0 = time.perf_counter()
    merged: PartialResult | None = None
    want: str | None = None
    for path in result_files:
        graph_id, partial = read_result_file(path)
        if want is None:
            want, merged = graph_id, partial
        elif graph_id != want:
            raise LegacyError(
                f"result file {path} belongs to a different pipeline ({graph_id} != {want})"
            )
        else:
            merged.merge_in(partial)
    return merged, time.perf_counter() - t0
