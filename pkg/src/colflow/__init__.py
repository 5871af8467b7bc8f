"""colflow: declarative columnar analysis over a desk-scale MapReduce cluster.

A binary columnar event store with byte-accounted local/remote reads, an
expression DSL for define/filter/variation pipelines, a single-pass event
loop engine with systematic-variation universes, a scheduler/worker runtime,
a per-file multi-pass "legacy batch" baseline, and a benchmark harness that
compares the two workflows.
"""

__version__ = "0.1.0"
