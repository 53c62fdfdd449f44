"""Timing and chunk-read sweeps of time-averaged maps, accumulation vs brute force."""

from __future__ import annotations

import csv
import logging
import time
from collections.abc import Iterable
from dataclasses import dataclass, field

from . import metadata as md
from .coremodel import WEIGHTED, RegionQuery
from .errors import ConfigError, DataError
from .oracle import brute_aggregate, nrmsd
from .query import QueryEngine
from .storeio import read_attrs

log = logging.getLogger(__name__)

FIELDS = ("slices", "acc_seconds", "brute_seconds", "acc_reads", "brute_reads", "nrmsd")


@dataclass(frozen=True)
class BenchConfig:
    """One benchmark sweep.

    ``sweep`` lists window lengths in time slices, ascending. Brute force is
    skipped for windows longer than ``brute_max_slices`` (``None`` = never).
    """

    shape: tuple[int, ...] = (360, 720, 2000)
    chunks: tuple[int, ...] = (36, 72, 200)
    strides: dict = field(default_factory=lambda: {"time": 2})
    sweep: tuple[int, ...] = (400, 800, 1600)
    seed: int = 0
    output: str | None = None
    start: int = 0
    time_dim: str = "time"
    weighting: str = WEIGHTED
    brute_max_slices: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "sweep", tuple(int(n) for n in self.sweep))
        if not self.sweep:
            raise ConfigError("sweep must list at least one window length")
        if any(b <= a for a, b in zip(self.sweep, self.sweep[1:])):
            raise ConfigError(f"sweep values must be strictly ascending, got {list(self.sweep)}")
        if self.sweep[0] < 1 or self.start < 0:
            raise ConfigError("window lengths must be positive and start non-negative")


def run_bench(store, variable: str, cfg: BenchConfig) -> list[dict]:
    """One row per sweep point; brute columns are ``None`` when skipped."""
    if not read_attrs(store, md.group_path(variable)):
        raise DataError(f"no accumulation group for {variable!r}; run `chunkaccum generate` first")
    engine = QueryEngine(store, variable)
    grid = engine.grid
    n = grid.shape[grid.axis(cfg.time_dim)]
    rows = []
    for slices in cfg.sweep:
        if cfg.start + slices > n:
            raise ConfigError(f"window of {slices} slices from {cfg.start} exceeds {n} along {cfg.time_dim!r}")
        q = RegionQuery.build(grid, {cfg.time_dim: (cfg.start, cfg.start + slices)}, cfg.weighting)
        t0 = time.perf_counter()
        acc = engine.region_aggregate(q)
        row = {
            "slices": slices,
            "acc_seconds": time.perf_counter() - t0,
            "brute_seconds": None,
            "acc_reads": acc.chunk_reads,
            "brute_reads": None,
            "nrmsd": None,
        }
        if cfg.brute_max_slices is None or slices <= cfg.brute_max_slices:
            t0 = time.perf_counter()
            ref = brute_aggregate(store, variable, q)
            row["brute_seconds"] = time.perf_counter() - t0
            row["brute_reads"] = ref.chunk_reads
            row["nrmsd"] = nrmsd(ref.average, acc.average, engine.raw.fill_value).nrmsd
        log.info("bench %s", row)
        rows.append(row)
    return rows


def write_rows(rows: Iterable[dict], out) -> None:
    writer = csv.DictWriter(out, fieldnames=FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: "" if row[k] is None else row[k] for k in FIELDS})
