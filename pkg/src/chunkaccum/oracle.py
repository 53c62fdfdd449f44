"""Brute-force reference aggregation and accuracy metrics.

Nothing here touches accumulation datasets: every result comes from a full
scan of the raw chunks intersecting the query region.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import metadata as md
from .accgen import COUNT, WeightSource, masked_terms, raw_grid
from .coremodel import WEIGHTED, RegionQuery
from .errors import ConfigError
from .query import RAW, AggregateResult
from .storeio import ChunkCache, read_attrs, store_counter

log = logging.getLogger(__name__)

# largest number of raw elements a single brute-force query may scan
MAX_ELEMENTS = 1 << 31


def weight_arrays_for(store, variable: str) -> tuple[str, ...]:
    """Weight arrays recorded in the accumulation group, if one exists."""
    doc = read_attrs(store, md.group_path(variable))
    return tuple(doc.get(md.WEIGHT_ARRAYS_KEY, ()))


def brute_aggregate(
    store,
    variable: str,
    q: RegionQuery,
    weight_arrays: tuple[str, ...] | None = None,
    max_elements: int = MAX_ELEMENTS,
) -> AggregateResult:
    """Aggregate ``q`` by summing every raw element of the region.

    Weights default to those recorded for the variable's accumulation group.
    Missing elements (fill value or non-finite) carry zero weight; unweighted
    averages divide by the number of valid elements.
    """
    raw, grid = raw_grid(store, variable)
    q.validate(grid)
    total = q.element_count * math.prod(q.kept_shape)
    if total > max_elements:
        raise ConfigError(
            f"brute-force scan of {total} elements exceeds the ceiling of {max_elements}"
        )
    if weight_arrays is None:
        weight_arrays = weight_arrays_for(store, variable)
    kinds = [md.WEIGHTED, md.WEIGHTS] if q.weighting == WEIGHTED else [md.UNWEIGHTED, COUNT]

    bounds = {d: (s, e) for d, s, e in zip(q.agg_dims, q.starts, q.ends)}
    bounds.update({d: (s, e) for d, s, e in q.kept_bounds})
    box = [bounds[d] for d in grid.dim_names]
    agg_axes = tuple(grid.axis(d) for d in q.agg_dims)
    kept_axes = [a for a in range(grid.ndim) if a not in agg_axes]

    sums = np.zeros(q.kept_shape)
    wsum = np.zeros(q.kept_shape)
    cache = ChunkCache()
    counter = store_counter(store)
    bytes_before = counter.snapshot()[1]
    weights = WeightSource(store, weight_arrays, grid, cache)
    spans = [grid.chunks_spanned(a, lo, hi) for a, (lo, hi) in enumerate(box)]
    for coord in np.ndindex(*(len(s) for s in spans)):
        coord = tuple(s[i] for s, i in zip(spans, coord))
        part = []
        for a, c in enumerate(coord):
            clo, chi = grid.chunk_bounds(a, c)
            part.append((max(clo, box[a][0]), min(chi, box[a][1])))
        block = raw.read([slice(*p) for p in part], cache)
        cache.evict(raw.path)
        w = weights.box(part, cache)
        t = masked_terms(block, raw.fill_value, w, kinds)
        dst = tuple(slice(part[a][0] - box[a][0], part[a][1] - box[a][0]) for a in kept_axes)
        sums[dst] += t[kinds[0]].sum(axis=agg_axes)
        wsum[dst] += t[kinds[1]].sum(axis=agg_axes)

    fill = math.nan if raw.fill_value is None else float(raw.fill_value)
    empty = wsum <= 0
    with np.errstate(invalid="ignore", divide="ignore"):
        average = np.where(empty, fill, sums / np.where(empty, 1.0, wsum))
    by_array = {RAW if path == raw.path else path: n for path, n in cache.fetches.items()}
    return AggregateResult(
        average, sums, wsum, q.kept_dims, q.kept_bounds, sum(cache.fetches.values()),
        counter.snapshot()[1] - bytes_before, by_array, int(empty.sum()),
    )


@dataclass(frozen=True)
class NrmsdReport:
    nrmsd: float
    n: int
    max: float
    min: float

    @property
    def defined(self) -> bool:
        return not math.isnan(self.nrmsd)


def nrmsd(baseline, candidate, fill_value=None) -> NrmsdReport:
    """RMS deviation of ``candidate`` from ``baseline`` over the baseline's range.

    Positions where the baseline is non-finite or equals ``fill_value`` are
    ignored. The result is NaN when the baseline range is zero.
    """
    b = np.asarray(baseline, dtype=np.float64)
    c = np.asarray(candidate, dtype=np.float64)
    if b.shape != c.shape:
        raise ValueError(f"shape mismatch: {b.shape} vs {c.shape}")
    keep = np.isfinite(b)
    if fill_value is not None:
        keep &= b != fill_value
    b, c = b[keep], c[keep]
    if b.size == 0:
        raise ValueError("nrmsd needs at least one valid baseline value")
    rmsd = math.sqrt(float(np.mean((b - c) ** 2)))
    hi, lo = float(b.max()), float(b.min())
    value = math.nan if hi == lo else rmsd / (hi - lo)
    return NrmsdReport(value, int(b.size), hi, lo)
