"""Region aggregation from accumulation datasets.

A prefix sum at an endpoint ``e`` over aggregated dimensions ``A`` splits
each ``[0, e_d]`` at the last common slot boundary ``P_d <= e_d + 1``. For every
subset ``T`` of ``A`` the block with ``T`` dims in ``[0, P_d)`` and the other
``A`` dims in ``[P_d, e_d]`` is read from ``acc_T`` (one slot along ``T``, a
short raw range elsewhere); ``T = ()`` is a plain raw scan. Box sums follow by
inclusion-exclusion over the ``2**len(A)`` corners.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections import Counter
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metadata as md
from .accgen import COUNT, WeightSource, load_group_attrs, masked_terms, raw_grid, slot_boundaries
from .coremodel import (
    UNWEIGHTED,
    WEIGHTED,
    DimSubset,
    RegionQuery,
    enumerate_corners,
    subset_lattice,
)
from .errors import BoundsError, CapabilityError, ConfigError
from .storeio import ChunkCache, ZArray, store_counter

log = logging.getLogger(__name__)

RAW = "raw"
# kept-dim tile budget: tile elements times the worst-case residual extent
TILE_BUDGET = 1 << 22
# relative size below which a corner-combined weight total counts as zero
EMPTY_TOLERANCE = 1e-12


@dataclass(frozen=True)
class PrefixTerm:
    subset: DimSubset
    source: str
    slots: tuple[tuple[str, int], ...]
    ranges: tuple[tuple[str, int, int], ...]


@dataclass
class CompositePrefix:
    endpoint: tuple[int, ...]
    agg_dims: DimSubset
    terms: list[PrefixTerm]
    value: np.ndarray
    weight: np.ndarray


@dataclass
class AggregateResult:
    average: np.ndarray
    sums: np.ndarray
    weights: np.ndarray
    kept_dims: DimSubset
    kept_bounds: tuple[tuple[str, int, int], ...]
    chunk_reads: int = 0
    bytes_read: int = 0
    reads_by_array: dict = field(default_factory=dict)
    empty: int = 0

    @property
    def raw_reads(self) -> int:
        return self.reads_by_array.get(RAW, 0)


@dataclass(frozen=True)
class _Sources:
    """Numerator/denominator dataset names for every non-empty subset of A."""

    agg_dims: DimSubset
    weighting: str
    numerator: dict
    denominator: dict
    # per aggregated dim: {boundary: {dataset: slot}}
    slots: dict
    geometric: bool = False


class QueryEngine:
    """Read-only aggregation over one raw variable and its accumulation group."""

    def __init__(self, store, variable: str, workers: int | None = None):
        self.store = store
        self.variable = variable
        self.raw, self.grid = raw_grid(store, variable)
        self.attrs = load_group_attrs(store, variable, self.grid)
        self.group = md.group_path(variable)
        self.weights = WeightSource(store, self.attrs.weight_arrays, self.grid)
        self.workers = workers
        self._arrays: dict[str, tuple[ZArray, md.AccumulationDatasetAttrs]] = {}
        self._sources: dict[tuple, _Sources] = {}

    # -- dataset discovery ---------------------------------------------------

    def dataset(self, name: str) -> tuple[ZArray, md.AccumulationDatasetAttrs]:
        if name not in self._arrays:
            arr = ZArray.open(self.store, f"{self.group}/{name}")
            attrs = md.AccumulationDatasetAttrs.from_json(arr.attrs)
            if attrs.array_dimensions != self.grid.dim_names:
                raise ConfigError(
                    f"{name!r} dimensions {attrs.array_dimensions} differ from {self.grid.dim_names}"
                )
            self._arrays[name] = (arr, attrs)
        return self._arrays[name]

    def sources(self, agg_dims: Sequence[str], weighting: str = WEIGHTED) -> _Sources:
        """Resolve and check the datasets a query over ``agg_dims`` needs."""
        agg = self.grid.canonical(agg_dims)
        key = (agg, weighting)
        if key in self._sources:
            return self._sources[key]
        unit = self.weights.is_unit
        num, den = {}, {}
        geometric = False
        for subset in subset_lattice(agg)[1:]:
            if weighting == WEIGHTED:
                n = self.attrs.lookup(subset, md.WEIGHTED)
                d = self.attrs.lookup(subset, md.WEIGHTS)
                missing = md.WEIGHTED if n is None else md.WEIGHTS if d is None else None
            elif weighting == UNWEIGHTED:
                n = self.attrs.lookup(subset, md.UNWEIGHTED)
                d = self.dataset(n)[1].count_dataset if n is not None else None
                if n is None and unit:
                    n = self.attrs.lookup(subset, md.WEIGHTED)
                    d = self.attrs.lookup(subset, md.WEIGHTS)
                missing = md.UNWEIGHTED if n is None else None
                if n is not None and d is None:
                    geometric = True
            else:
                raise ConfigError(f"unknown weighting {weighting!r}")
            if missing is not None:
                raise CapabilityError(
                    f"no {missing} accumulation along {'+'.join(subset)} in {self.group!r}",
                    subset=subset, kind=missing,
                )
            num[subset], den[subset] = n, d
        if geometric:
            log.warning(
                "unweighted accumulation in %s has no count dataset; dividing by element "
                "counts (valid only for gap-free data)", self.group,
            )
            den = {s: None for s in den}

        slots = {}
        for d in agg:
            a = self.grid.axis(d)
            common = None
            per_ds = {}
            for subset, name in [*num.items(), *den.items()]:
                if d not in subset or name is None:
                    continue
                arr, attrs = self.dataset(name)
                bounds = slot_boundaries(
                    self.grid.shape[a], self.grid.chunk_shape[a], attrs.stride_of(d), arr.shape[a]
                )
                per_ds[name] = {b: s for s, b in enumerate(bounds)}
                common = set(bounds) if common is None else common & set(bounds)
            slots[d] = {b: {n: m[b] for n, m in per_ds.items()} for b in sorted(common or ())}
        src = _Sources(agg, weighting, num, den, slots, geometric)
        self._sources[key] = src
        return src

    # -- prefix evaluation ---------------------------------------------------

    def _split(self, src: _Sources, endpoint: Sequence[int]) -> list[int]:
        out = []
        for d, e in zip(src.agg_dims, endpoint):
            best = 0
            for b in src.slots[d]:
                if b <= e + 1:
                    best = b
            out.append(best)
        return out

    def _prefix(self, src: _Sources, endpoint, kept_box, cache, raw_cache=None, record_terms=False):
        grid = self.grid
        raw_cache = cache if raw_cache is None else raw_cache
        agg = src.agg_dims
        agg_axes = [grid.axis(d) for d in agg]
        kept_shape = tuple(hi - lo for _, lo, hi in kept_box)
        value = np.zeros(kept_shape)
        weight = np.zeros(kept_shape)
        terms = []
        if any(e < 0 for e in endpoint):
            return value, weight, terms
        split = self._split(src, endpoint)
        kept_sel = {d: (lo, hi) for d, lo, hi in kept_box}

        for subset in subset_lattice(agg):
            if any(split[agg.index(d)] == 0 for d in subset):
                continue
            ranges = [
                (d, split[i], e + 1) for i, (d, e) in enumerate(zip(agg, endpoint)) if d not in subset
            ]
            if any(lo >= hi for _, lo, hi in ranges):
                continue
            rsel = {d: (lo, hi) for d, lo, hi in ranges}
            if not subset:
                box = {**kept_sel, **rsel}
                rv, rw = self._raw_terms(self._raw_kinds(src), box, raw_cache, tuple(agg_axes))
                value += rv
                if rw is not None:
                    weight += rw
                if record_terms:
                    terms.append(PrefixTerm((), self.variable, (), tuple(ranges)))
                continue

            for name, target in ((src.numerator[subset], value), (src.denominator[subset], weight)):
                if name is None:
                    continue
                arr, _ = self.dataset(name)
                sel = []
                slot_rec = []
                for d in grid.dim_names:
                    if d in subset:
                        s = src.slots[d][split[agg.index(d)]][name]
                        sel.append(slice(s, s + 1))
                        slot_rec.append((d, s))
                    else:
                        sel.append(slice(*(rsel.get(d) or kept_sel[d])))
                block = arr.read(sel, cache)
                target += block.sum(axis=tuple(agg_axes), dtype=np.float64)
                if record_terms and target is value:
                    terms.append(PrefixTerm(subset, name, tuple(slot_rec), tuple(ranges)))
        if src.geometric:
            weight += math.prod(e + 1 for e in endpoint)
        return value, weight, terms

    def _raw_terms(self, kinds, box: Mapping[str, tuple[int, int]], cache, axes):
        """Masked raw numerator/denominator over ``box`` summed along ``axes``."""
        bounds = [box[d] for d in self.grid.dim_names]
        block = self.raw.read([slice(*b) for b in bounds], cache)
        w = None if self.weights.is_unit else self.weights.box(bounds, cache)
        t = masked_terms(block, self.raw.fill_value, w, kinds)
        num = t[kinds[0]].sum(axis=axes)
        den = t[kinds[1]].sum(axis=axes) if len(kinds) > 1 else None
        return num, den

    def _raw_kinds(self, src: _Sources) -> list[str]:
        if src.weighting == WEIGHTED:
            return [md.WEIGHTED, md.WEIGHTS]
        if src.geometric:
            return [md.UNWEIGHTED]
        return [md.UNWEIGHTED, COUNT]

    def prefix_sum(
        self,
        endpoint: Mapping[str, int],
        kept: Mapping[str, int | tuple[int, int]] | None = None,
        weighting: str = WEIGHTED,
        cache: ChunkCache | None = None,
    ) -> CompositePrefix:
        """Inclusive prefix sum through ``endpoint`` (``-1`` = empty prefix).

        Kept dimensions default to their full extent; an integer selects a
        single index, a pair a half-open range.
        """
        grid = self.grid
        src = self.sources(endpoint.keys(), weighting)
        point = tuple(int(endpoint[d]) for d in src.agg_dims)
        for d, e in zip(src.agg_dims, point):
            n = grid.shape[grid.axis(d)]
            if not -1 <= e < n:
                raise BoundsError(f"endpoint {e} outside [-1, {n}) along {d!r}")
        kept = dict(kept or {})
        box, squeeze = [], []
        for i, d in enumerate(grid.complement(src.agg_dims)):
            v = kept.get(d, (0, grid.shape[grid.axis(d)]))
            if isinstance(v, (int, np.integer)):
                box.append((d, int(v), int(v) + 1))
                squeeze.append(i)
            else:
                box.append((d, int(v[0]), int(v[1])))
        value, weight, terms = self._prefix(src, point, box, cache or ChunkCache(), record_terms=True)
        if squeeze:
            value, weight = value.squeeze(tuple(squeeze)), weight.squeeze(tuple(squeeze))
        return CompositePrefix(point, src.agg_dims, terms, value, weight)

    # -- region queries ------------------------------------------------------

    def _tiles(self, src: _Sources, q: RegionQuery) -> list[tuple[tuple[str, int, int], ...]]:
        """Split the kept box into chunk-aligned tiles that bound memory per tile."""
        grid = self.grid
        residual = 1
        for d in src.agg_dims:
            a = grid.axis(d)
            names = [n for n in (*src.numerator.values(), *src.denominator.values()) if n]
            stride = max((self.dataset(n)[1].stride_of(d) for n in names), default=1)
            residual *= min(grid.shape[a], stride * grid.chunk_shape[a])
        budget = max(1, TILE_BUDGET // residual)
        per_tile = {}
        vol = 1
        # widen innermost kept dimensions first, in whole raw chunks
        for d, lo, hi in reversed(q.kept_bounds):
            c = grid.chunk_shape[grid.axis(d)]
            spanned = (hi - 1) // c - lo // c + 1
            per_tile[d] = max(1, min(spanned, budget // (vol * c)))
            vol *= per_tile[d] * c
        spans = []
        for d, lo, hi in q.kept_bounds:
            c = grid.chunk_shape[grid.axis(d)]
            first, last = lo // c, (hi - 1) // c
            spans.append([
                (d, max(lo, k * c), min(hi, (k + per_tile[d]) * c))
                for k in range(first, last + 1, per_tile[d])
            ])
        return list(itertools.product(*spans))

    def region_aggregate(self, q: RegionQuery) -> AggregateResult:
        """Sum/average over ``q`` for every kept-dimension position."""
        q.validate(self.grid)
        src = self.sources(q.agg_dims, q.weighting)
        direct = self._direct_dims(src, q)
        bounds = {d: (s, e) for d, s, e in zip(q.agg_dims, q.starts, q.ends)}
        accum = tuple(d for d in q.agg_dims if d not in direct)
        if accum:
            sub = self.sources(accum, q.weighting)
            corners = enumerate_corners(
                RegionQuery(accum, *zip(*(bounds[d] for d in accum)), q.weighting)
            )
        direct_axes = tuple(
            i for i, d in enumerate(self.grid.complement(accum)) if d in direct
        )
        cache = ChunkCache()
        counter = store_counter(self.store)
        bytes_before = counter.snapshot()[1]
        sums = np.zeros(q.kept_shape)
        weights = np.zeros(q.kept_shape)

        def tile_result(tile):
            box = {d: (lo, hi) for d, lo, hi in tile}
            box.update({d: bounds[d] for d in direct})
            # tiles never share raw chunks, so raw blocks live only as long as the tile
            raw_cache = ChunkCache()
            if not accum:
                axes = tuple(self.grid.axis(d) for d in direct)
                v, w = self._raw_terms(self._raw_kinds(src), box, raw_cache, axes)
                if w is None:
                    w = np.full(v.shape, float(q.element_count))
                return v, w, raw_cache.fetches
            kept_box = [(d, *box[d]) for d in self.grid.complement(accum)]
            v = np.zeros(tuple(hi - lo for _, lo, hi in kept_box))
            w = np.zeros_like(v)
            scale = np.zeros_like(v)
            for corner in corners:
                cv, cw, _ = self._prefix(sub, corner.point, kept_box, cache, raw_cache)
                v += corner.sign * cv
                w += corner.sign * cw
                scale += np.abs(cw)
            v, w, scale = (np.array(a.sum(axis=direct_axes)) for a in (v, w, scale))
            # weight left over from cancelling large corner terms is rounding noise
            w[w <= EMPTY_TOLERANCE * scale] = 0.0
            return v, w, raw_cache.fetches

        tiles = self._tiles(src, q)
        if self.workers and self.workers > 1 and len(tiles) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                results = list(pool.map(tile_result, tiles))
        else:
            results = [tile_result(t) for t in tiles]
        origin = {d: lo for d, lo, _ in q.kept_bounds}
        fetches = Counter(cache.fetches)
        for tile, (v, w, raw_fetches) in zip(tiles, results):
            sel = tuple(slice(lo - origin[d], hi - origin[d]) for d, lo, hi in tile)
            sums[sel] = v
            weights[sel] = w
            fetches.update(raw_fetches)

        by_array = {self._label(path): n for path, n in fetches.items()}
        nbytes = counter.snapshot()[1] - bytes_before
        return self._finish(q, sums, weights, fetches.total(), nbytes, by_array)

    def _direct_dims(self, src: _Sources, q: RegionQuery) -> set[str]:
        """Aggregated dims cheaper and more accurate to sum straight from raw data.

        That is the case when no slot boundary falls in ``(start, end]`` (both
        corners would share every accumulated term) or when the range is
        narrower than the slot spacing.
        """
        out = set()
        for d, s, e in zip(q.agg_dims, q.starts, q.ends):
            bounds = sorted(src.slots[d])
            spacing = max((b - a for a, b in zip([0, *bounds], bounds)), default=0)
            if e - s < spacing or not any(s < b <= e for b in bounds):
                out.add(d)
        return out

    def _label(self, path: str) -> str:
        if path == self.raw.path:
            return RAW
        return path.rsplit("/", 1)[-1]

    def _finish(self, q, sums, weights, reads, nbytes, by_array) -> AggregateResult:
        fill = self.raw.fill_value
        fill = math.nan if fill is None else float(fill)
        empty = weights <= 0
        with np.errstate(invalid="ignore", divide="ignore"):
            average = np.where(empty, fill, sums / np.where(empty, 1.0, weights))
        n_empty = int(empty.sum())
        if n_empty:
            log.warning("%d positions have zero total weight; set to fill value %s", n_empty, fill)
        return AggregateResult(
            average, sums, weights, q.kept_dims, q.kept_bounds, reads, nbytes, by_array, n_empty
        )

    def area_averaged_series(
        self,
        spatial_bounds: Mapping[str, tuple[int, int]] | None = None,
        time_range: tuple[int, int] | None = None,
        weighting: str = WEIGHTED,
        time_dim: str = "time",
    ) -> AggregateResult:
        """Average over the spatial box for every time index in ``time_range``.

        Every non-time dimension is averaged over; those missing from
        ``spatial_bounds`` span their full extent.
        """
        grid = self.grid
        t = grid.axis(time_dim)
        spatial_bounds = {
            **{d: (0, n) for d, n in zip(grid.dim_names, grid.shape) if d != time_dim},
            **(spatial_bounds or {}),
        }
        kept = {time_dim: time_range or (0, grid.shape[t])}
        q = RegionQuery.build(grid, spatial_bounds, weighting, kept)
        return self.region_aggregate(q)

    def time_averaged_map(
        self,
        time_range: tuple[int, int],
        spatial_bounds: Mapping[str, tuple[int, int]] | None = None,
        weighting: str = WEIGHTED,
        time_dim: str = "time",
    ) -> AggregateResult:
        """Average over ``time_range`` at every spatial position of the map."""
        q = RegionQuery.build(self.grid, {time_dim: time_range}, weighting, spatial_bounds)
        return self.region_aggregate(q)

    # -- inspection ----------------------------------------------------------

    def composite_chunk(self, chunk_coord: Sequence[int], agg_dims: Sequence[str], weighting: str = WEIGHTED):
        """Hybrid of raw and accumulated values for one raw chunk.

        Returns ``(numerator, denominator, source)`` arrays shaped like the valid
        part of the chunk. Along each aggregated dimension whose chunk start is a
        slot boundary, elements at local index 0 carry accumulated values;
        ``source`` holds a bit mask over ``agg_dims`` of the accumulation subset
        whose value an element carries (0 = raw). Summing the numerator over any
        origin-anchored box inside such a chunk gives the prefix sum at the box
        corner.
        """
        grid = self.grid
        src = self.sources(agg_dims, weighting)
        agg = src.agg_dims
        coord = tuple(int(c) for c in chunk_coord)
        if len(coord) != grid.ndim or any(not 0 <= c < n for c, n in zip(coord, grid.nchunks)):
            raise BoundsError(f"chunk {coord} outside chunk grid {grid.nchunks}")
        sl = grid.chunk_slices(coord)
        shape = tuple(s.stop - s.start for s in sl)
        cache = ChunkCache()
        block = self.raw.read(sl, cache)
        kinds = self._raw_kinds(src)
        w = None if self.weights.is_unit else self.weights.box([(s.start, s.stop) for s in sl], cache)
        t = masked_terms(block, self.raw.fill_value, w, kinds)
        num = t[kinds[0]].copy()
        den = t[kinds[1]].copy() if len(kinds) > 1 else np.ones(shape)
        source = np.zeros(shape, dtype=np.int64)

        start = {d: sl[grid.axis(d)].start for d in agg}
        active = [d for d in agg if start[d] > 0 and start[d] in src.slots[d]]
        for subset in subset_lattice(tuple(active))[1:] if active else []:
            plane = tuple(slice(0, 1) if d in subset else slice(None) for d in grid.dim_names)
            bits = sum(1 << agg.index(d) for d in subset)
            for name, target in ((src.numerator[subset], num), (src.denominator[subset], den)):
                if name is None:
                    continue
                arr, _ = self.dataset(name)
                sel = [
                    slice(src.slots[d][start[d]][name], src.slots[d][start[d]][name] + 1)
                    if d in subset else s
                    for d, s in zip(grid.dim_names, sl)
                ]
                target[plane] += arr.read(sel, cache).astype(np.float64)
            # later (larger) subsets overwrite the tag on plane intersections
            source[plane] |= bits
        return num, den, source
