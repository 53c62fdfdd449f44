"""Chunk-grid geometry, dimension subsets and inclusion-exclusion corners.

Index conventions used throughout the package:

* prefix sums ``S(i)`` are inclusive of index ``i``;
* regions are half-open ``[start, end)``;
* the empty prefix is written as index ``-1`` and always evaluates to zero.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field

from .errors import BoundsError, ConfigError

WEIGHTED = "weighted"
UNWEIGHTED = "unweighted"
WEIGHTINGS = (WEIGHTED, UNWEIGHTED)

DimSubset = tuple[str, ...]


@dataclass(frozen=True)
class ChunkGrid:
    """Regular chunking of an N-dimensional array.

    The last chunk along a dimension may be partial.
    """

    dim_names: tuple[str, ...]
    shape: tuple[int, ...]
    chunk_shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "dim_names", tuple(str(d) for d in self.dim_names))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "chunk_shape", tuple(int(c) for c in self.chunk_shape))
        if not (len(self.dim_names) == len(self.shape) == len(self.chunk_shape)):
            raise ConfigError(
                f"dim_names, shape and chunk_shape differ in length: "
                f"{len(self.dim_names)}, {len(self.shape)}, {len(self.chunk_shape)}"
            )
        if len(set(self.dim_names)) != len(self.dim_names):
            raise ConfigError(f"duplicate dimension names in {self.dim_names}")
        if any(s < 1 for s in self.shape) or any(c < 1 for c in self.chunk_shape):
            raise ConfigError(f"sizes must be >= 1: shape={self.shape} chunks={self.chunk_shape}")

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def nchunks(self) -> tuple[int, ...]:
        return tuple(math.ceil(s / c) for s, c in zip(self.shape, self.chunk_shape))

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def axis(self, name: str) -> int:
        try:
            return self.dim_names.index(name)
        except ValueError:
            raise ConfigError(f"unknown dimension {name!r}; grid has {self.dim_names}") from None

    def canonical(self, dims: Iterable[str]) -> DimSubset:
        """Return ``dims`` as a duplicate-free tuple in grid order."""
        dims = list(dims)
        if len(set(dims)) != len(dims):
            raise ConfigError(f"duplicate dimensions in {dims}")
        return tuple(sorted(dims, key=self.axis))

    def complement(self, dims: Iterable[str]) -> DimSubset:
        dims = set(self.canonical(dims))
        return tuple(d for d in self.dim_names if d not in dims)

    def chunk_bounds(self, axis: int, chunk: int) -> tuple[int, int]:
        """Half-open element range covered by ``chunk`` along ``axis``."""
        c = self.chunk_shape[axis]
        return chunk * c, min((chunk + 1) * c, self.shape[axis])

    def chunk_slices(self, coord: Sequence[int]) -> tuple[slice, ...]:
        return tuple(slice(*self.chunk_bounds(a, c)) for a, c in enumerate(coord))

    def chunks_spanned(self, axis: int, start: int, end: int) -> range:
        """Chunk indices touched by the half-open element range ``[start, end)``."""
        if end <= start:
            return range(0)
        c = self.chunk_shape[axis]
        return range(start // c, (end - 1) // c + 1)

    def iter_chunks(self) -> Iterator[tuple[int, ...]]:
        """All chunk coordinates in row-major (grid) order."""
        return itertools.product(*(range(n) for n in self.nchunks))


def chunk_of(grid: ChunkGrid, index: Sequence[int]) -> tuple[int, ...]:
    """Chunk coordinate containing element ``index``."""
    if len(index) != grid.ndim:
        raise BoundsError(f"index {tuple(index)} has {len(index)} dims, grid has {grid.ndim}")
    out = []
    for d, (i, s, c) in enumerate(zip(index, grid.shape, grid.chunk_shape)):
        if not 0 <= i < s:
            raise BoundsError(f"index {i} out of range [0, {s}) along {grid.dim_names[d]!r}")
        out.append(int(i) // c)
    return tuple(out)


@dataclass(frozen=True)
class RegionQuery:
    """Hyper-rectangular aggregation request.

    ``bounds`` maps each aggregated dimension to a half-open ``(start, end)``
    interval. Dimensions not in ``bounds`` are kept; ``kept_bounds`` may narrow
    them (default: their full extent).
    """

    agg_dims: DimSubset
    starts: tuple[int, ...]
    ends: tuple[int, ...]
    weighting: str = WEIGHTED
    kept_bounds: tuple[tuple[str, int, int], ...] = field(default=())

    @classmethod
    def build(
        cls,
        grid: ChunkGrid,
        bounds: Mapping[str, tuple[int, int]],
        weighting: str = WEIGHTED,
        kept_bounds: Mapping[str, tuple[int, int]] | None = None,
    ) -> "RegionQuery":
        agg = grid.canonical(bounds)
        kept_bounds = dict(kept_bounds or {})
        overlap = set(kept_bounds) & set(agg)
        if overlap:
            raise ConfigError(f"dimensions {sorted(overlap)} are both aggregated and kept")
        kept = tuple(
            (d, *map(int, kept_bounds.get(d, (0, grid.shape[grid.axis(d)]))))
            for d in grid.complement(agg)
        )
        for d in kept_bounds:
            grid.axis(d)
        q = cls(
            agg_dims=agg,
            starts=tuple(int(bounds[d][0]) for d in agg),
            ends=tuple(int(bounds[d][1]) for d in agg),
            weighting=weighting,
            kept_bounds=kept,
        )
        q.validate(grid)
        return q

    def validate(self, grid: ChunkGrid) -> None:
        if not self.agg_dims:
            raise ConfigError("a region query needs at least one aggregated dimension")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if grid.canonical(self.agg_dims) != self.agg_dims:
            raise ConfigError(f"aggregated dimensions {self.agg_dims} are not in grid order")
        for d, start, end in zip(self.agg_dims, self.starts, self.ends):
            n = grid.shape[grid.axis(d)]
            if not 0 <= start < end <= n:
                raise BoundsError(f"bounds [{start}, {end}) invalid for {d!r} of length {n}")
        for d, start, end in self.kept_bounds:
            n = grid.shape[grid.axis(d)]
            if not 0 <= start < end <= n:
                raise BoundsError(f"kept bounds [{start}, {end}) invalid for {d!r} of length {n}")

    @property
    def kept_dims(self) -> DimSubset:
        return tuple(d for d, _, _ in self.kept_bounds)

    @property
    def kept_shape(self) -> tuple[int, ...]:
        return tuple(end - start for _, start, end in self.kept_bounds)

    @property
    def element_count(self) -> int:
        return math.prod(e - s for s, e in zip(self.starts, self.ends))


@dataclass(frozen=True)
class Corner:
    point: tuple[int, ...]
    sign: int


def enumerate_corners(q: RegionQuery) -> list[Corner]:
    """Signed prefix endpoints whose combination yields the region sum.

    Each aggregated dimension contributes either ``end - 1`` (inclusive end)
    or ``start - 1``; every ``start - 1`` pick flips the sign. The first corner
    is always the all-ends corner with sign ``+1``.
    """
    corners = []
    for picks in itertools.product((False, True), repeat=len(q.agg_dims)):
        point = tuple(
            (s - 1) if use_start else (e - 1) for use_start, s, e in zip(picks, q.starts, q.ends)
        )
        corners.append(Corner(point, -1 if sum(picks) % 2 else 1))
    return corners


def subset_lattice(agg_dims: Sequence[str]) -> list[DimSubset]:
    """Every subset of ``agg_dims`` (empty one included), by increasing size."""
    if not agg_dims:
        raise ConfigError("subset_lattice needs a non-empty dimension set")
    dims = tuple(agg_dims)
    return [c for k in range(len(dims) + 1) for c in itertools.combinations(dims, k)]
