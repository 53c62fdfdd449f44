"""Generation of chunk-level accumulation datasets.

For a dimension subset ``T`` with per-dimension stride ``k_d`` the dataset
``acc_T`` has, along each ``d`` in ``T``, one slot per ``k_d`` complete chunks
and, along every other dimension, the raw length. Slot ``s`` along ``d`` holds
the sum over raw indices ``< min((s + 1) * k_d * C_d, n_d)`` along ``d``, i.e.
the inclusive prefix through the last element of chunk ``(s + 1) * k_d - 1``.
Chunks after the last complete stride group get no slot.

Single-dimension accumulations are built in one streaming pass over the raw
chunks; a subset with more dimensions is derived from the subset without its
last dimension via :func:`reuse_chain`.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import metadata as md
from .coremodel import ChunkGrid, DimSubset
from .errors import ConfigError, DataError
from .storeio import ZArray, create_group, is_array, read_attrs, write_attrs

log = logging.getLogger(__name__)

COUNT = "count"
KIND_ORDER = (md.UNWEIGHTED, md.WEIGHTED, md.WEIGHTS, COUNT)
ACC_DTYPE = "float64"


# -- element terms -----------------------------------------------------------


def valid_mask(values: np.ndarray, fill_value) -> np.ndarray:
    """True where an element holds data: finite and not equal to ``fill_value``."""
    if values.dtype.kind == "f":
        valid = np.isfinite(values)
    else:
        valid = np.ones(values.shape, dtype=bool)
    if fill_value is not None and not (isinstance(fill_value, float) and math.isnan(fill_value)):
        valid &= values != fill_value
    return valid


def masked_terms(values: np.ndarray, fill_value, weights, kinds) -> dict[str, np.ndarray]:
    """Per-element float64 contributions for each requested kind.

    ``weights`` is ``None`` (unit weights) or an array broadcastable to
    ``values``. Missing elements contribute zero to every kind.
    """
    valid = valid_mask(values, fill_value)
    x = np.where(valid, values, 0).astype(np.float64)
    out = {}
    if weights is None:
        w = valid.astype(np.float64)
    else:
        w = np.where(valid, weights, 0.0).astype(np.float64)
    for kind in kinds:
        if kind == md.UNWEIGHTED:
            out[kind] = x
        elif kind == md.WEIGHTED:
            out[kind] = x if weights is None else x * w
        elif kind == md.WEIGHTS:
            out[kind] = w
        elif kind == COUNT:
            out[kind] = valid.astype(np.float64)
        else:
            raise ConfigError(f"unknown accumulation kind {kind!r}")
    return out


class WeightSource:
    """Element weights formed as the broadcast product of store arrays.

    Each named array carries ``_ARRAY_DIMENSIONS`` naming a subset of the grid
    dimensions, so the source covers both per-dimension vectors (e.g. a
    latitude weight vector) and a single full-shape weight array.
    """

    # arrays up to this many elements are held in memory
    PRELOAD_LIMIT = 1 << 22

    def __init__(self, store, names: Sequence[str], grid: ChunkGrid, cache=None):
        # ``cache`` tallies the chunks fetched while preloading
        self.names = tuple(names)
        self.grid = grid
        self._parts = []
        for name in self.names:
            arr = ZArray.open(store, name)
            dims = tuple(arr.attrs.get(md.ARRAY_DIMS_KEY, ()))
            if len(dims) != len(arr.shape):
                raise ConfigError(f"weight array {name!r} needs {md.ARRAY_DIMS_KEY} matching its rank")
            if grid.canonical(dims) != dims:
                raise ConfigError(f"weight array {name!r} dimensions {dims} are not in grid order")
            for d, n in zip(dims, arr.shape):
                if grid.shape[grid.axis(d)] != n:
                    raise ConfigError(f"weight array {name!r} has length {n} along {d!r}")
            data = None
            if math.prod(arr.shape) <= self.PRELOAD_LIMIT:
                data = arr.read([slice(0, n) for n in arr.shape], cache).astype(np.float64)
                if np.any(~np.isfinite(data)) or np.any(data < 0):
                    raise ConfigError(f"weight array {name!r} must be finite and non-negative")
            self._parts.append((arr, dims, data))

    @property
    def is_unit(self) -> bool:
        return not self.names

    def box(self, bounds: Sequence[tuple[int, int]], cache=None) -> np.ndarray | None:
        """Weights over the grid box ``bounds``; ``None`` for unit weights."""
        if not self._parts:
            return None
        out = None
        for arr, dims, data in self._parts:
            axes = [self.grid.axis(d) for d in dims]
            sel = tuple(slice(*bounds[a]) for a in axes)
            part = data[sel] if data is not None else arr.read(sel, cache).astype(np.float64)
            if data is None and (np.any(~np.isfinite(part)) or np.any(part < 0)):
                raise DataError(f"weight array {arr.path!r} holds negative or non-finite values")
            shape = [1] * self.grid.ndim
            for a, n in zip(axes, part.shape):
                shape[a] = n
            part = part.reshape(shape)
            out = part if out is None else out * part
        return out


def write_weight_array(store, name: str, dims: Sequence[str], values, chunks=None, codec="none") -> ZArray:
    """Store a weight array with its ``_ARRAY_DIMENSIONS`` attribute."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != len(dims):
        raise ConfigError(f"weight array rank {values.ndim} != {len(dims)} dims")
    if np.any(~np.isfinite(values)) or np.any(values < 0):
        raise ConfigError("weights must be finite and non-negative")
    arr = ZArray.create(
        store, name, values.shape, chunks or values.shape, "float64", fill_value=0.0,
        codec=codec, attrs={md.ARRAY_DIMS_KEY: list(dims)},
    )
    arr.write(values)
    return arr


# -- planning ----------------------------------------------------------------


@dataclass(frozen=True)
class AccumulationSpec:
    """What to materialise.

    ``stride`` maps dimension name to stride in chunks (default 1).
    ``weights`` names store arrays forming the element weights; empty means
    unit weights. Sums are always formed in float64; ``dtype`` is the stored
    type (float32 halves storage at the cost of precision).
    """

    subsets: tuple[DimSubset, ...]
    stride: Mapping[str, int] = field(default_factory=dict)
    kinds: tuple[str, ...] = (md.WEIGHTED, md.WEIGHTS)
    weights: tuple[str, ...] = ()
    codec: str = "none"
    dtype: str = ACC_DTYPE

    def __post_init__(self):
        object.__setattr__(self, "subsets", tuple(tuple(s) for s in self.subsets))
        object.__setattr__(self, "stride", dict(self.stride))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "weights", tuple(self.weights))
        if not self.subsets:
            raise ConfigError("at least one subset is required")
        if any(not s for s in self.subsets):
            raise ConfigError("subsets must be non-empty")
        bad = [k for k in self.kinds if k not in md.KIND_KEYS]
        if bad or not self.kinds:
            raise ConfigError(f"kinds must be drawn from {list(md.KIND_KEYS)}, got {list(self.kinds)}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"accumulation dtype must be float32 or float64, got {self.dtype!r}")
        for d, k in self.stride.items():
            if int(k) < 1:
                raise ConfigError(f"stride along {d!r} must be >= 1, got {k}")

    def stride_for(self, dim: str) -> int:
        return int(self.stride.get(dim, 1))


@dataclass(frozen=True)
class AccumulationDataset:
    name: str
    subset: DimSubset
    kind: str
    attrs: md.AccumulationDatasetAttrs
    shape: tuple[int, ...]
    chunks: tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)


def slot_count(grid: ChunkGrid, dim: str, stride: int) -> int:
    return grid.nchunks[grid.axis(dim)] // stride


def slot_boundaries(n: int, chunk: int, stride: int, nslots: int) -> list[int]:
    """Exclusive element bound covered by each slot."""
    return [min((s + 1) * stride * chunk, n) for s in range(nslots)]


def _acc_chunks(grid: ChunkGrid, subset: DimSubset, shape: Sequence[int]) -> tuple[int, ...]:
    # Accumulated axes: raw chunk size in slot units, capped at the axis.
    # Pass-through axes: whole raw chunks, widened innermost-first until a chunk
    # holds about as many elements as a raw chunk.
    chunks = [
        min(c, n) if d in subset else c
        for d, c, n in zip(grid.dim_names, grid.chunk_shape, shape)
    ]
    target = math.prod(grid.chunk_shape)
    for a in reversed(range(grid.ndim)):
        if grid.dim_names[a] in subset:
            continue
        vol = math.prod(chunks)
        if vol >= target:
            break
        mult = min(grid.nchunks[a], math.ceil(target / vol))
        chunks[a] = min(grid.chunk_shape[a] * mult, grid.shape[a])
    return tuple(chunks)


def plan(grid: ChunkGrid, spec: AccumulationSpec):
    """Datasets to write plus the group attribute tree.

    Returns ``(datasets, group_attrs)``. Every non-empty dimension combination
    gets a node in the tree (empty when not materialised); requested subsets get
    one dataset per configured kind. An unweighted dataset is paired with
    valid-element counts: the weights dataset when weights are unit, otherwise
    an extra ``acc_cnt_*`` dataset outside the tree.
    """
    subsets = []
    for s in spec.subsets:
        c = grid.canonical(s)
        if c not in subsets:
            subsets.append(c)
    for d in spec.stride:
        grid.axis(d)

    gattrs = md.AccumulationGroupAttrs(weight_arrays=spec.weights)
    for k in range(1, grid.ndim + 1):
        for combo in itertools.combinations(grid.dim_names, k):
            gattrs.ensure_node(combo)

    datasets = []
    for subset in subsets:
        shape, stride = [], []
        for d, n in zip(grid.dim_names, grid.shape):
            if d in subset:
                k = spec.stride_for(d)
                nslots = slot_count(grid, d, k)
                if nslots < 1:
                    raise ConfigError(
                        f"stride {k} along {d!r} exceeds its {grid.nchunks[grid.axis(d)]} chunks; "
                        "no accumulation slot would exist"
                    )
                shape.append(nslots)
                stride.append(k)
            else:
                shape.append(n)
                stride.append(0)
        shape = tuple(shape)
        chunks = _acc_chunks(grid, subset, shape)

        names = {kind: md.dataset_name(subset, kind, grid.dim_names) for kind in spec.kinds}
        count_name = None
        if md.UNWEIGHTED in spec.kinds:
            if not spec.weights and md.WEIGHTS in spec.kinds:
                count_name = names[md.WEIGHTS]
            else:
                count_name = md.dataset_name(subset, COUNT, grid.dim_names)
        kinds = [k for k in KIND_ORDER if k in spec.kinds]
        if count_name is not None and count_name not in names.values():
            kinds.append(COUNT)
        for kind in kinds:
            name = count_name if kind == COUNT else names[kind]
            attrs = md.AccumulationDatasetAttrs(
                grid.dim_names, stride, count_name if kind == md.UNWEIGHTED else None
            )
            datasets.append(AccumulationDataset(name, subset, kind, attrs, shape, chunks))
            if kind != COUNT:
                gattrs.set(subset, kind, name)
    return datasets, gattrs


def storage_accounting(grid: ChunkGrid, spec: AccumulationSpec, raw_itemsize: int = 4) -> dict:
    """Closed-form element and uncompressed byte counts of a plan."""
    datasets, _ = plan(grid, spec)
    acc_elements = 0
    for ds in datasets:
        n = 1
        for d, size in zip(grid.dim_names, grid.shape):
            if d in ds.subset:
                n *= slot_count(grid, d, spec.stride_for(d))
            else:
                n *= size
        acc_elements += n
    acc_bytes = acc_elements * np.dtype(spec.dtype).itemsize
    return {
        "datasets": {ds.name: ds.size for ds in datasets},
        "acc_elements": acc_elements,
        "raw_elements": grid.size,
        "element_ratio": acc_elements / grid.size,
        "acc_bytes": acc_bytes,
        "raw_bytes": grid.size * raw_itemsize,
        "byte_ratio": acc_bytes / (grid.size * raw_itemsize),
    }


def measure_storage(store, variable: str) -> dict:
    """Element counts and both uncompressed and stored byte totals of a generated group."""
    group = md.group_path(variable)
    raw = ZArray.open(store, variable)
    acc_elements = acc_bytes = acc_stored = 0
    names = []
    for key in store:
        if key.startswith(group + "/") and key.endswith("/.zarray"):
            names.append(key[len(group) + 1 : -len("/.zarray")])
    for name in sorted(names):
        arr = ZArray.open(store, f"{group}/{name}")
        acc_elements += math.prod(arr.shape)
        acc_bytes += math.prod(arr.shape) * arr.dtype.itemsize
        acc_stored += _stored_bytes(store, arr)
    raw_elements = math.prod(raw.shape)
    raw_bytes = raw_elements * raw.dtype.itemsize
    return {
        "acc_elements": acc_elements,
        "raw_elements": raw_elements,
        "element_ratio": acc_elements / raw_elements,
        "acc_bytes": acc_bytes,
        "raw_bytes": raw_bytes,
        "byte_ratio": acc_bytes / raw_bytes,
        "acc_stored_bytes": acc_stored,
        "raw_stored_bytes": _stored_bytes(store, raw),
    }


def _stored_bytes(store, arr: ZArray) -> int:
    total = 0
    for coord in np.ndindex(*arr.meta.nchunks):
        try:
            total += len(store[arr.chunk_key(coord)])
        except KeyError:
            pass
    return total


# -- generation --------------------------------------------------------------


def reuse_chain(lower: np.ndarray, axis: int, chunk: int, stride: int, nslots: int) -> np.ndarray:
    """Extend an accumulation block by one raw dimension.

    ``lower`` is accumulated over some subset and raw along ``axis``; the
    result is additionally accumulated along ``axis`` at ``nslots`` slot
    boundaries spaced ``stride`` chunks of ``chunk`` elements apart.
    """
    n = lower.shape[axis]
    bounds = slot_boundaries(n, chunk, stride, nslots)
    starts = [0] + bounds[:-1]
    head = lower[(slice(None),) * axis + (slice(0, bounds[-1]),)]
    grouped = np.add.reduceat(head, starts, axis=axis)
    return np.cumsum(grouped, axis=axis)


def raw_grid(store, variable: str) -> tuple[ZArray, ChunkGrid]:
    raw = ZArray.open(store, variable)
    dims = raw.attrs.get(md.ARRAY_DIMS_KEY)
    if not dims or len(dims) != len(raw.shape):
        raise DataError(f"{variable!r} needs an {md.ARRAY_DIMS_KEY} attribute naming its {len(raw.shape)} dims")
    return raw, ChunkGrid(tuple(dims), raw.shape, raw.chunks)


def compute_accumulations(store, variable: str, spec: AccumulationSpec):
    """In-memory accumulation arrays keyed by ``(subset, kind)``.

    One pass over the raw chunks in grid order builds the per-slot group sums
    for every single dimension that starts a chain; longer subsets follow by
    :func:`reuse_chain`.
    """
    raw, grid = raw_grid(store, variable)
    datasets, _ = plan(grid, spec)
    weights = WeightSource(store, spec.weights, grid)
    kinds = [k for k in KIND_ORDER if any(ds.kind == k for ds in datasets)]

    needed: set[DimSubset] = set()
    for ds in datasets:
        for k in range(1, len(ds.subset) + 1):
            needed.add(ds.subset[:k])
    singles = sorted({s[0] for s in needed}, key=grid.axis)

    group_sums = {}
    for d in singles:
        a = grid.axis(d)
        shape = list(grid.shape)
        shape[a] = slot_count(grid, d, spec.stride_for(d))
        for kind in kinds:
            group_sums[(d, kind)] = np.zeros(shape, dtype=np.float64)

    for coord in grid.iter_chunks():
        sl = grid.chunk_slices(coord)
        block = raw.get_chunk(coord)[tuple(slice(0, s.stop - s.start) for s in sl)]
        w = weights.box([(s.start, s.stop) for s in sl])
        terms = masked_terms(block, raw.fill_value, w, kinds)
        for d in singles:
            a = grid.axis(d)
            g = coord[a] // spec.stride_for(d)
            if g >= group_sums[(d, kinds[0])].shape[a]:
                continue
            target = list(sl)
            target[a] = g
            for kind in kinds:
                group_sums[(d, kind)][tuple(target)] += terms[kind].sum(axis=a)

    acc = {}
    for (d, kind), gs in group_sums.items():
        acc[((d,), kind)] = np.cumsum(gs, axis=grid.axis(d))
    del group_sums
    for subset in sorted(needed, key=lambda s: (len(s), [grid.axis(d) for d in s])):
        if len(subset) == 1:
            continue
        d = subset[-1]
        a = grid.axis(d)
        k = spec.stride_for(d)
        for kind in kinds:
            acc[(subset, kind)] = reuse_chain(
                acc[(subset[:-1], kind)], a, grid.chunk_shape[a], k, slot_count(grid, d, k)
            )
    return grid, datasets, acc


def generate(store, variable: str, spec: AccumulationSpec, overwrite: bool = True):
    """Write the accumulation group for ``variable``; returns the written datasets."""
    grid, datasets, acc = compute_accumulations(store, variable, spec)
    _, gattrs = plan(grid, spec)
    group = md.group_path(variable)
    if not overwrite and is_array(store, f"{group}/{datasets[0].name}"):
        raise ConfigError(f"accumulation group {group!r} already exists")
    for key in [k for k in store if k.startswith(group + "/")]:
        del store[key]

    create_group(store, group, gattrs.to_json())
    for ds in datasets:
        data = acc[(ds.subset, ds.kind)]
        assert data.shape == ds.shape, (ds.name, data.shape, ds.shape)
        arr = ZArray.create(
            store, f"{group}/{ds.name}", ds.shape, ds.chunks, spec.dtype,
            fill_value=0.0, codec=spec.codec, attrs=ds.attrs.to_json(),
        )
        arr.write(data)
        log.info("wrote %s %s (%s)", ds.name, ds.shape, ds.kind)
    return datasets


def load_group_attrs(store, variable: str, grid: ChunkGrid | None = None) -> md.AccumulationGroupAttrs:
    doc = read_attrs(store, md.group_path(variable))
    if not doc:
        raise DataError(f"no accumulation group for {variable!r}; run generate first")
    return md.AccumulationGroupAttrs.from_json(doc, grid.dim_names if grid else None)


def update_raw_dims(store, variable: str, dims: Sequence[str]) -> None:
    attrs = read_attrs(store, variable)
    attrs[md.ARRAY_DIMS_KEY] = list(dims)
    write_attrs(store, variable, attrs)
