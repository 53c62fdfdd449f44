"""Chunk-level accumulation datasets for fast region averages over chunked arrays."""

from .accgen import AccumulationSpec, generate, plan, storage_accounting
from .coremodel import ChunkGrid, Corner, RegionQuery, chunk_of, enumerate_corners, subset_lattice
from .errors import (
    BoundsError,
    CapabilityError,
    ChunkAccumError,
    ConfigError,
    DataError,
    FormatError,
    ReadOnlyError,
    SchemaError,
)
from .metadata import (
    AccumulationDatasetAttrs,
    AccumulationGroupAttrs,
    lookup_dataset,
    lookup_stride,
    validate,
)
from .oracle import brute_aggregate, nrmsd
from .query import AggregateResult, CompositePrefix, QueryEngine
from .storeio import DirectoryStore, FetchCounter, MemoryStore, ZArray, open_store

__version__ = "0.1.0"

__all__ = [
    "AccumulationDatasetAttrs",
    "AccumulationGroupAttrs",
    "AccumulationSpec",
    "AggregateResult",
    "BoundsError",
    "CapabilityError",
    "ChunkAccumError",
    "ChunkGrid",
    "CompositePrefix",
    "ConfigError",
    "Corner",
    "DataError",
    "DirectoryStore",
    "FetchCounter",
    "FormatError",
    "MemoryStore",
    "QueryEngine",
    "ReadOnlyError",
    "RegionQuery",
    "SchemaError",
    "ZArray",
    "brute_aggregate",
    "chunk_of",
    "enumerate_corners",
    "generate",
    "lookup_dataset",
    "lookup_stride",
    "nrmsd",
    "open_store",
    "plan",
    "storage_accounting",
    "subset_lattice",
    "validate",
]
