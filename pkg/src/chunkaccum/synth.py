"""Seeded synthetic raw stores for tests and benchmarks."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import metadata as md
from .accgen import write_weight_array
from .coremodel import ChunkGrid
from .errors import ConfigError
from .storeio import ZArray, create_group

DEFAULT_FILL = -9999.0


@dataclass(frozen=True)
class SynthConfig:
    """Shape, chunking and content of a synthetic variable.

    Values are a smooth field plus seeded noise. ``gap_fraction`` of the
    elements are replaced by ``fill_value``.
    """

    dim_names: tuple[str, ...] = ("latitude", "longitude", "time")
    shape: tuple[int, ...] = (36, 72, 100)
    chunks: tuple[int, ...] = (9, 18, 25)
    dtype: str = "float32"
    seed: int = 0
    gap_fraction: float = 0.0
    fill_value: float = DEFAULT_FILL
    variable: str = "precipitation"
    codec: str = "none"
    # name of a cos(latitude) weight vector to write alongside, if any
    lat_weights: str | None = None

    def __post_init__(self):
        for key in ("dim_names", "shape", "chunks"):
            object.__setattr__(self, key, tuple(getattr(self, key)))
        ChunkGrid(self.dim_names, self.shape, self.chunks)
        if not 0.0 <= self.gap_fraction < 1.0:
            raise ConfigError(f"gap_fraction must be in [0, 1), got {self.gap_fraction}")
        if self.lat_weights is not None and "latitude" not in self.dim_names:
            raise ConfigError("lat_weights needs a 'latitude' dimension")

    @property
    def grid(self) -> ChunkGrid:
        return ChunkGrid(self.dim_names, self.shape, self.chunks)


def _chunk_values(cfg: SynthConfig, coord: Sequence[int], sl: Sequence[slice]) -> np.ndarray:
    # one generator per chunk keeps output independent of write order
    rng = np.random.default_rng([cfg.seed, *coord])
    shape = tuple(s.stop - s.start for s in sl)
    field = np.zeros(shape, dtype=np.float64)
    for a, (s, n) in enumerate(zip(sl, cfg.shape)):
        phase = np.sin(2 * np.pi * (np.arange(s.start, s.stop) + 0.5) / n * (a + 1))
        field += (3.0 + a) * phase.reshape([-1 if i == a else 1 for i in range(len(shape))])
    values = 25.0 + field + rng.standard_normal(shape)
    if cfg.gap_fraction > 0:
        values[rng.random(shape) < cfg.gap_fraction] = cfg.fill_value
    return values.astype(cfg.dtype)


def latitude_weights(n: int) -> np.ndarray:
    """cos(latitude) at cell centres of ``n`` equal bands from -90 to 90."""
    centres = -90.0 + (np.arange(n) + 0.5) * (180.0 / n)
    return np.cos(np.deg2rad(centres))


def write_synthetic(store, cfg: SynthConfig) -> ZArray:
    """Write the variable chunk by chunk; memory stays at one chunk."""
    grid = cfg.grid
    create_group(store, "")
    arr = ZArray.create(
        store, cfg.variable, cfg.shape, cfg.chunks, cfg.dtype,
        fill_value=cfg.fill_value, codec=cfg.codec,
        attrs={md.ARRAY_DIMS_KEY: list(cfg.dim_names)},
    )
    for coord in grid.iter_chunks():
        sl = grid.chunk_slices(coord)
        arr.put_chunk(coord, _chunk_values(cfg, coord, sl))
    if cfg.lat_weights is not None:
        n = cfg.shape[grid.axis("latitude")]
        write_weight_array(store, cfg.lat_weights, ("latitude",), latitude_weights(n))
    return arr
