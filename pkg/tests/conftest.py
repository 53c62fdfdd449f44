import itertools
import json
from pathlib import Path

import numpy as np
import pytest

from chunkaccum.accgen import AccumulationSpec, generate, write_weight_array
from chunkaccum.storeio import MemoryStore, ZArray, create_group
from chunkaccum import metadata as md

FIXTURES = Path(__file__).parent / "fixtures"
FILL = -9999.0


def load_fixture(name):
    return json.loads((FIXTURES / name).read_text())


def all_subsets(dims):
    return [c for k in range(1, len(dims) + 1) for c in itertools.combinations(dims, k)]


def make_store(data, chunks, dims=None, fill_value=FILL, dtype=None, variable="v"):
    """In-memory store holding ``data`` as variable ``v``."""
    data = np.asarray(data)
    dims = tuple(dims) if dims else tuple("xyz"[: data.ndim])
    store = MemoryStore()
    create_group(store, "")
    arr = ZArray.create(
        store, variable, data.shape, chunks, dtype or data.dtype.name,
        fill_value=fill_value, attrs={md.ARRAY_DIMS_KEY: list(dims)},
    )
    arr.write(data)
    return store


def random_instance(rng, shape, chunks, gap_fraction=0.0, dtype="float64", weights=False,
                    dims=("latitude", "longitude", "time")):
    """Random positive data (with gaps) plus an optional latitude weight vector."""
    data = rng.uniform(1.0, 50.0, size=shape).astype(dtype)
    if gap_fraction:
        data[rng.random(shape) < gap_fraction] = FILL
    store = make_store(data, chunks, dims=dims)
    weight_names = ()
    if weights:
        write_weight_array(store, "lat_w", (dims[0],), rng.uniform(0.1, 1.0, size=shape[0]))
        weight_names = ("lat_w",)
    return store, data, weight_names


def build(store, dims, stride, kinds=("weighted", "weights", "unweighted"), weights=(), subsets=None,
          variable="v"):
    spec = AccumulationSpec(subsets or all_subsets(dims), stride, kinds=kinds, weights=weights)
    generate(store, variable, spec)
    return spec


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
