import itertools

import numpy as np
import pytest

from chunkaccum import metadata as md
from chunkaccum.accgen import (
    AccumulationSpec,
    WeightSource,
    generate,
    measure_storage,
    plan,
    reuse_chain,
    slot_boundaries,
    storage_accounting,
    write_weight_array,
)
from chunkaccum.coremodel import ChunkGrid
from chunkaccum.errors import ConfigError
from chunkaccum.storeio import ZArray, read_attrs

from conftest import FILL, all_subsets, load_fixture, make_store, random_instance

DIMS = ("latitude", "longitude", "time")


# -- independent slot oracle --------------------------------------------------


def oracle_terms(data, fill, weights=None):
    """Per-element contributions computed straight from the definitions."""
    valid = (data != fill) & np.isfinite(data)
    x = np.where(valid, data, 0.0).astype(np.float64)
    w = np.ones(data.shape) if weights is None else np.broadcast_to(weights, data.shape)
    w = np.where(valid, w, 0.0)
    return {
        md.UNWEIGHTED: x,
        md.WEIGHTED: x * w,
        md.WEIGHTS: w,
        "count": valid.astype(np.float64),
    }


def oracle_slots(term, grid, subset, stride):
    """Each slot summed directly over raw indices below its exclusive bound."""
    shape = []
    bounds = {}
    for a, d in enumerate(grid.dim_names):
        if d in subset:
            n, c, k = grid.shape[a], grid.chunk_shape[a], stride.get(d, 1)
            bounds[d] = [min((s + 1) * k * c, n) for s in range(grid.nchunks[a] // k)]
            shape.append(len(bounds[d]))
        else:
            shape.append(grid.shape[a])
    out = np.zeros(shape)
    axes = [grid.axis(d) for d in subset]
    for slots in itertools.product(*(range(len(bounds[d])) for d in subset)):
        sel = [slice(None)] * grid.ndim
        dst = [slice(None)] * grid.ndim
        for a, d, s in zip(axes, subset, slots):
            sel[a] = slice(0, bounds[d][s])
            dst[a] = s
        out[tuple(dst)] = term[tuple(sel)].sum(axis=tuple(axes))
    return out


def read_dataset(store, name, variable="v"):
    return ZArray.open(store, f"{md.group_path(variable)}/{name}")[...]


# -- plan -----------------------------------------------------------------------


def test_plan_slot_counts_and_shapes():
    grid = ChunkGrid(DIMS, (1800, 3600, 4000), (36, 72, 200))
    spec = AccumulationSpec(
        [("latitude",), ("longitude",), ("time",), ("latitude", "longitude")],
        {"latitude": 2, "longitude": 2, "time": 2},
    )
    datasets, _ = plan(grid, spec)
    shapes = {ds.name: ds.shape for ds in datasets}
    assert shapes["acc_lat"] == (25, 3600, 4000)
    assert shapes["acc_lon"] == (1800, 25, 4000)
    assert shapes["acc_time"] == (1800, 3600, 10)
    assert shapes["acc_lat_lon"] == (25, 25, 4000)
    assert shapes["acc_wt_lat_lon"] == (25, 25, 4000)


def test_plan_stride_one_gives_one_slot_per_chunk():
    grid = ChunkGrid(("time",), (10,), (2,))
    datasets, _ = plan(grid, AccumulationSpec([("time",)], {"time": 1}))
    assert datasets[0].shape == (5,)


def test_plan_tree_matches_example_document():
    grid = ChunkGrid(DIMS, (72, 144, 400), (36, 72, 200))
    spec = AccumulationSpec([("latitude",), ("longitude",), ("time",), ("latitude", "longitude")])
    _, gattrs = plan(grid, spec)
    assert gattrs.to_json() == load_fixture("group_attrs_example.json")


def test_plan_lookup_matches_requested_subsets():
    grid = ChunkGrid(DIMS, (8, 8, 8), (2, 2, 2))
    requested = [("time",), ("longitude", "latitude")]
    _, gattrs = plan(grid, AccumulationSpec(requested, kinds=(md.WEIGHTED,)))
    for subset in all_subsets(DIMS):
        found = md.lookup_dataset(gattrs, subset, md.WEIGHTED)
        assert (found is not None) == (subset in [("time",), ("latitude", "longitude")])


def test_plan_rejects_stride_beyond_chunk_count():
    grid = ChunkGrid(DIMS, (8, 8, 8), (4, 4, 4))
    with pytest.raises(ConfigError):
        plan(grid, AccumulationSpec([("time",)], {"time": 3}))
    with pytest.raises(ConfigError):
        plan(grid, AccumulationSpec([("depth",)]))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"subsets": []},
        {"subsets": [()]},
        {"subsets": [("x",)], "kinds": ("median",)},
        {"subsets": [("x",)], "stride": {"x": 0}},
        {"subsets": [("x",)], "dtype": "int32"},
    ],
)
def test_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        AccumulationSpec(**kwargs)


def test_unweighted_count_pairing():
    grid = ChunkGrid(DIMS, (8, 8, 8), (2, 2, 2))
    unit, _ = plan(grid, AccumulationSpec([("time",)], kinds=(md.UNWEIGHTED, md.WEIGHTS)))
    uw = next(ds for ds in unit if ds.kind == md.UNWEIGHTED)
    assert uw.attrs.count_dataset == "acc_wt_time"

    only, _ = plan(grid, AccumulationSpec([("time",)], kinds=(md.UNWEIGHTED,)))
    assert [ds.name for ds in only] == ["acc_uw_time", "acc_cnt_time"]
    assert only[0].attrs.count_dataset == "acc_cnt_time"


def test_slot_boundaries_clip_to_length():
    assert slot_boundaries(10, 3, 1, 3) == [3, 6, 9]
    assert slot_boundaries(10, 3, 2, 2) == [6, 10]


# -- generate -------------------------------------------------------------------


def test_generate_1d_running_sum():
    store = make_store(np.array([1.0, 2.0, 3.0, 4.0]), (1,), dims=("x",))
    generate(store, "v", AccumulationSpec([("x",)], {"x": 1}, kinds=(md.WEIGHTED,)))
    np.testing.assert_array_equal(read_dataset(store, "acc_x"), [1.0, 3.0, 6.0, 10.0])


def test_all_fill_chunk_contributes_nothing():
    data = np.array([1.0, 2.0, FILL, FILL, 5.0, 6.0])
    store = make_store(data, (2,), dims=("x",))
    generate(store, "v", AccumulationSpec([("x",)], {"x": 1}))
    np.testing.assert_array_equal(read_dataset(store, "acc_x"), [3.0, 3.0, 14.0])
    np.testing.assert_array_equal(read_dataset(store, "acc_wt_x"), [2.0, 2.0, 4.0])


@pytest.mark.parametrize("gaps,weights", [(0.0, False), (0.2, False), (0.2, True)])
def test_generate_matches_slot_oracle(rng, gaps, weights):
    stride = {"latitude": 1, "longitude": 2, "time": 3}
    store, data, wnames = random_instance(rng, (12, 12, 12), (4, 4, 4), gaps, weights=weights)
    spec = AccumulationSpec(all_subsets(DIMS), stride, kinds=(md.UNWEIGHTED, md.WEIGHTED, md.WEIGHTS),
                            weights=wnames)
    datasets = generate(store, "v", spec)
    grid = ChunkGrid(DIMS, data.shape, (4, 4, 4))
    wvec = None
    if weights:
        wvec = ZArray.open(store, "lat_w")[...].reshape(-1, 1, 1)
    terms = oracle_terms(data, FILL, wvec)
    assert len({ds.subset for ds in datasets}) == 7
    for ds in datasets:
        expected = oracle_slots(terms[ds.kind], grid, ds.subset, stride)
        np.testing.assert_allclose(read_dataset(store, ds.name), expected, rtol=1e-12, atol=1e-9)


def test_generate_small_integers_exact(rng):
    data = rng.integers(0, 9, size=(10, 9, 11)).astype(np.float64)
    store = make_store(data, (3, 4, 5), dims=DIMS)
    stride = {"latitude": 2, "longitude": 1, "time": 2}
    datasets = generate(store, "v", AccumulationSpec(all_subsets(DIMS), stride, kinds=(md.WEIGHTED,)))
    grid = ChunkGrid(DIMS, data.shape, (3, 4, 5))
    terms = oracle_terms(data, FILL)
    for ds in datasets:
        np.testing.assert_array_equal(
            read_dataset(store, ds.name), oracle_slots(terms[md.WEIGHTED], grid, ds.subset, stride)
        )


def test_generated_attrs_validate(rng):
    store, _, _ = random_instance(rng, (8, 8, 8), (4, 4, 4), 0.1)
    datasets = generate(store, "v", AccumulationSpec(all_subsets(DIMS), {"time": 2},
                                                     kinds=(md.UNWEIGHTED, md.WEIGHTED, md.WEIGHTS)))
    group = md.group_path("v")
    assert md.validate(read_attrs(store, group), "group", DIMS) == []
    for ds in datasets:
        assert md.validate(read_attrs(store, f"{group}/{ds.name}"), "dataset") == []


def test_generate_is_byte_identical(rng):
    store, data, _ = random_instance(rng, (9, 10, 11), (4, 3, 5), 0.1)
    spec = AccumulationSpec(all_subsets(DIMS), {"time": 2}, codec="deflate")
    generate(store, "v", spec)
    first = {k: store[k] for k in store}
    generate(store, "v", spec)
    assert {k: store[k] for k in store} == first


def test_regenerate_replaces_old_group(rng):
    store, _, _ = random_instance(rng, (8, 8, 8), (4, 4, 4))
    generate(store, "v", AccumulationSpec(all_subsets(DIMS)))
    generate(store, "v", AccumulationSpec([("time",)]))
    names = {k.split("/")[1] for k in store if k.startswith(md.group_path("v") + "/")}
    assert names == {".zgroup", ".zattrs", "acc_time", "acc_wt_time"}
    with pytest.raises(ConfigError):
        generate(store, "v", AccumulationSpec([("time",)]), overwrite=False)


def test_float32_storage_option(rng):
    store, data, _ = random_instance(rng, (8, 8, 8), (4, 4, 4))
    generate(store, "v", AccumulationSpec([("time",)], dtype="float32"))
    arr = ZArray.open(store, f"{md.group_path('v')}/acc_time")
    assert arr.dtype == np.float32
    np.testing.assert_allclose(arr[...][..., -1], data.sum(axis=2), rtol=1e-6)


# -- reuse chain ----------------------------------------------------------------


def test_reuse_chain_equals_direct_two_dim(rng):
    data = rng.normal(size=(13, 11, 3))
    grid = ChunkGrid(DIMS, data.shape, (4, 3, 3))
    stride = {"latitude": 2, "longitude": 1}
    lat = oracle_slots(data, grid, ("latitude",), stride)
    both = reuse_chain(lat, 1, 3, 1, grid.nchunks[1] // 1)
    np.testing.assert_allclose(both, oracle_slots(data, grid, ("latitude", "longitude"), stride), rtol=1e-12)


def test_reuse_chain_order_commutes(rng):
    data = rng.normal(size=(13, 11, 3))
    grid = ChunkGrid(DIMS, data.shape, (4, 3, 3))
    lat = oracle_slots(data, grid, ("latitude",), {"latitude": 2})
    lon = oracle_slots(data, grid, ("longitude",), {"longitude": 3})
    a = reuse_chain(lat, 1, 3, 3, grid.nchunks[1] // 3)
    b = reuse_chain(lon, 0, 4, 2, grid.nchunks[0] // 2)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_reuse_chain_unit_chunks_is_running_sum(rng):
    data = rng.normal(size=(6, 5))
    np.testing.assert_allclose(reuse_chain(data, 1, 1, 1, 5), np.cumsum(data, axis=1), rtol=1e-12)


# -- weights and storage --------------------------------------------------------


def test_weight_source_broadcasts_product(rng):
    store = make_store(np.ones((4, 3, 2)), (2, 3, 2), dims=DIMS)
    write_weight_array(store, "wlat", ("latitude",), [1.0, 2.0, 3.0, 4.0])
    write_weight_array(store, "wlt", ("latitude", "time"), np.arange(8.0).reshape(4, 2))
    grid = ChunkGrid(DIMS, (4, 3, 2), (2, 3, 2))
    src = WeightSource(store, ("wlat", "wlt"), grid)
    box = src.box([(1, 3), (0, 3), (0, 2)])
    expected = (np.array([2.0, 3.0]).reshape(2, 1, 1) * np.arange(2.0, 6.0).reshape(2, 1, 2))
    np.testing.assert_array_equal(np.broadcast_to(box, (2, 3, 2)), np.broadcast_to(expected, (2, 3, 2)))
    assert WeightSource(store, (), grid).box([(0, 1)] * 3) is None


def test_weight_source_rejects_bad_arrays():
    store = make_store(np.ones((4, 3)), (2, 3), dims=("latitude", "time"))
    grid = ChunkGrid(("latitude", "time"), (4, 3), (2, 3))
    ZArray.create(store, "neg", (4,), (4,), attrs={md.ARRAY_DIMS_KEY: ["latitude"]}).write(-np.ones(4))
    ZArray.create(store, "short", (3,), (3,), attrs={md.ARRAY_DIMS_KEY: ["latitude"]}).write(np.ones(3))
    ZArray.create(store, "nodims", (4,), (4,)).write(np.ones(4))
    for name in ("neg", "short", "nodims"):
        with pytest.raises(ConfigError):
            WeightSource(store, (name,), grid)
    with pytest.raises(ConfigError):
        write_weight_array(store, "bad", ("latitude",), [1.0, np.nan, 1.0, 1.0])


def test_storage_accounting_matches_generated(rng):
    store, data, _ = random_instance(rng, (20, 18, 30), (4, 6, 5), dtype="float32")
    spec = AccumulationSpec(
        [("latitude",), ("longitude",), ("time",), ("latitude", "longitude")],
        {"latitude": 2, "longitude": 2, "time": 2},
    )
    generate(store, "v", spec)
    grid = ChunkGrid(DIMS, data.shape, (4, 6, 5))
    predicted = storage_accounting(grid, spec, raw_itemsize=4)
    measured = measure_storage(store, "v")
    assert predicted["acc_elements"] == measured["acc_elements"]
    assert predicted["acc_bytes"] == measured["acc_bytes"]
    assert predicted["byte_ratio"] == pytest.approx(measured["byte_ratio"])
