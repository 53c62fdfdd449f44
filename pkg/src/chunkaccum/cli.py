"""Command-line entry point: synth, generate, query, validate, inspect, bench.

Every subcommand takes the store directory as its first argument. Options may
also come from a JSON object given with ``--config`` (keys are option names
with dashes or underscores); flags on the command line take precedence.

Exit codes: 0 success, 2 validation failure, 3 capability or configuration
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import random
import sys

import numpy as np

from . import metadata as md
from .accgen import AccumulationSpec, generate, load_group_attrs, measure_storage, raw_grid
from .bench import BenchConfig, run_bench, write_rows
from .coremodel import UNWEIGHTED, WEIGHTED, ChunkGrid, RegionQuery
from .errors import CapabilityError, ChunkAccumError, ConfigError, SchemaError
from .oracle import MAX_ELEMENTS, brute_aggregate, nrmsd
from .query import QueryEngine
from .storeio import ZArray, open_store, read_attrs
from .synth import SynthConfig, write_synthetic

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_CONFIG = 3

WEIGHTING_FLAGS = {"w": WEIGHTED, "uw": UNWEIGHTED, WEIGHTED: WEIGHTED, UNWEIGHTED: UNWEIGHTED}
# relative tolerance of the oracle check by raw dtype
TOLERANCE = {"float64": 1e-12, "float32": 1e-6, "int32": 1e-12, "int64": 1e-12}


# -- argument helpers --------------------------------------------------------


def _names(text) -> tuple[str, ...]:
    """Comma-separated text, or a list as given in a config file."""
    if isinstance(text, (list, tuple)):
        return tuple(str(v) for v in text)
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _ints(text) -> tuple[int, ...]:
    return tuple(int(v) for v in _names(text))


def resolve_dim(grid: ChunkGrid, name: str) -> str:
    """Accept a grid dimension name or its usual abbreviation (``lat``, ``lon``)."""
    if name in grid.dim_names:
        return name
    full = [d for d in grid.dim_names if md.ABBREVIATIONS.get(d) == name]
    if len(full) == 1:
        return full[0]
    raise ConfigError(f"unknown dimension {name!r}; grid has {list(grid.dim_names)}")


def parse_assignments(items, grid: ChunkGrid, value) -> dict:
    """``["lat=2", "time=3"]`` or ``"lat=2,time=3"`` -> ``{dim: value(text)}``."""
    if isinstance(items, dict):
        return {resolve_dim(grid, k): value(str(v)) for k, v in items.items()}
    if isinstance(items, str):
        items = [items]
    out = {}
    for item in items or ():
        for part in _names(item):
            key, sep, text = part.partition("=")
            if not sep:
                raise ConfigError(f"expected dim=value, got {part!r}")
            out[resolve_dim(grid, key.strip())] = value(text.strip())
    return out


def _range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition(":")
    if not sep:
        raise ConfigError(f"expected start:end, got {text!r}")
    return int(lo), int(hi)


def _subsets(text, grid: ChunkGrid) -> list[tuple[str, ...]]:
    groups = _names(text)
    return [tuple(resolve_dim(grid, d) for d in g.split("+")) for g in groups]


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        dim_names=_names(args.dims),
        shape=_ints(args.shape),
        chunks=_ints(args.chunks),
        dtype=args.dtype,
        seed=args.seed,
        gap_fraction=args.gaps,
        fill_value=args.fill_value,
        variable=args.var,
        codec=args.codec,
        lat_weights=args.lat_weights,
    )
    store = open_store(args.store)
    write_synthetic(store, cfg)
    print(json.dumps({"variable": cfg.variable, "shape": cfg.shape, "nchunks": cfg.grid.nchunks}))
    return EXIT_OK


def _spec(args, grid: ChunkGrid) -> AccumulationSpec:
    return AccumulationSpec(
        subsets=_subsets(args.subsets, grid),
        stride=parse_assignments(args.stride, grid, int),
        kinds=_names(args.kinds),
        weights=_names(args.weights or ""),
        codec=args.codec,
        dtype=args.dtype,
    )


def cmd_generate(args) -> int:
    store = open_store(args.store)
    _, grid = raw_grid(store, args.var)
    datasets = generate(store, args.var, _spec(args, grid))
    for ds in datasets:
        print(json.dumps({"dataset": ds.name, "kind": ds.kind, "shape": ds.shape, "chunks": ds.chunks}))
    return EXIT_OK


def _query(engine: QueryEngine, args):
    grid = engine.grid
    bounds = parse_assignments(args.bounds, grid, _range)
    weighting = WEIGHTING_FLAGS[args.weighting]
    time_dim = resolve_dim(grid, args.time_dim) if args.op != "box" else None
    if args.op == "series":
        time_range = bounds.pop(time_dim, None)
        return engine.area_averaged_series(bounds or None, time_range, weighting, time_dim)
    if args.op == "map":
        time_range = bounds.pop(time_dim, (0, grid.shape[grid.axis(time_dim)]))
        return engine.time_averaged_map(time_range, bounds or None, weighting, time_dim)
    agg = [resolve_dim(grid, d) for d in _names(args.dims or "")]
    if not agg:
        raise ConfigError("--op box needs --dims naming the aggregated dimensions")
    agg_bounds = {d: bounds.pop(d, (0, grid.shape[grid.axis(d)])) for d in agg}
    return engine.region_aggregate(RegionQuery.build(grid, agg_bounds, weighting, bounds))


def cmd_query(args) -> int:
    store = open_store(args.store, read_only=True)
    engine = QueryEngine(store, args.var, workers=args.workers)
    result = _query(engine, args)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow([*result.kept_dims, "average", "sum", "weight"])
        origin = [lo for _, lo, _ in result.kept_bounds]
        for idx in np.ndindex(*result.average.shape):
            pos = [o + i for o, i in zip(origin, idx)]
            writer.writerow([*pos, repr(float(result.average[idx])), repr(float(result.sums[idx])),
                             repr(float(result.weights[idx]))])
    finally:
        if out is not sys.stdout:
            out.close()
    if args.stats:
        stats = {
            "chunk_reads": result.chunk_reads,
            "bytes_read": result.bytes_read,
            "reads_by_array": result.reads_by_array,
            "empty": result.empty,
        }
        print(json.dumps(stats, sort_keys=True), file=sys.stderr)
    return EXIT_OK


def _metadata_violations(store, variable: str) -> list[str]:
    _, grid = raw_grid(store, variable)
    group = md.group_path(variable)
    doc = read_attrs(store, group)
    if not doc:
        return [f"{group}: no accumulation group attributes"]
    out = [f"{group}/.zattrs: {v}" for v in md.validate(doc, "group", grid.dim_names)]
    if out:
        return out
    for _, _, name in md.AccumulationGroupAttrs.from_json(doc).entries():
        attrs = read_attrs(store, f"{group}/{name}")
        out += [f"{group}/{name}/.zattrs: {v}" for v in md.validate(attrs, "dataset")]
        count = attrs.get(md.COUNT_KEY)
        if count is not None:
            out += [f"{group}/{count}/.zattrs: {v}"
                    for v in md.validate(read_attrs(store, f"{group}/{count}"), "dataset")]
    return out


def _random_query(rng: random.Random, grid: ChunkGrid, weighting: str) -> RegionQuery:
    agg = rng.sample(grid.dim_names, rng.randint(1, grid.ndim))
    bounds = {}
    for d in agg:
        n = grid.shape[grid.axis(d)]
        s = rng.randrange(n)
        bounds[d] = (s, rng.randint(s + 1, n))
    return RegionQuery.build(grid, bounds, weighting)


def cmd_validate(args) -> int:
    store = open_store(args.store, read_only=True)
    violations = _metadata_violations(store, args.var)
    for v in violations:
        print(json.dumps({"violation": v}))
    if violations:
        return EXIT_INVALID
    print(json.dumps({"metadata": "ok"}))
    if not args.trials:
        return EXIT_OK

    engine = QueryEngine(store, args.var)
    tol = TOLERANCE[engine.raw.dtype.name]
    rng = random.Random(args.seed)
    worst, failed, done = 0.0, 0, 0
    attempts = 0
    while done < args.trials and attempts < 20 * args.trials:
        attempts += 1
        q = _random_query(rng, engine.grid, rng.choice([WEIGHTED, UNWEIGHTED]))
        try:
            acc = engine.region_aggregate(q)
        except CapabilityError:
            continue
        ref = brute_aggregate(store, args.var, q, max_elements=args.max_elements)
        ok = ref.weights > 0
        err = 0.0
        report = None
        if ok.any():
            err = float(np.max(np.abs(acc.average[ok] - ref.average[ok]) / np.abs(ref.average[ok])))
            report = nrmsd(ref.average, acc.average, engine.raw.fill_value)
        worst = max(worst, err)
        failed += err > tol
        print(json.dumps({
            "trial": done,
            "agg_dims": list(q.agg_dims),
            "bounds": [list(b) for b in zip(q.starts, q.ends)],
            "weighting": q.weighting,
            "max_rel_err": err,
            "nrmsd": None if report is None or not report.defined else report.nrmsd,
        }))
        done += 1
    print(json.dumps({"trials": done, "failed": failed, "max_rel_err": worst, "tolerance": tol}))
    return EXIT_INVALID if failed else EXIT_OK


def cmd_inspect(args) -> int:
    store = open_store(args.store, read_only=True)
    raw, grid = raw_grid(store, args.var)
    attrs = load_group_attrs(store, args.var, grid)
    group = md.group_path(args.var)
    datasets = []
    for dims, kind, name in attrs.entries():
        arr = ZArray.open(store, f"{group}/{name}")
        datasets.append({
            "name": name, "dims": list(dims), "kind": kind,
            "shape": arr.shape, "chunks": arr.chunks,
            "stride": arr.attrs.get(md.STRIDE_KEY),
        })
    print(json.dumps({
        "variable": args.var,
        "dims": grid.dim_names,
        "shape": grid.shape,
        "chunks": grid.chunk_shape,
        "dtype": raw.dtype.name,
        "weights": list(attrs.weight_arrays),
        "datasets": datasets,
        "storage": measure_storage(store, args.var),
    }, indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    store = open_store(args.store, read_only=True)
    raw, grid = raw_grid(store, args.var)
    cfg = BenchConfig(
        shape=grid.shape, chunks=grid.chunk_shape, strides={}, sweep=_ints(args.sweep),
        output=args.out, start=args.start, time_dim=resolve_dim(grid, args.time_dim),
        weighting=WEIGHTING_FLAGS[args.weighting], brute_max_slices=args.brute_max,
    )
    rows = run_bench(store, args.var, cfg)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_rows(rows, fh)
    else:
        write_rows(rows, sys.stdout)
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chunkaccum", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = {}

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        parser.subcommands[name] = p
        p.add_argument("store", help="store directory")
        p.add_argument("--config", help="JSON file with option defaults")
        p.add_argument("--var", default="precipitation", help="raw variable name")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "write a seeded synthetic raw variable")
    p.add_argument("--dims", default="latitude,longitude,time")
    p.add_argument("--shape", default="36,72,100")
    p.add_argument("--chunks", default="9,18,25")
    p.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gaps", type=float, default=0.0, help="fraction of elements set to the fill value")
    p.add_argument("--fill-value", type=float, default=-9999.0)
    p.add_argument("--lat-weights", help="also write a cos(latitude) weight vector under this name")
    p.add_argument("--codec", default="none", choices=["none", "deflate"])

    p = add("generate", cmd_generate, "write the accumulation group")
    p.add_argument("--subsets", default="lat,lon,time,lat+lon",
                   help="comma-separated subsets, dims joined by '+'")
    p.add_argument("--stride", action="append", help="dim=stride, repeatable or comma-separated")
    p.add_argument("--weights", help="comma-separated weight arrays (default: unit weights)")
    p.add_argument("--kinds", default="weighted,weights")
    p.add_argument("--codec", default="none", choices=["none", "deflate"])
    p.add_argument("--dtype", default="float64", choices=["float32", "float64"],
                   help="stored type of the accumulation arrays")

    p = add("query", cmd_query, "area-averaged series, time-averaged map or box average")
    p.add_argument("--op", default="box", choices=["series", "map", "box"])
    p.add_argument("--dims", help="aggregated dimensions for --op box")
    p.add_argument("--bounds", action="append", help="dim=start:end (half-open), repeatable")
    p.add_argument("--weighting", default="w", choices=sorted(WEIGHTING_FLAGS))
    p.add_argument("--time-dim", default="time")
    p.add_argument("--stats", action="store_true", help="print chunk-read counts to stderr as JSON")
    p.add_argument("--out", help="CSV output path (default stdout)")
    p.add_argument("--workers", type=int, default=None)

    p = add("validate", cmd_validate, "check metadata schemas and, optionally, results against brute force")
    p.add_argument("--trials", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-elements", type=int, default=MAX_ELEMENTS)

    add("inspect", cmd_inspect, "describe the accumulation group and its storage")

    p = add("bench", cmd_bench, "chunk reads and timing of time-averaged maps over a window sweep")
    p.add_argument("--sweep", default="400,800,1600")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--time-dim", default="time")
    p.add_argument("--weighting", default="w", choices=sorted(WEIGHTING_FLAGS))
    p.add_argument("--brute-max", type=int, default=None, help="skip brute force above this many slices")
    p.add_argument("--out", help="CSV output path (default stdout)")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            parser.error("--config must hold a JSON object")
        sub = parser.subcommands[args.command]
        known = {a.dest for a in sub._actions}
        unknown = [k for k in doc if k.replace("-", "_") not in known]
        if unknown:
            parser.error(f"unknown --config keys: {unknown}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in doc.items()})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ChunkAccumError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
