"""Accumulation metadata: group attribute tree, per-dataset attributes, schemas.

The group ``.zattrs`` holds a tree under ``_ACCUMULATION_GROUP`` whose keys are
dimension names (nested in grid order) and whose leaves name the datasets::

    {"_ACCUMULATION_GROUP": {
        "latitude": {"_DATA_WEIGHTED": "acc_lat", "longitude": {...}},
        "time": {"_DATA_WEIGHTED": "acc_time", "_WEIGHTS": "acc_wt_time"}}}

Each accumulation dataset carries ``_ARRAY_DIMENSIONS`` and a matching
``_ACCUMULATION_STRIDE`` (0 = not accumulated along that dimension).

Two optional keys extend the documents without breaking the schemas (neither
schema forbids extra top-level properties):

* ``_ACCUMULATION_WEIGHTS`` on the group: names of the store arrays whose
  broadcast product gives the element weights (absent = unit weights);
* ``_ACCUMULATION_COUNT`` on an unweighted dataset: name of the dataset holding
  the matching accumulated valid-element counts.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import jsonschema

from .errors import SchemaError

GROUP_KEY = "_ACCUMULATION_GROUP"
WEIGHT_ARRAYS_KEY = "_ACCUMULATION_WEIGHTS"
COUNT_KEY = "_ACCUMULATION_COUNT"
ARRAY_DIMS_KEY = "_ARRAY_DIMENSIONS"
STRIDE_KEY = "_ACCUMULATION_STRIDE"

UNWEIGHTED = "unweighted"
WEIGHTED = "weighted"
WEIGHTS = "weights"
KIND_KEYS = {
    UNWEIGHTED: "_DATA_UNWEIGHTED",
    WEIGHTED: "_DATA_WEIGHTED",
    WEIGHTS: "_WEIGHTS",
}
RESERVED = frozenset(KIND_KEYS.values())

GROUP_SCHEMA_FILE = "accumulation_group.schema.json"
DATASET_SCHEMA_FILE = "accumulation_dataset.schema.json"

# Short forms for the usual geospatial dimension names; anything else is used verbatim.
ABBREVIATIONS = {"latitude": "lat", "longitude": "lon"}
NAME_PREFIXES = {WEIGHTED: "acc", WEIGHTS: "acc_wt", UNWEIGHTED: "acc_uw", "count": "acc_cnt"}


def group_path(variable: str) -> str:
    return f"{variable}_accumulation_group"


@lru_cache(maxsize=None)
def load_schema(which: str) -> dict:
    """Return the shipped ``"group"`` or ``"dataset"`` schema document."""
    files = {"group": GROUP_SCHEMA_FILE, "dataset": DATASET_SCHEMA_FILE}
    if which not in files:
        raise ValueError(f"which must be 'group' or 'dataset', got {which!r}")
    text = resources.files("chunkaccum.schemas").joinpath(files[which]).read_text("utf-8")
    return json.loads(text)


def dataset_name(dims: Sequence[str], kind: str, all_dims: Sequence[str] | None = None) -> str:
    """Deterministic dataset name, e.g. ``acc_lat_lon`` / ``acc_wt_time``.

    Falls back to full dimension names when abbreviations would collide
    within ``all_dims``.
    """
    names = list(all_dims) if all_dims is not None else list(dims)
    short = {d: ABBREVIATIONS.get(d, d) for d in names}
    if len(set(short.values())) != len(short):
        short = {d: d for d in names}
    return "_".join([NAME_PREFIXES[kind], *(short.get(d, d) for d in dims)])


# -- validation --------------------------------------------------------------


def _format_error(err: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    return f"{where}: {err.message}"


def _tree_order_violations(tree: dict, dim_order: Sequence[str], path=()) -> list[str]:
    out = []
    rank = {d: i for i, d in enumerate(dim_order)}
    for key, child in tree.items():
        if key in RESERVED:
            continue
        where = "/".join((GROUP_KEY, *path, key))
        if key not in rank:
            out.append(f"{where}: unknown dimension {key!r}")
            continue
        if path and path[-1] in rank and rank[key] <= rank[path[-1]]:
            out.append(f"{where}: {key!r} must not nest under {path[-1]!r} (dimension order {list(dim_order)})")
        if isinstance(child, dict):
            out.extend(_tree_order_violations(child, dim_order, (*path, key)))
    return out


def validate(doc, which: str = "group", dim_order: Sequence[str] | None = None) -> list[str]:
    """Check an attribute document; returns a list of violations (empty = ok).

    ``which`` selects the group or dataset schema. On top of the schema, dataset
    documents must have equal-length, non-negative strides with at least one
    positive entry; group documents are checked for dimension ordering when
    ``dim_order`` is given.
    """
    validator = jsonschema.Draft7Validator(load_schema(which))
    violations = [_format_error(e) for e in sorted(validator.iter_errors(doc), key=str)]
    if not isinstance(doc, dict):
        return violations or ["document must be an object"]
    if which == "group":
        tree = doc.get(GROUP_KEY)
        if dim_order is not None and isinstance(tree, dict):
            violations += _tree_order_violations(tree, dim_order)
        weights = doc.get(WEIGHT_ARRAYS_KEY)
        if weights is not None and not (
            isinstance(weights, list) and all(isinstance(w, str) for w in weights)
        ):
            violations.append(f"{WEIGHT_ARRAYS_KEY}: must be a list of array names")
    else:
        dims, stride = doc.get(ARRAY_DIMS_KEY), doc.get(STRIDE_KEY)
        if isinstance(dims, list) and isinstance(stride, list):
            if len(dims) != len(stride):
                violations.append(
                    f"{ARRAY_DIMS_KEY} has {len(dims)} entries but {STRIDE_KEY} has {len(stride)}"
                )
            ints = [s for s in stride if isinstance(s, int) and not isinstance(s, bool)]
            if any(s < 0 for s in ints):
                violations.append(f"{STRIDE_KEY}: strides must be non-negative, got {stride}")
            if ints and len(ints) == len(stride) and not any(s > 0 for s in ints):
                violations.append(f"{STRIDE_KEY}: at least one stride must be positive")
            if len(set(d for d in dims if isinstance(d, str))) != len(dims):
                violations.append(f"{ARRAY_DIMS_KEY}: duplicate dimension names {dims}")
        count = doc.get(COUNT_KEY)
        if count is not None and not isinstance(count, str):
            violations.append(f"{COUNT_KEY}: must be a dataset name")
    return violations


# -- typed model -------------------------------------------------------------


@dataclass
class AccumulationGroupAttrs:
    tree: dict = field(default_factory=dict)
    weight_arrays: tuple[str, ...] = ()

    def node(self, dims: Sequence[str]) -> dict | None:
        node = self.tree
        for d in dims:
            node = node.get(d)
            if not isinstance(node, dict):
                return None
        return node

    def ensure_node(self, dims: Sequence[str]) -> dict:
        node = self.tree
        for d in dims:
            if d in RESERVED:
                raise SchemaError(f"{d!r} is reserved and cannot name a dimension")
            node = node.setdefault(d, {})
        return node

    def set(self, dims: Sequence[str], kind: str, name: str) -> None:
        self.ensure_node(dims)[KIND_KEYS[kind]] = name

    def lookup(self, dims: Sequence[str], kind: str) -> str | None:
        node = self.node(dims)
        if node is None:
            return None
        return node.get(KIND_KEYS[kind])

    def entries(self) -> Iterator[tuple[tuple[str, ...], str, str]]:
        """Yield ``(dims, kind, dataset_name)`` for every named dataset."""
        by_key = {v: k for k, v in KIND_KEYS.items()}

        def walk(node, path):
            for key, value in node.items():
                if key in RESERVED:
                    yield path, by_key[key], value
            for key, value in node.items():
                if key not in RESERVED:
                    yield from walk(value, (*path, key))

        yield from walk(self.tree, ())

    def to_json(self) -> dict:
        doc = {GROUP_KEY: self.tree}
        if self.weight_arrays:
            doc[WEIGHT_ARRAYS_KEY] = list(self.weight_arrays)
        return doc

    @classmethod
    def from_json(cls, doc: dict, dim_order: Sequence[str] | None = None) -> "AccumulationGroupAttrs":
        violations = validate(doc, "group", dim_order)
        if violations:
            raise SchemaError(violations)
        return cls(tree=doc[GROUP_KEY], weight_arrays=tuple(doc.get(WEIGHT_ARRAYS_KEY, ())))


@dataclass(frozen=True)
class AccumulationDatasetAttrs:
    array_dimensions: tuple[str, ...]
    stride: tuple[int, ...]
    count_dataset: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "array_dimensions", tuple(self.array_dimensions))
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        violations = validate(self.to_json(), "dataset")
        if violations:
            raise SchemaError(violations)

    @property
    def accumulated_dims(self) -> tuple[str, ...]:
        return tuple(d for d, s in zip(self.array_dimensions, self.stride) if s > 0)

    def stride_of(self, dim: str) -> int:
        return lookup_stride(self, dim)

    def to_json(self) -> dict:
        doc = {ARRAY_DIMS_KEY: list(self.array_dimensions), STRIDE_KEY: list(self.stride)}
        if self.count_dataset is not None:
            doc[COUNT_KEY] = self.count_dataset
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "AccumulationDatasetAttrs":
        violations = validate(doc, "dataset")
        if violations:
            raise SchemaError(violations)
        return cls(doc[ARRAY_DIMS_KEY], doc[STRIDE_KEY], doc.get(COUNT_KEY))


def lookup_dataset(attrs: AccumulationGroupAttrs | dict, dims: Iterable[str], kind: str) -> str | None:
    """Dataset name for accumulation along ``dims`` (grid order) of the given kind."""
    if isinstance(attrs, dict):
        attrs = AccumulationGroupAttrs.from_json(attrs)
    if kind not in KIND_KEYS:
        raise ValueError(f"kind must be one of {list(KIND_KEYS)}, got {kind!r}")
    return attrs.lookup(tuple(dims), kind)


def lookup_stride(attrs: AccumulationDatasetAttrs | dict, dim: str) -> int:
    if isinstance(attrs, dict):
        attrs = AccumulationDatasetAttrs.from_json(attrs)
    try:
        i = attrs.array_dimensions.index(dim)
    except ValueError:
        raise KeyError(f"dimension {dim!r} not in {list(attrs.array_dimensions)}") from None
    return attrs.stride[i]
