"""Zarr v2 directory-layout reader/writer with instrumented chunk fetches.

Stores are plain ``MutableMapping[str, bytes]`` objects keyed by
slash-separated paths (``"precip/.zarray"``, ``"precip/0.1.2"``), so a
remote object-store backend only needs to implement the mapping protocol.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import tempfile
import threading
import zlib
from collections import Counter
from collections.abc import Iterator, MutableMapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BoundsError, DataError, FormatError, ReadOnlyError

ZARRAY = ".zarray"
ZATTRS = ".zattrs"
ZGROUP = ".zgroup"
# Alternate spelling accepted on read only.
ZATTR_ALT = ".zattr"

DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int32": "<i4",
    "int64": "<i8",
}
CODECS = ("none", "deflate")
DEFAULT_DEFLATE_LEVEL = 5


def dump_json(doc) -> bytes:
    """Canonical object-notation encoding used for every metadata document."""
    return json.dumps(
        doc, indent=4, sort_keys=True, ensure_ascii=True, separators=(",", ": ")
    ).encode("utf-8") + b"\n"


def load_json(raw: bytes, where: str = "document"):
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed {where}: {exc}") from exc


class FetchCounter:
    """Thread-safe tally of chunk fetches and the bytes they transferred."""

    def __init__(self):
        self._lock = threading.Lock()
        self.chunk_reads = 0
        self.bytes_read = 0

    def record(self, nbytes: int) -> None:
        with self._lock:
            self.chunk_reads += 1
            self.bytes_read += nbytes

    def reset(self) -> None:
        with self._lock:
            self.chunk_reads = 0
            self.bytes_read = 0

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return self.chunk_reads, self.bytes_read

    def __repr__(self):
        return f"FetchCounter(chunk_reads={self.chunk_reads}, bytes_read={self.bytes_read})"


class MemoryStore(MutableMapping):
    def __init__(self, read_only: bool = False):
        self._data: dict[str, bytes] = {}
        self._lock = threading.Lock()
        self.read_only = read_only
        self.counter = FetchCounter()

    def __getitem__(self, key: str) -> bytes:
        with self._lock:
            return self._data[key]

    def __setitem__(self, key: str, value: bytes) -> None:
        if self.read_only:
            raise ReadOnlyError(f"cannot write {key!r}: store is read-only")
        with self._lock:
            self._data[key] = bytes(value)

    def __delitem__(self, key: str) -> None:
        if self.read_only:
            raise ReadOnlyError(f"cannot delete {key!r}: store is read-only")
        with self._lock:
            del self._data[key]

    def __iter__(self) -> Iterator[str]:
        with self._lock:
            return iter(sorted(self._data))

    def __len__(self) -> int:
        return len(self._data)


class DirectoryStore(MutableMapping):
    """Store backed by a directory tree; one file per key."""

    def __init__(self, path, read_only: bool = False):
        self.path = Path(path)
        self.read_only = read_only
        self.counter = FetchCounter()
        if not read_only:
            self.path.mkdir(parents=True, exist_ok=True)

    def _file(self, key: str) -> Path:
        parts = key.split("/")
        if any(p in ("", ".", "..") for p in parts):
            raise KeyError(key)
        return self.path.joinpath(*parts)

    def __getitem__(self, key: str) -> bytes:
        f = self._file(key)
        try:
            return f.read_bytes()
        except (FileNotFoundError, IsADirectoryError, NotADirectoryError):
            raise KeyError(key) from None

    def __setitem__(self, key: str, value: bytes) -> None:
        if self.read_only:
            raise ReadOnlyError(f"cannot write {key!r}: store is read-only")
        f = self._file(key)
        f.parent.mkdir(parents=True, exist_ok=True)
        # write-then-rename so concurrent readers never see a torn chunk
        fd, tmp = tempfile.mkstemp(dir=f.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(value)
            os.replace(tmp, f)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def __delitem__(self, key: str) -> None:
        if self.read_only:
            raise ReadOnlyError(f"cannot delete {key!r}: store is read-only")
        try:
            self._file(key).unlink()
        except FileNotFoundError:
            raise KeyError(key) from None

    def __contains__(self, key) -> bool:
        try:
            return self._file(key).is_file()
        except KeyError:
            return False

    def __iter__(self) -> Iterator[str]:
        if not self.path.exists():
            return iter(())
        keys = [
            p.relative_to(self.path).as_posix()
            for p in self.path.rglob("*")
            if p.is_file() and not p.name.startswith(".tmp-")
        ]
        return iter(sorted(keys))

    def __len__(self) -> int:
        return sum(1 for _ in self)


def open_store(path, read_only: bool = False) -> DirectoryStore:
    return DirectoryStore(path, read_only=read_only)


def _join(*parts: str) -> str:
    return "/".join(p.strip("/") for p in parts if p and p.strip("/"))


def store_counter(store) -> FetchCounter:
    counter = getattr(store, "counter", None)
    if counter is None:
        counter = FetchCounter()
        try:
            store.counter = counter
        except AttributeError:
            pass
    return counter


# -- attributes and groups ---------------------------------------------------


def read_attrs(store, node: str = "") -> dict:
    """Attribute document of ``node``; ``{}`` when none is stored."""
    for name in (ZATTRS, ZATTR_ALT):
        key = _join(node, name)
        try:
            raw = store[key]
        except KeyError:
            continue
        doc = load_json(raw, key)
        if not isinstance(doc, dict):
            raise FormatError(f"{key} must hold an object, got {type(doc).__name__}")
        return doc
    return {}


def write_attrs(store, node: str, attrs: dict) -> None:
    if not isinstance(attrs, dict):
        raise FormatError("attributes must be a mapping")
    store[_join(node, ZATTRS)] = dump_json(attrs)


def create_group(store, path: str = "", attrs: dict | None = None) -> None:
    store[_join(path, ZGROUP)] = dump_json({"zarr_format": 2})
    if attrs is not None:
        write_attrs(store, path, attrs)


def is_group(store, path: str = "") -> bool:
    return _join(path, ZGROUP) in store


def is_array(store, path: str) -> bool:
    return _join(path, ZARRAY) in store


# -- array metadata ----------------------------------------------------------


def _encode_fill(value, dtype: str):
    if value is None:
        return None
    if dtype.startswith("float"):
        value = float(value)
        if math.isnan(value):
            return "NaN"
        if math.isinf(value):
            return "Infinity" if value > 0 else "-Infinity"
        return value
    return int(value)


def _decode_fill(value, dtype: str):
    if value is None:
        return None
    if dtype.startswith("float"):
        if isinstance(value, str):
            specials = {"NaN": math.nan, "Infinity": math.inf, "-Infinity": -math.inf}
            if value not in specials:
                raise FormatError(f"unrecognised fill_value {value!r}")
            return specials[value]
        return float(value)
    if not isinstance(value, int) or isinstance(value, bool):
        raise FormatError(f"integer array needs an integer fill_value, got {value!r}")
    return value


@dataclass(frozen=True)
class ArrayMeta:
    shape: tuple[int, ...]
    chunks: tuple[int, ...]
    dtype: str = "float64"
    fill_value: float | int | None = 0.0
    codec: str = "none"
    level: int = DEFAULT_DEFLATE_LEVEL

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "chunks", tuple(int(c) for c in self.chunks))
        if self.dtype not in DTYPES:
            raise FormatError(f"unsupported element type {self.dtype!r}; expected one of {list(DTYPES)}")
        if self.codec not in CODECS:
            raise FormatError(f"unsupported codec {self.codec!r}; expected one of {CODECS}")
        if len(self.shape) != len(self.chunks):
            raise FormatError(f"shape {self.shape} and chunks {self.chunks} differ in rank")
        if any(s < 0 for s in self.shape) or any(c < 1 for c in self.chunks):
            raise FormatError(f"invalid shape {self.shape} / chunks {self.chunks}")
        object.__setattr__(self, "fill_value", _decode_fill(_encode_fill(self.fill_value, self.dtype), self.dtype))

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(DTYPES[self.dtype])

    @property
    def nchunks(self) -> tuple[int, ...]:
        return tuple(math.ceil(s / c) for s, c in zip(self.shape, self.chunks))

    def to_json(self) -> dict:
        compressor = None
        if self.codec == "deflate":
            compressor = {"id": "zlib", "level": self.level}
        return {
            "chunks": list(self.chunks),
            "compressor": compressor,
            "dtype": DTYPES[self.dtype],
            "fill_value": _encode_fill(self.fill_value, self.dtype),
            "filters": None,
            "order": "C",
            "shape": list(self.shape),
            "zarr_format": 2,
        }

    def to_bytes(self) -> bytes:
        return dump_json(self.to_json())

    @classmethod
    def from_json(cls, doc: dict) -> "ArrayMeta":
        try:
            if doc.get("zarr_format") != 2:
                raise FormatError(f"only zarr_format 2 is supported, got {doc.get('zarr_format')!r}")
            if doc.get("order", "C") != "C":
                raise FormatError("only row-major ('C') order is supported")
            if doc.get("filters"):
                raise FormatError("filters are not supported")
            by_code = {v: k for k, v in DTYPES.items()}
            if doc["dtype"] not in by_code:
                raise FormatError(f"unsupported dtype {doc['dtype']!r}")
            dtype = by_code[doc["dtype"]]
            comp = doc.get("compressor")
            if comp is None:
                codec, level = "none", DEFAULT_DEFLATE_LEVEL
            elif comp.get("id") == "zlib":
                codec, level = "deflate", int(comp.get("level", DEFAULT_DEFLATE_LEVEL))
            else:
                raise FormatError(f"unsupported compressor {comp!r}")
            return cls(
                shape=tuple(doc["shape"]),
                chunks=tuple(doc["chunks"]),
                dtype=dtype,
                fill_value=_decode_fill(doc.get("fill_value"), dtype),
                codec=codec,
                level=level,
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise FormatError(f"malformed array metadata: {exc!r}") from exc

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ArrayMeta":
        doc = load_json(raw, ZARRAY)
        if not isinstance(doc, dict):
            raise FormatError(".zarray must hold an object")
        return cls.from_json(doc)


# -- arrays ------------------------------------------------------------------


class ChunkCache:
    """Per-query memo of decoded chunks so each key is fetched at most once.

    ``fetches`` tallies distinct chunks fetched per array path.
    """

    def __init__(self):
        self._chunks: dict[tuple[str, tuple[int, ...]], np.ndarray] = {}
        self._lock = threading.Lock()
        self.fetches: Counter[str] = Counter()

    def get(self, array: "ZArray", coord: tuple[int, ...]) -> np.ndarray:
        key = (array.path, coord)
        with self._lock:
            hit = self._chunks.get(key)
        if hit is not None:
            return hit
        block = array.get_chunk(coord)
        with self._lock:
            if key not in self._chunks:
                self._chunks[key] = block
                self.fetches[array.path] += 1
            return self._chunks[key]

    def evict(self, path: str) -> None:
        """Drop cached chunks of one array; its fetch tally is kept."""
        with self._lock:
            for key in [k for k in self._chunks if k[0] == path]:
                del self._chunks[key]

    def __len__(self):
        return sum(self.fetches.values())


class ZArray:
    """One chunked array inside a store."""

    def __init__(self, store, path: str, meta: ArrayMeta):
        self.store = store
        self.path = path.strip("/")
        self.meta = meta

    @classmethod
    def create(
        cls,
        store,
        path: str,
        shape: Sequence[int],
        chunks: Sequence[int],
        dtype: str = "float64",
        fill_value=0.0,
        codec: str = "none",
        level: int = DEFAULT_DEFLATE_LEVEL,
        attrs: dict | None = None,
    ) -> "ZArray":
        meta = ArrayMeta(tuple(shape), tuple(chunks), dtype, fill_value, codec, level)
        store[_join(path, ZARRAY)] = meta.to_bytes()
        if attrs is not None:
            write_attrs(store, path, attrs)
        return cls(store, path, meta)

    @classmethod
    def open(cls, store, path: str) -> "ZArray":
        try:
            raw = store[_join(path, ZARRAY)]
        except KeyError:
            raise DataError(f"no array at {path!r}") from None
        return cls(store, path, ArrayMeta.from_bytes(raw))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.meta.shape

    @property
    def chunks(self) -> tuple[int, ...]:
        return self.meta.chunks

    @property
    def dtype(self) -> np.dtype:
        return self.meta.np_dtype

    @property
    def fill_value(self):
        return self.meta.fill_value

    @property
    def attrs(self) -> dict:
        return read_attrs(self.store, self.path)

    def chunk_key(self, coord: Sequence[int]) -> str:
        return _join(self.path, ".".join(str(int(c)) for c in coord))

    def _check_coord(self, coord: Sequence[int]) -> tuple[int, ...]:
        coord = tuple(int(c) for c in coord)
        if len(coord) != len(self.shape) or any(
            not 0 <= c < n for c, n in zip(coord, self.meta.nchunks)
        ):
            raise BoundsError(f"chunk {coord} outside chunk grid {self.meta.nchunks} of {self.path!r}")
        return coord

    def valid_shape(self, coord: Sequence[int]) -> tuple[int, ...]:
        """Shape of the in-bounds part of chunk ``coord``."""
        return tuple(
            min(c, s - i * c) for i, c, s in zip(coord, self.chunks, self.shape)
        )

    def get_chunk(self, coord: Sequence[int]) -> np.ndarray:
        """Decoded chunk, full chunk shape; out-of-bounds edge cells hold fill_value."""
        coord = self._check_coord(coord)
        key = self.chunk_key(coord)
        try:
            raw = self.store[key]
        except KeyError:
            raw = None
        # a request counts as a fetch even when the key turns out to be absent
        store_counter(self.store).record(0 if raw is None else len(raw))
        if raw is None:
            if self.fill_value is None:
                raise DataError(f"chunk {key!r} is missing and {self.path!r} has no fill_value")
            return np.full(self.chunks, self.fill_value, dtype=self.dtype)
        if self.meta.codec == "deflate":
            try:
                raw = zlib.decompress(raw)
            except zlib.error as exc:
                raise FormatError(f"cannot inflate chunk {key!r}: {exc}") from exc
        expected = math.prod(self.chunks) * self.dtype.itemsize
        if len(raw) != expected:
            raise FormatError(f"chunk {key!r} holds {len(raw)} bytes, expected {expected}")
        return np.frombuffer(raw, dtype=self.dtype).reshape(self.chunks)

    def put_chunk(self, coord: Sequence[int], block) -> None:
        """Store ``block``; edge chunks may be given trimmed to the array bounds."""
        coord = self._check_coord(coord)
        if getattr(self.store, "read_only", False):
            raise ReadOnlyError(f"cannot write {self.path!r}: store is read-only")
        block = np.asarray(block)
        valid = self.valid_shape(coord)
        if block.shape == self.chunks:
            full = np.ascontiguousarray(block, dtype=self.dtype)
        elif block.shape == valid:
            fill = 0 if self.fill_value is None else self.fill_value
            full = np.full(self.chunks, fill, dtype=self.dtype)
            full[tuple(slice(0, v) for v in valid)] = block
        else:
            raise BoundsError(
                f"block shape {block.shape} fits neither chunk {self.chunks} nor edge {valid}"
            )
        raw = full.astype(self.dtype.newbyteorder("<"), copy=False).tobytes()
        if self.meta.codec == "deflate":
            raw = zlib.compress(raw, self.meta.level)
        self.store[self.chunk_key(coord)] = raw

    def read(self, selection: Sequence[slice], cache: ChunkCache | None = None) -> np.ndarray:
        """Read a hyper-rectangle given as one step-1 slice per dimension."""
        sel = []
        for sl, n in zip(selection, self.shape):
            start, stop, step = sl.indices(n)
            if step != 1:
                raise BoundsError("only contiguous selections are supported")
            sel.append((start, max(start, stop)))
        if len(sel) != len(self.shape):
            raise BoundsError(f"selection rank {len(sel)} != array rank {len(self.shape)}")
        out = np.empty(tuple(b - a for a, b in sel), dtype=self.dtype)
        if out.size == 0:
            return out
        spans = [
            range(a // c, (b - 1) // c + 1) for (a, b), c in zip(sel, self.chunks)
        ]
        for coord in _product(spans):
            block = cache.get(self, coord) if cache is not None else self.get_chunk(coord)
            src, dst = [], []
            for (a, b), i, c in zip(sel, coord, self.chunks):
                lo, hi = max(a, i * c), min(b, (i + 1) * c)
                src.append(slice(lo - i * c, hi - i * c))
                dst.append(slice(lo - a, hi - a))
            out[tuple(dst)] = block[tuple(src)]
        return out

    def __getitem__(self, selection) -> np.ndarray:
        if not isinstance(selection, tuple):
            selection = (selection,)
        if Ellipsis in selection:
            i = selection.index(Ellipsis)
            fill = (slice(None),) * (len(self.shape) - len(selection) + 1)
            selection = selection[:i] + fill + selection[i + 1 :]
        selection = tuple(selection) + (slice(None),) * (len(self.shape) - len(selection))
        return self.read(selection)

    def write(self, data) -> None:
        """Write a whole array chunk by chunk in row-major chunk order."""
        data = np.asarray(data)
        if data.shape != self.shape:
            raise BoundsError(f"data shape {data.shape} != array shape {self.shape}")
        for coord in _product([range(n) for n in self.meta.nchunks]):
            sl = tuple(
                slice(i * c, min((i + 1) * c, s)) for i, c, s in zip(coord, self.chunks, self.shape)
            )
            self.put_chunk(coord, data[sl])


def _product(ranges):
    return itertools.product(*ranges)
