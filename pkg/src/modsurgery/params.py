"""Named, ordered parameter tensors with a canonical byte format and SHA-256 digests.

The on-disk container (`.mbdp`) is exactly the canonical serialization:

    magic "MBDP" | u32 format_version | u32 entry_count |
    per entry: u32 name_len | name (ascii) | u32 rank | u32 dims... |
               values as little-endian IEEE-754 float64, row-major

Stores are immutable snapshots: surgery and updates return new stores, so a
certificate can reference both the pre- and post-surgery digest. A sidecar
``<path>.sha256`` text file carries the hex digest of the container bytes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

MAGIC = b"MBDP"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")


class Modality(Enum):
    """One input channel of a multimodal sample; ordinal order is L < A < V."""

    L = "L"
    A = "A"
    V = "V"

    @property
    def ordinal(self) -> int:
        return ("L", "A", "V").index(self.value)

    def __lt__(self, other: "Modality") -> bool:
        return self.ordinal < other.ordinal

    @classmethod
    def parse(cls, tag: str) -> "Modality":
        try:
            return cls(tag)
        except ValueError:
            raise ValueError(f"unknown modality tag {tag!r}; expected one of L, A, V") from None


MODALITIES = (Modality.L, Modality.A, Modality.V)


class StoreError(ValueError):
    """Invalid store construction or use (bad names, shapes, indices, values)."""


@dataclass(frozen=True)
class TensorEntry:
    """A named float64 tensor. `role_tags` are derived metadata, never serialized."""

    name: str
    values: np.ndarray
    role_tags: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if not self.name or not self.name.isascii():
            raise StoreError(f"entry name must be nonempty ASCII, got {self.name!r}")
        arr = np.ascontiguousarray(self.values, dtype=np.float64)
        if arr.ndim < 1:
            arr = arr.reshape(1)
        if any(d <= 0 for d in arr.shape):
            raise StoreError(f"entry {self.name!r} has a non-positive dimension {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise StoreError(f"entry {self.name!r} contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class GlobalIndex:
    """A single coordinate addressed as (entry name, row-major offset)."""

    entry_name: str
    offset: int

    def as_pair(self) -> tuple[str, int]:
        return (self.entry_name, self.offset)


class ParameterStore:
    """Ordered, immutable collection of named tensors with flat global indexing."""

    def __init__(self, entries: Iterable[TensorEntry], format_version: int = FORMAT_VERSION):
        self.entries: tuple[TensorEntry, ...] = tuple(entries)
        self.format_version = int(format_version)
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise StoreError(f"duplicate entry names: {dupes}")
        self._by_name = {e.name: e for e in self.entries}
        # cumulative start offsets for flat indexing, in entry-insertion order
        starts = {}
        total = 0
        for e in self.entries:
            starts[e.name] = total
            total += e.size
        self._starts = starts
        self._total = total
        self._start_array = np.array([starts[e.name] for e in self.entries], dtype=np.int64)

    def __len__(self) -> int:
        return self._total

    def __iter__(self) -> Iterator[TensorEntry]:
        return iter(self.entries)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def entry(self, name: str) -> TensorEntry:
        if name not in self._by_name:
            raise StoreError(f"no entry named {name!r}")
        return self._by_name[name]

    def values(self, name: str) -> np.ndarray:
        return self.entry(name).values

    @property
    def total_size(self) -> int:
        return self._total

    def get(self, index: GlobalIndex) -> float:
        entry = self.entry(index.entry_name)
        if not 0 <= index.offset < entry.size:
            raise StoreError(f"offset {index.offset} out of range for {index.entry_name!r} (size {entry.size})")
        return float(entry.values.reshape(-1)[index.offset])

    def index_of(self, flat: int) -> GlobalIndex:
        """Map a flat position in [0, total_size) to (entry, offset)."""
        if not 0 <= flat < self._total:
            raise StoreError(f"flat index {flat} out of range [0, {self._total})")
        pos = int(np.searchsorted(self._start_array, flat, side="right")) - 1
        entry = self.entries[pos]
        return GlobalIndex(entry.name, flat - self._starts[entry.name])

    def flat_of(self, index: GlobalIndex) -> int:
        """Inverse of :meth:`index_of`."""
        entry = self.entry(index.entry_name)
        if not 0 <= index.offset < entry.size:
            raise StoreError(f"offset {index.offset} out of range for {index.entry_name!r} (size {entry.size})")
        return self._starts[index.entry_name] + index.offset

    def to_vector(self) -> np.ndarray:
        """All coordinates concatenated in canonical (entry-insertion) order."""
        if not self.entries:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate([e.values.reshape(-1) for e in self.entries])

    def apply_updates(self, updates: Sequence[tuple[GlobalIndex, float]]) -> "ParameterStore":
        """Return a new store with the listed coordinates replaced.

        All other coordinates are bit-identical; duplicate indices are rejected.
        """
        seen: set[tuple[str, int]] = set()
        per_entry: dict[str, list[tuple[int, float]]] = {}
        for index, value in updates:
            entry = self.entry(index.entry_name)
            if not 0 <= index.offset < entry.size:
                raise StoreError(
                    f"offset {index.offset} out of range for {index.entry_name!r} (size {entry.size})"
                )
            key = index.as_pair()
            if key in seen:
                raise StoreError(f"duplicate update index {key}")
            seen.add(key)
            per_entry.setdefault(index.entry_name, []).append((index.offset, float(value)))
        new_entries = []
        for entry in self.entries:
            if entry.name in per_entry:
                flat = entry.values.reshape(-1).copy()
                for offset, value in per_entry[entry.name]:
                    flat[offset] = value
                new_entries.append(
                    TensorEntry(entry.name, flat.reshape(entry.shape), entry.role_tags)
                )
            else:
                new_entries.append(entry)
        return ParameterStore(new_entries, self.format_version)

    def value_equal(self, other: "ParameterStore") -> bool:
        """Bit-exact equality of names, shapes, and values, in order."""
        return canonical_serialize(self) == canonical_serialize(other)


def canonical_serialize(store: ParameterStore) -> bytes:
    """Deterministic bytes for a store; equal stores produce equal bytes."""
    out = bytearray()
    out += MAGIC
    out += _U32.pack(store.format_version)
    out += _U32.pack(len(store.entries))
    for entry in store.entries:
        name = entry.name.encode("ascii")
        out += _U32.pack(len(name))
        out += name
        out += _U32.pack(len(entry.shape))
        for dim in entry.shape:
            out += _U32.pack(dim)
        out += entry.values.astype("<f8", copy=False).tobytes(order="C")
    return bytes(out)


def canonical_deserialize(data: bytes) -> ParameterStore:
    """Parse canonical bytes back into a store (inverse of canonical_serialize)."""
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise StoreError("bad magic: not a canonical parameter container")
    pos = 4
    (version,) = _U32.unpack_from(view, pos)
    pos += 4
    (count,) = _U32.unpack_from(view, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (name_len,) = _U32.unpack_from(view, pos)
        pos += 4
        name = bytes(view[pos : pos + name_len]).decode("ascii")
        pos += name_len
        (rank,) = _U32.unpack_from(view, pos)
        pos += 4
        shape = []
        for _ in range(rank):
            (dim,) = _U32.unpack_from(view, pos)
            pos += 4
            shape.append(dim)
        n = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(view, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        entries.append(TensorEntry(name, values.copy()))
    if pos != len(data):
        raise StoreError(f"trailing bytes after entry {count}: {len(data) - pos}")
    return ParameterStore(entries, version)


def digest(store: ParameterStore) -> str:
    """Lowercase hex SHA-256 of the canonical serialization."""
    return hashlib.sha256(canonical_serialize(store)).hexdigest()


def save_store(store: ParameterStore, path: str | Path) -> str:
    """Write the `.mbdp` container and its `.sha256` sidecar; returns the digest."""
    path = Path(path)
    data = canonical_serialize(store)
    path.write_bytes(data)
    hexdigest = hashlib.sha256(data).hexdigest()
    Path(str(path) + ".sha256").write_text(hexdigest + "\n")
    return hexdigest


def load_store(path: str | Path) -> ParameterStore:
    return canonical_deserialize(Path(path).read_bytes())
