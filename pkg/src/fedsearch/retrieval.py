"""Exact top-K retrieval over stored feature vectors.

Indexing encodes every train/validation image into its bottleneck
vector and stores it with label, magnification, center, and split
metadata.  A query image is encoded the same way and ranked against the
stored vectors by Euclidean distance (64-bit accumulation).  Search is
an exhaustive scan: at the corpus sizes this engine targets, a full
pass is already sub-second, so no approximate structure is used.

Two scenarios are supported.  ``sen1`` restricts candidates to the
query's magnification and returns one global top-K.  ``sen2`` returns a
top-K per magnification group, groups ordered 40x, 100x, 200x, 400x.
Ties break toward the earlier index insertion position.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import autoencoder as ae
from .datasets import MAGNIFICATIONS, DatasetManifest, load_image
from .errors import ConfigError, DecodeError, DimensionError, FeatureIndexError

INDEX_MAGIC = b"FCIX"
INDEX_VERSION = 1
_INDEX_HEADER = struct.Struct("<4sH8sII")  # magic, version, layout id, feature dim, entry count
_U16 = struct.Struct("<H")

SCENARIOS = ("sen1", "sen2")


@dataclass(frozen=True, eq=False)
class IndexEntry:
    id: str
    vector: np.ndarray
    label: str
    magnification: str
    center: str
    split: str


@dataclass(frozen=True, eq=False)
class Hit:
    entry_id: str
    distance: float
    label: str
    magnification: str


@dataclass
class FeatureIndex:
    """Immutable search substrate bound to the encoder that produced it."""

    entries: tuple[IndexEntry, ...]
    layout_id: bytes
    feature_dim: int

    def __post_init__(self):
        self.entries = tuple(self.entries)
        for e in self.entries:
            if e.vector.shape != (self.feature_dim,):
                raise FeatureIndexError(
                    f"entry {e.id!r} has vector shape {e.vector.shape}, expected ({self.feature_dim},)"
                )

    def __len__(self):
        return len(self.entries)

    @cached_property
    def matrix(self) -> np.ndarray:
        """All vectors stacked [N, dim] in insertion order, 64-bit."""
        return np.stack([e.vector for e in self.entries]).astype(np.float64)

    @cached_property
    def magnifications(self) -> tuple[str, ...]:
        """Distinct magnifications: canonical tags first, then first-seen order."""
        present = {e.magnification for e in self.entries}
        ordered = [m for m in MAGNIFICATIONS if m in present]
        for e in self.entries:
            if e.magnification not in MAGNIFICATIONS and e.magnification not in ordered:
                ordered.append(e.magnification)
        return tuple(ordered)

    def label_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.entries:
            counts[e.label] = counts.get(e.label, 0) + 1
        return counts

    def magnification_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.entries:
            counts[e.magnification] = counts.get(e.magnification, 0) + 1
        return counts


@dataclass
class RetrievalResult:
    query_id: str
    hits: list[Hit]
    scenario: str
    elapsed_seconds: float
    groups: list[tuple[str, list[Hit]]] | None = None  # sen2 only


def euclidean(a, b) -> float:
    """Root of the summed squared differences, accumulated in 64-bit."""
    a = a.values if isinstance(a, ae.FeatureVector) else np.asarray(a)
    b = b.values if isinstance(b, ae.FeatureVector) else np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"euclidean: shapes {a.shape} and {b.shape} differ")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.sqrt(np.dot(diff, diff)))


def build_index(
    model: ae.AutoencoderModel,
    manifest: DatasetManifest,
    splits: tuple[str, ...] = ("train", "validation"),
) -> FeatureIndex:
    """Encode every image of the given splits, in manifest order."""
    records = manifest.split_records(*splits)
    if not records:
        raise FeatureIndexError(f"manifest has no records in splits {splits}; an empty index is unusable")
    entries = []
    for record in records:
        image = load_image(record.path)
        vector = ae.encode(model, image, source_id=record.id)
        entries.append(
            IndexEntry(
                id=record.id,
                vector=vector.values.astype(np.float32),
                label=record.label,
                magnification=record.magnification,
                center=record.center,
                split=record.split,
            )
        )
    return FeatureIndex(
        entries=tuple(entries),
        layout_id=model.layout_id,
        feature_dim=model.config.bottleneck_dim,
    )


def _top_k(index: FeatureIndex, query: np.ndarray, k: int, candidates: np.ndarray) -> list[Hit]:
    """Exhaustive scan over ``candidates`` (positions into the index)."""
    if candidates.size == 0:
        return []
    diffs = index.matrix[candidates] - query.astype(np.float64)
    distances = np.sqrt(np.einsum("ij,ij->i", diffs, diffs))
    # Stable sort on distance keeps insertion order among exact ties.
    order = np.argsort(distances, kind="stable")[:k]
    hits = []
    for pos in order:
        entry = index.entries[candidates[pos]]
        hits.append(
            Hit(
                entry_id=entry.id,
                distance=float(distances[pos]),
                label=entry.label,
                magnification=entry.magnification,
            )
        )
    return hits


def search_vector(
    index: FeatureIndex,
    query: np.ndarray,
    k: int,
    scenario: str = "sen1",
    query_magnification: str | None = None,
    query_id: str = "",
) -> RetrievalResult:
    """Rank stored vectors against a prepared query vector."""
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    query = np.asarray(query)
    if query.shape != (index.feature_dim,):
        raise DimensionError(f"query vector shape {query.shape} != ({index.feature_dim},)")

    started = time.perf_counter()
    ids = np.array([e.id for e in index.entries])
    usable = ids != query_id if query_id else np.ones(len(index.entries), dtype=bool)
    magnifications = np.array([e.magnification for e in index.entries])

    if scenario == "sen1":
        if query_magnification is None:
            raise ConfigError("sen1 requires the query magnification")
        mask = usable & (magnifications == query_magnification)
        if not mask.any():
            raise FeatureIndexError(
                f"no index entries at magnification {query_magnification!r}: empty search partition"
            )
        hits = _top_k(index, query, k, np.flatnonzero(mask))
        return RetrievalResult(
            query_id=query_id,
            hits=hits,
            scenario=scenario,
            elapsed_seconds=time.perf_counter() - started,
        )

    groups = []
    for magnification in index.magnifications:
        mask = usable & (magnifications == magnification)
        groups.append((magnification, _top_k(index, query, k, np.flatnonzero(mask))))
    flat = [hit for _, group_hits in groups for hit in group_hits]
    return RetrievalResult(
        query_id=query_id,
        hits=flat,
        scenario=scenario,
        elapsed_seconds=time.perf_counter() - started,
        groups=groups,
    )


def search(
    index: FeatureIndex,
    model: ae.AutoencoderModel,
    query_image: np.ndarray,
    k: int,
    scenario: str = "sen1",
    query_magnification: str | None = None,
    query_id: str = "",
) -> RetrievalResult:
    """Encode a query image and rank the index against it.

    ``elapsed_seconds`` covers feature extraction plus the scan, the
    full latency a caller experiences.
    """
    if index.layout_id != model.layout_id:
        raise FeatureIndexError(
            f"index layout {index.layout_id.hex()} does not match model layout "
            f"{model.layout_id.hex()}; rebuild the index with this encoder"
        )
    started = time.perf_counter()
    query = ae.encode(model, query_image, source_id=query_id).values
    result = search_vector(index, query, k, scenario, query_magnification, query_id)
    result.elapsed_seconds = time.perf_counter() - started
    return result


# -- index file format -------------------------------------------------------

def _pack_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    return _U16.pack(len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes, context: str):
        self.data = data
        self.offset = 0
        self.context = context

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise DecodeError(f"index file truncated {self.context}")
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def take_str(self) -> str:
        (length,) = _U16.unpack(self.take(2))
        return self.take(length).decode("utf-8")


def serialize_index(index: FeatureIndex) -> bytes:
    chunks = [
        _INDEX_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.layout_id, index.feature_dim, len(index.entries))
    ]
    for entry in index.entries:
        chunks.append(_pack_str(entry.id))
        chunks.append(_pack_str(entry.label))
        chunks.append(_pack_str(entry.magnification))
        chunks.append(_pack_str(entry.center))
        chunks.append(_pack_str(entry.split))
        chunks.append(np.ascontiguousarray(entry.vector, dtype="<f4").tobytes())
    return b"".join(chunks)


def deserialize_index(data: bytes) -> FeatureIndex:
    if len(data) < _INDEX_HEADER.size:
        raise DecodeError(f"index file truncated: {len(data)} bytes < {_INDEX_HEADER.size}-byte header")
    magic, version, layout, dim, count = _INDEX_HEADER.unpack_from(data)
    if magic != INDEX_MAGIC:
        raise DecodeError(f"bad index magic {magic!r}")
    if version != INDEX_VERSION:
        raise DecodeError(f"unsupported index format version {version}")
    reader = _Reader(data, "in header")
    reader.offset = _INDEX_HEADER.size
    entries = []
    for ordinal in range(count):
        reader.context = f"in entry {ordinal} of {count}"
        entry_id = reader.take_str()
        label = reader.take_str()
        magnification = reader.take_str()
        center = reader.take_str()
        split = reader.take_str()
        vector = np.frombuffer(reader.take(4 * dim), dtype="<f4").astype(np.float32)
        entries.append(
            IndexEntry(id=entry_id, vector=vector, label=label,
                       magnification=magnification, center=center, split=split)
        )
    if reader.offset != len(data):
        raise DecodeError(f"index file has {len(data) - reader.offset} trailing bytes")
    return FeatureIndex(entries=tuple(entries), layout_id=layout, feature_dim=dim)


def save_index(index: FeatureIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_index(index))


def load_index(path) -> FeatureIndex:
    with open(path, "rb") as fh:
        return deserialize_index(fh.read())
