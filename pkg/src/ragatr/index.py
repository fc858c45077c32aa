"""Exact cosine k-nearest-neighbor index over exemplar records.

The engine is a brute-force scan by design: results are deterministic,
bit-reproducible, and serve as ground truth for any approximate engine
added later behind the same signature. Ties on score break by ascending
record id so every result list has a total order.

Snapshot format (little-endian): magic ``SRAG`` + version byte 0x01,
u32 dim, u64 record count, then per record: u16 id byte-length, UTF-8 id,
dim float32 embedding components, u32 metadata byte-length, UTF-8 metadata
as a single-line JSON object with keys target_type, serial, depression_deg,
azimuth_deg, condition, source_tag (absent optionals omitted).
"""

from __future__ import annotations

import json
import math
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .core import EMBED_DTYPE, ExemplarMeta, ExemplarRecord, as_embedding
from .errors import (
    ConfigError,
    DataError,
    DimensionMismatchError,
    DuplicateIdError,
    RagatrError,
    SnapshotBadMagicError,
    SnapshotDimensionError,
    SnapshotError,
    SnapshotTruncatedError,
    ZeroVectorError,
)

SNAPSHOT_MAGIC = b"SRAG"
SNAPSHOT_VERSION = 1

FILTER_FIELDS = ("target_type", "serial", "condition", "source_tag", "depression_deg", "azimuth_deg")
NUMERIC_FILTER_FIELDS = ("depression_deg", "azimuth_deg")
FILTER_OPS = ("eq", "ge", "le")

_META_KEY_ORDER = ("target_type", "serial", "depression_deg", "azimuth_deg", "condition", "source_tag")
_META_REQUIRED = ("target_type", "depression_deg", "azimuth_deg")


@dataclass(frozen=True)
class FilterClause:
    """One conjunct of a metadata filter."""

    field: str
    op: str
    value: str | float

    def __post_init__(self):
        if self.field not in FILTER_FIELDS:
            raise ConfigError(f"unknown filter field {self.field!r}")
        if self.op not in FILTER_OPS:
            raise ConfigError(f"unknown filter op {self.op!r}")
        numeric = self.field in NUMERIC_FILTER_FIELDS
        if self.op in ("ge", "le") and not numeric:
            raise ConfigError(f"op {self.op!r} only applies to numeric fields, not {self.field!r}")
        if numeric:
            if isinstance(self.value, bool) or not isinstance(self.value, (int, float)):
                raise ConfigError(f"filter on {self.field!r} needs a numeric value")
            object.__setattr__(self, "value", float(self.value))
        elif not isinstance(self.value, str):
            raise ConfigError(f"filter on {self.field!r} needs a string value")

    def matches(self, meta: ExemplarMeta) -> bool:
        actual = getattr(meta, self.field)
        if self.op == "eq":
            return actual is not None and actual == self.value
        if self.op == "ge":
            return actual >= self.value
        return actual <= self.value


@dataclass(frozen=True)
class MetadataFilter:
    """Conjunction of clauses; an empty clause list matches everything."""

    clauses: tuple[FilterClause, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "clauses", tuple(self.clauses))

    def matches(self, meta: ExemplarMeta) -> bool:
        return all(clause.matches(meta) for clause in self.clauses)


MATCH_ALL = MetadataFilter()


@dataclass(frozen=True)
class RetrievalHit:
    """One retrieved exemplar. Carries the sensor angles so downstream
    context assembly does not need to re-query the index."""

    record_id: str
    target_type: str
    score: float
    rank: int
    depression_deg: float
    azimuth_deg: float


class ExemplarIndex:
    """Immutable flat index; ``append`` returns a new index.

    Reads (``knn``, ``save_snapshot``) are safe from any number of
    concurrent threads because nothing is mutated after construction.
    """

    def __init__(self, records: Sequence[ExemplarRecord]):
        records = tuple(records)
        if not records:
            raise DataError("cannot build an index from an empty record list")
        dim = records[0].dim
        seen: set[str] = set()
        for record in records:
            if record.dim != dim:
                raise DimensionMismatchError(
                    f"record {record.meta.id!r} has dim {record.dim}, index dim is {dim}"
                )
            if record.meta.id in seen:
                raise DuplicateIdError(f"duplicate record id {record.meta.id!r}")
            seen.add(record.meta.id)

        self._records = records
        self._ids = [r.meta.id for r in records]
        self._row_by_id = {rid: row for row, rid in enumerate(self._ids)}
        matrix = np.vstack([r.embedding for r in records]).astype(EMBED_DTYPE)
        matrix.setflags(write=False)
        self._matrix = matrix
        matrix64 = matrix.astype(np.float64)
        matrix64.setflags(write=False)
        self._matrix64 = matrix64
        # Rank of each row's id in lexicographic order; used for tie-breaks.
        order = sorted(range(len(self._ids)), key=self._ids.__getitem__)
        id_rank = np.empty(len(order), dtype=np.int64)
        for rank, row in enumerate(order):
            id_rank[row] = rank
        self._id_rank = id_rank
        self._columns = {
            "target_type": np.array([r.meta.target_type for r in records], dtype=object),
            "serial": np.array([r.meta.serial for r in records], dtype=object),
            "condition": np.array([r.meta.condition for r in records], dtype=object),
            "source_tag": np.array([r.meta.source_tag for r in records], dtype=object),
            "depression_deg": np.array([r.meta.depression_deg for r in records], dtype=np.float64),
            "azimuth_deg": np.array([r.meta.azimuth_deg for r in records], dtype=np.float64),
        }

    @property
    def count(self) -> int:
        return len(self._records)

    @property
    def dim(self) -> int:
        return int(self._matrix.shape[1])

    @property
    def records(self) -> tuple[ExemplarRecord, ...]:
        return self._records

    def record(self, record_id: str) -> ExemplarRecord:
        row = self._row_by_id.get(record_id)
        if row is None:
            raise DataError(f"unknown record id {record_id!r}")
        return self._records[row]

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._row_by_id

    def class_histogram(self) -> dict[str, int]:
        counts = Counter(r.meta.target_type for r in self._records)
        return dict(sorted(counts.items()))

    def _filter_rows(self, metadata_filter: MetadataFilter) -> np.ndarray:
        if not metadata_filter.clauses:
            return np.arange(self.count)
        mask = np.ones(self.count, dtype=bool)
        for clause in metadata_filter.clauses:
            column = self._columns[clause.field]
            if clause.op == "eq":
                if clause.field in NUMERIC_FILTER_FIELDS:
                    mask &= column == clause.value
                else:
                    mask &= np.array([v is not None and v == clause.value for v in column])
            elif clause.op == "ge":
                mask &= column >= clause.value
            else:
                mask &= column <= clause.value
        return np.nonzero(mask)[0]

    def knn(
        self,
        query: Sequence[float] | np.ndarray,
        k: int,
        metadata_filter: MetadataFilter = MATCH_ALL,
    ) -> list[RetrievalHit]:
        """Top-k records by cosine similarity among filter matches.

        Scores descend; exact ties break by ascending record id. Returns
        fewer than ``k`` hits when the filter admits fewer candidates.
        """
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        q = as_embedding(query)
        if q.size != self.dim:
            raise DimensionMismatchError(f"query dim {q.size} does not match index dim {self.dim}")
        q64 = q.astype(np.float64)
        qnorm = math.sqrt(float(np.dot(q64, q64)))
        if qnorm == 0.0:
            raise ZeroVectorError("query vector has zero norm")

        rows = self._filter_rows(metadata_filter)
        if rows.size == 0:
            return []
        scores = self._matrix64[rows] @ q64
        scores /= qnorm
        order = np.lexsort((self._id_rank[rows], -scores))[: min(k, rows.size)]
        hits = []
        for rank, pos in enumerate(order, start=1):
            row = int(rows[pos])
            meta = self._records[row].meta
            hits.append(
                RetrievalHit(
                    record_id=meta.id,
                    target_type=meta.target_type,
                    score=float(scores[pos]),
                    rank=rank,
                    depression_deg=meta.depression_deg,
                    azimuth_deg=meta.azimuth_deg,
                )
            )
        return hits

    def append(self, records: Iterable[ExemplarRecord]) -> "ExemplarIndex":
        """New index over the union of existing and new records."""
        return ExemplarIndex(list(self._records) + list(records))

    def save_snapshot(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC)
            fh.write(bytes([SNAPSHOT_VERSION]))
            fh.write(struct.pack("<I", self.dim))
            fh.write(struct.pack("<Q", self.count))
            for record in self._records:
                id_bytes = record.meta.id.encode("utf-8")
                if len(id_bytes) > 0xFFFF:
                    raise SnapshotError(f"record id too long to snapshot: {record.meta.id[:32]!r}...")
                fh.write(struct.pack("<H", len(id_bytes)))
                fh.write(id_bytes)
                fh.write(record.embedding.astype("<f4").tobytes())
                meta_bytes = _meta_to_json(record.meta).encode("utf-8")
                fh.write(struct.pack("<I", len(meta_bytes)))
                fh.write(meta_bytes)


def _meta_to_json(meta: ExemplarMeta) -> str:
    payload: dict[str, object] = {}
    for key in _META_KEY_ORDER:
        value = getattr(meta, key)
        if value is not None:
            payload[key] = value
    return json.dumps(payload, separators=(",", ":"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise SnapshotTruncatedError("unexpected end of file")
    return data


def load_snapshot(path: str | Path) -> ExemplarIndex:
    """Load an index snapshot written by :meth:`ExemplarIndex.save_snapshot`.

    Raises:
        SnapshotBadMagicError: wrong leading magic bytes.
        SnapshotTruncatedError: file ends before the declared payload.
        SnapshotDimensionError: header declares dimension 0.
        SnapshotError: any other structural problem.
    """
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != SNAPSHOT_MAGIC:
            raise SnapshotBadMagicError(f"bad magic {magic!r}")
        version = _read_exact(fh, 1)[0]
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"unsupported snapshot version {version}")
        dim = struct.unpack("<I", _read_exact(fh, 4))[0]
        if dim < 1:
            raise SnapshotDimensionError("snapshot declares embedding dimension 0")
        count = struct.unpack("<Q", _read_exact(fh, 8))[0]
        if count < 1:
            raise SnapshotError("snapshot contains no records")

        records = []
        for i in range(count):
            id_len = struct.unpack("<H", _read_exact(fh, 2))[0]
            id_bytes = _read_exact(fh, id_len)
            embedding = np.frombuffer(_read_exact(fh, 4 * dim), dtype="<f4")
            meta_len = struct.unpack("<I", _read_exact(fh, 4))[0]
            meta_bytes = _read_exact(fh, meta_len)
            try:
                records.append(_decode_record(id_bytes, embedding, meta_bytes))
            except SnapshotError:
                raise
            except (RagatrError, ValueError, KeyError, TypeError) as exc:
                raise SnapshotError(f"record {i}: {exc}") from exc
        if fh.read(1):
            raise SnapshotError("trailing data after the last record")

    try:
        return ExemplarIndex(records)
    except RagatrError as exc:
        raise SnapshotError(f"snapshot records are inconsistent: {exc}") from exc


def _decode_record(id_bytes: bytes, embedding: np.ndarray, meta_bytes: bytes) -> ExemplarRecord:
    record_id = id_bytes.decode("utf-8")
    payload = json.loads(meta_bytes.decode("utf-8"))
    if not isinstance(payload, dict):
        raise ValueError("metadata is not a JSON object")
    unknown = set(payload) - set(_META_KEY_ORDER)
    if unknown:
        raise ValueError(f"unknown metadata keys {sorted(unknown)}")
    missing = [key for key in _META_REQUIRED if key not in payload]
    if missing:
        raise ValueError(f"missing metadata keys {missing}")
    meta = ExemplarMeta(
        id=record_id,
        target_type=payload["target_type"],
        depression_deg=payload["depression_deg"],
        azimuth_deg=payload["azimuth_deg"],
        serial=payload.get("serial"),
        condition=payload.get("condition"),
        source_tag=payload.get("source_tag"),
    )
    return ExemplarRecord(meta, embedding)
