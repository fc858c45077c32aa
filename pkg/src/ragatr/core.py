"""Domain types and elementary vector math shared by every other module.

Embeddings are stored as float32 arrays while dot products accumulate in
float64, matching common embedding storage without compounding rounding
error. Records hold unit-normalized embeddings so cosine ranking reduces
to a plain dot product against the query.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DataError,
    DimensionMismatchError,
    InvalidVectorError,
    ZeroVectorError,
)

EMBED_DTYPE = np.float32
UNIT_NORM_TOL = 1e-5

NUMERIC_ATTRIBUTES = ("weight_tons", "length_m", "width_m", "height_m")
DIMENSION_ATTRIBUTES = ("length_m", "width_m", "height_m")

_PROB_SUM_TOL = 1e-9


def as_embedding(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Validate raw components and return them as a float32 vector.

    Raises:
        InvalidVectorError: if the input is empty, not 1-D, or contains
            NaN/Inf components.
    """
    vec = np.asarray(values, dtype=EMBED_DTYPE)
    if vec.ndim != 1 or vec.size == 0:
        raise InvalidVectorError("embedding must be a nonempty 1-D sequence")
    if not np.all(np.isfinite(vec)):
        raise InvalidVectorError("embedding contains non-finite components")
    return vec


def l2_norm(vec: Sequence[float] | np.ndarray) -> float:
    """L2 norm with float64 accumulation."""
    v = as_embedding(vec).astype(np.float64)
    return math.sqrt(float(np.dot(v, v)))


def is_normalized(vec: np.ndarray, tol: float = UNIT_NORM_TOL) -> bool:
    return abs(l2_norm(vec) - 1.0) <= tol


def cosine_similarity(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """Cosine similarity dot(a,b) / (|a|*|b|), clamped to [-1, 1].

    Raises:
        DimensionMismatchError: if the vectors differ in length.
        ZeroVectorError: if either vector has zero norm.
    """
    va = as_embedding(a)
    vb = as_embedding(b)
    if va.size != vb.size:
        raise DimensionMismatchError(f"dimension mismatch: {va.size} != {vb.size}")
    a64 = va.astype(np.float64)
    b64 = vb.astype(np.float64)
    na = math.sqrt(float(np.dot(a64, a64)))
    nb = math.sqrt(float(np.dot(b64, b64)))
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity is undefined for a zero-norm vector")
    sim = float(np.dot(a64, b64)) / (na * nb)
    return min(1.0, max(-1.0, sim))


def normalize(vec: Sequence[float] | np.ndarray) -> np.ndarray:
    """Return the unit-norm float32 copy of ``vec``.

    Raises:
        ZeroVectorError: if the vector has zero norm.
    """
    v = as_embedding(vec)
    norm = math.sqrt(float(np.dot(v.astype(np.float64), v.astype(np.float64))))
    if norm == 0.0:
        raise ZeroVectorError("cannot normalize a zero vector")
    return (v.astype(np.float64) / norm).astype(EMBED_DTYPE)


@dataclass(frozen=True)
class ExemplarMeta:
    """Metadata for one indexed SAR chip.

    ``depression_deg`` must lie in [0, 90] and ``azimuth_deg`` in [0, 360).
    """

    id: str
    target_type: str
    depression_deg: float
    azimuth_deg: float
    serial: str | None = None
    condition: str | None = None
    source_tag: str | None = None

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise DataError("record id must be a nonempty string")
        if not isinstance(self.target_type, str) or not self.target_type:
            raise DataError(f"record {self.id!r}: target_type must be a nonempty string")
        object.__setattr__(self, "depression_deg", float(self.depression_deg))
        object.__setattr__(self, "azimuth_deg", float(self.azimuth_deg))
        if not 0.0 <= self.depression_deg <= 90.0:
            raise DataError(
                f"record {self.id!r}: depression_deg {self.depression_deg} outside [0, 90]"
            )
        if not 0.0 <= self.azimuth_deg < 360.0:
            raise DataError(
                f"record {self.id!r}: azimuth_deg {self.azimuth_deg} outside [0, 360)"
            )


@dataclass(frozen=True, eq=False)
class ExemplarRecord:
    """An indexed exemplar: metadata plus a unit-normalized embedding."""

    meta: ExemplarMeta
    embedding: np.ndarray

    def __post_init__(self):
        emb = as_embedding(self.embedding).copy()
        if abs(l2_norm(emb) - 1.0) > UNIT_NORM_TOL:
            raise InvalidVectorError(
                f"record {self.meta.id!r}: embedding is not unit-normalized"
            )
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)

    @property
    def dim(self) -> int:
        return int(self.embedding.size)


def make_record(meta: ExemplarMeta, values: Sequence[float] | np.ndarray) -> ExemplarRecord:
    """Build a record from raw (not yet normalized) embedding components."""
    return ExemplarRecord(meta, normalize(values))


@dataclass(frozen=True)
class VehicleSpec:
    """Ground-truth attributes for one target type."""

    target_type: str
    weight_tons: float
    length_m: float
    width_m: float
    height_m: float
    mounted_weapon: bool
    qualities: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.target_type:
            raise DataError("vehicle spec needs a nonempty target_type")
        for name in NUMERIC_ATTRIBUTES:
            value = float(getattr(self, name))
            object.__setattr__(self, name, value)
            if not value > 0.0:
                raise DataError(f"spec {self.target_type!r}: {name} must be positive, got {value}")
        qualities = frozenset(self.qualities)
        if any(not q for q in qualities):
            raise DataError(f"spec {self.target_type!r}: qualities must be nonempty strings")
        object.__setattr__(self, "qualities", qualities)
        object.__setattr__(self, "mounted_weapon", bool(self.mounted_weapon))

    def attribute(self, name: str) -> float:
        if name not in NUMERIC_ATTRIBUTES:
            raise DataError(f"unknown numeric attribute {name!r}")
        return float(getattr(self, name))


@dataclass(frozen=True)
class ClassDistribution:
    """Per-type probabilities; each in (0, 1], summing to 1 within 1e-9."""

    probs: Mapping[str, float]

    def __post_init__(self):
        if not self.probs:
            raise DataError("class distribution must not be empty")
        clean: dict[str, float] = {}
        for target_type, p in self.probs.items():
            p = float(p)
            if not 0.0 < p <= 1.0:
                raise DataError(f"probability for {target_type!r} outside (0, 1]: {p}")
            clean[target_type] = p
        total = math.fsum(clean.values())
        if abs(total - 1.0) > _PROB_SUM_TOL:
            raise DataError(f"probabilities sum to {total!r}, expected 1.0")
        object.__setattr__(self, "probs", MappingProxyType(clean))

    def types(self) -> tuple[str, ...]:
        """Target types in sorted order (the canonical iteration order)."""
        return tuple(sorted(self.probs))

    def prob(self, target_type: str) -> float:
        return self.probs[target_type]

    def as_arrays(self) -> tuple[tuple[str, ...], np.ndarray]:
        """(sorted types, matching probability vector)."""
        types = self.types()
        return types, np.array([self.probs[t] for t in types], dtype=np.float64)


def class_distribution(records: Iterable[ExemplarRecord]) -> ClassDistribution:
    """Empirical distribution of target types over ``records``."""
    counts = Counter(r.meta.target_type for r in records)
    if not counts:
        raise DataError("cannot compute a class distribution from no records")
    total = sum(counts.values())
    return ClassDistribution({t: c / total for t, c in counts.items()})
