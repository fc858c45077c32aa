"""Corpus ingestion: manifests, embedding files, vehicle spec tables,
stratified splits, synthetic corpora, and the embedding-service client.

File formats are line-oriented JSON (one object per line) for manifests
and embedding files, and a single JSON array for vehicle spec tables;
they stream, diff, and append cleanly at per-chip granularity.

All seeded randomness uses numpy's Philox counter-based generator keyed
directly by the 64-bit seed, so split plans and synthetic corpora
reproduce bit-for-bit across platforms and releases.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import time
import uuid
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import httpx
import numpy as np

from .core import (
    ExemplarMeta,
    ExemplarRecord,
    VehicleSpec,
    normalize,
)
from .errors import (
    ConfigError,
    DataError,
    DimensionMismatchError,
    ManifestError,
    RagatrError,
    RemoteServiceError,
)

logger = logging.getLogger(__name__)

_MANIFEST_FIELDS = (
    "id",
    "target_type",
    "serial",
    "depression_deg",
    "azimuth_deg",
    "condition",
    "source_tag",
    "image_path",
)
_MANIFEST_REQUIRED = ("id", "target_type", "depression_deg", "azimuth_deg")

_SPEC_FIELDS = ("target_type", "weight_tons", "length_m", "width_m", "height_m", "mounted_weapon", "qualities")

_MAX_SEED = 2**64 - 1


@dataclass(frozen=True)
class ManifestEntry:
    meta: ExemplarMeta
    image_path: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered collection of exemplar metadata with unique ids."""

    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e.meta.id for e in self.entries]

    def class_counts(self) -> dict[str, int]:
        return dict(sorted(Counter(e.meta.target_type for e in self.entries).items()))

    @classmethod
    def from_records(cls, records: Iterable[ExemplarRecord]) -> "DatasetManifest":
        return cls(tuple(ManifestEntry(r.meta) for r in records))


@dataclass(frozen=True)
class SplitPlan:
    """Seeded stratified partition of manifest ids into train and validation."""

    seed: int
    ratio: float
    train_ids: frozenset[str]
    val_ids: frozenset[str]


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    """Shape of a synthetic corpus: per-class counts, dimension, and the
    concentration kappa controlling cluster tightness (0 = direction-uniform)."""

    class_counts: Mapping[str, int]
    dim: int
    concentration: float
    seed: int

    def __post_init__(self):
        if not self.class_counts:
            raise ConfigError("class_counts must not be empty")
        for target_type, count in self.class_counts.items():
            if not target_type:
                raise ConfigError("class names must be nonempty")
            if int(count) < 1:
                raise ConfigError(f"class {target_type!r} needs a count >= 1")
        object.__setattr__(self, "class_counts", dict(self.class_counts))
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}")
        if not (math.isfinite(self.concentration) and self.concentration >= 0.0):
            raise ConfigError(f"concentration must be finite and >= 0, got {self.concentration}")
        _check_seed(self.seed)


def _check_seed(seed: int) -> int:
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed <= _MAX_SEED:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return seed


def _rng(key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=key))


def parse_manifest(path: str | Path) -> DatasetManifest:
    """Parse a line-oriented JSON manifest; errors carry the line number."""
    path = Path(path)
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path.name}: line {lineno}: invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"{path.name}: line {lineno}: expected a JSON object")
            unknown = set(obj) - set(_MANIFEST_FIELDS)
            if unknown:
                raise ManifestError(f"{path.name}: line {lineno}: unknown fields {sorted(unknown)}")
            missing = [k for k in _MANIFEST_REQUIRED if k not in obj]
            if missing:
                raise ManifestError(f"{path.name}: line {lineno}: missing fields {missing}")
            try:
                meta = ExemplarMeta(
                    id=obj["id"],
                    target_type=obj["target_type"],
                    depression_deg=obj["depression_deg"],
                    azimuth_deg=obj["azimuth_deg"],
                    serial=obj.get("serial"),
                    condition=obj.get("condition"),
                    source_tag=obj.get("source_tag"),
                )
            except (RagatrError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path.name}: line {lineno}: {exc}") from exc
            if meta.id in seen:
                raise ManifestError(
                    f"{path.name}: line {lineno}: duplicate id {meta.id!r} (first seen on line {seen[meta.id]})"
                )
            seen[meta.id] = lineno
            image_path = obj.get("image_path")
            if image_path is not None and not isinstance(image_path, str):
                raise ManifestError(f"{path.name}: line {lineno}: image_path must be a string")
            entries.append(ManifestEntry(meta, image_path))
    return DatasetManifest(tuple(entries))


def load_embeddings(path: str | Path, expected_ids: Iterable[str]) -> dict[str, np.ndarray]:
    """Load per-id embeddings from a line-oriented JSON file.

    Vectors are normalized on load. Ids outside ``expected_ids`` are
    skipped with a warning; missing ids raise after the whole file has
    been read so the error can list all of them.
    """
    path = Path(path)
    expected = set(expected_ids)
    vectors: dict[str, np.ndarray] = {}
    dim: int | None = None
    skipped = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path.name}: line {lineno}: invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict) or "id" not in obj or "vec" not in obj:
                raise DataError(f"{path.name}: line {lineno}: expected an object with id and vec")
            record_id = obj["id"]
            if not isinstance(record_id, str) or not record_id:
                raise DataError(f"{path.name}: line {lineno}: id must be a nonempty string")
            if record_id in vectors:
                raise DataError(f"{path.name}: line {lineno}: duplicate id {record_id!r}")
            if record_id not in expected:
                skipped += 1
                logger.warning("%s: line %d: id %r not in manifest, skipped", path.name, lineno, record_id)
                continue
            try:
                vec = normalize(obj["vec"])
            except RagatrError as exc:
                raise DataError(f"{path.name}: id {record_id!r}: {exc}") from exc
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise DimensionMismatchError(
                    f"{path.name}: id {record_id!r} has dim {vec.size}, expected {dim}"
                )
            vectors[record_id] = vec
    missing = sorted(expected - set(vectors))
    if missing:
        shown = ", ".join(missing[:10]) + (", ..." if len(missing) > 10 else "")
        raise DataError(f"{path.name}: missing embeddings for {len(missing)} ids: {shown}")
    if skipped:
        logger.warning("%s: skipped %d ids not present in the manifest", path.name, skipped)
    return vectors


def parse_vehicle_specs(path: str | Path) -> dict[str, VehicleSpec]:
    """Parse a JSON array of vehicle spec objects keyed by target type."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path.name}: invalid JSON: {exc.msg}") from exc
    if not isinstance(payload, list):
        raise DataError(f"{path.name}: expected a JSON array of spec objects")
    specs: dict[str, VehicleSpec] = {}
    for i, obj in enumerate(payload):
        if not isinstance(obj, dict):
            raise DataError(f"{path.name}: entry {i}: expected a JSON object")
        unknown = set(obj) - set(_SPEC_FIELDS)
        if unknown:
            raise DataError(f"{path.name}: entry {i}: unknown fields {sorted(unknown)}")
        missing = [k for k in _SPEC_FIELDS if k not in obj]
        if missing:
            raise DataError(f"{path.name}: entry {i}: missing fields {missing}")
        qualities = obj["qualities"]
        if not isinstance(qualities, list) or any(not isinstance(q, str) for q in qualities):
            raise DataError(f"{path.name}: entry {i}: qualities must be a list of strings")
        if len(set(qualities)) != len(qualities):
            raise DataError(f"{path.name}: entry {i}: duplicate qualities")
        try:
            spec = VehicleSpec(
                target_type=obj["target_type"],
                weight_tons=obj["weight_tons"],
                length_m=obj["length_m"],
                width_m=obj["width_m"],
                height_m=obj["height_m"],
                mounted_weapon=obj["mounted_weapon"],
                qualities=frozenset(qualities),
            )
        except (RagatrError, TypeError, ValueError) as exc:
            raise DataError(f"{path.name}: entry {i}: {exc}") from exc
        if not spec.qualities:
            logger.warning("%s: spec %r has an empty qualities set", path.name, spec.target_type)
        if spec.target_type in specs:
            raise DataError(f"{path.name}: duplicate spec for {spec.target_type!r}")
        specs[spec.target_type] = spec
    return specs


def stratified_split(manifest: DatasetManifest, ratio: float, seed: int) -> SplitPlan:
    """Seeded stratified split: per class, a Philox shuffle of the sorted
    ids sends the first ceil(ratio * n) to train and the rest to validation.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    _check_seed(seed)
    if not manifest.entries:
        raise DataError("cannot split an empty manifest")
    by_class: dict[str, list[str]] = {}
    for entry in manifest.entries:
        by_class.setdefault(entry.meta.target_type, []).append(entry.meta.id)
    for target_type, ids in sorted(by_class.items()):
        if len(ids) < 2:
            raise DataError(f"class {target_type!r} has a single member; stratified split needs >= 2")
    rng = _rng(seed)
    train: set[str] = set()
    val: set[str] = set()
    for target_type in sorted(by_class):
        ids = sorted(by_class[target_type])
        perm = rng.permutation(len(ids))
        n_train = math.ceil(ratio * len(ids))
        shuffled = [ids[j] for j in perm]
        train.update(shuffled[:n_train])
        val.update(shuffled[n_train:])
    return SplitPlan(seed=seed, ratio=ratio, train_ids=frozenset(train), val_ids=frozenset(val))


def generate_synthetic_corpus(cfg: SyntheticCorpusConfig) -> list[ExemplarRecord]:
    """Deterministic synthetic corpus for desk-scale testing.

    Each class gets a random unit mean direction; every sample is
    normalize(kappa * mean + standard Gaussian noise). kappa 0 gives
    direction-uniform vectors, large kappa tight clusters.
    """
    rng = _rng(cfg.seed)
    records: list[ExemplarRecord] = []
    for target_type in sorted(cfg.class_counts):
        count = int(cfg.class_counts[target_type])
        mean = rng.standard_normal(cfg.dim)
        mean /= math.sqrt(float(np.dot(mean, mean)))
        for i in range(count):
            raw = cfg.concentration * mean + rng.standard_normal(cfg.dim)
            depression = 15.0 if rng.random() < 0.5 else 17.0
            azimuth = float(rng.uniform(0.0, 360.0))
            meta = ExemplarMeta(
                id=f"{target_type}-{i:05d}",
                target_type=target_type,
                depression_deg=depression,
                azimuth_deg=azimuth,
                source_tag="synthetic",
            )
            records.append(ExemplarRecord(meta, normalize(raw)))
    return records


def build_records(
    manifest: DatasetManifest, vectors: Mapping[str, np.ndarray]
) -> list[ExemplarRecord]:
    """Join manifest entries with their embeddings, in manifest order."""
    missing = sorted(e.meta.id for e in manifest.entries if e.meta.id not in vectors)
    if missing:
        shown = ", ".join(missing[:10]) + (", ..." if len(missing) > 10 else "")
        raise DataError(f"missing embeddings for {len(missing)} ids: {shown}")
    return [ExemplarRecord(e.meta, vectors[e.meta.id]) for e in manifest.entries]


class EmbeddingServiceClient:
    """Client for the remote embedding service.

    POSTs ``{endpoint}/v1/embed`` with ``{id, image}`` (base64 image bytes)
    and expects ``{id, vec}`` back. Transport failures and 5xx responses
    retry with exponential backoff; other non-2xx responses fail fast.
    """

    def __init__(
        self,
        endpoint: str,
        *,
        timeout: float = 30.0,
        max_attempts: int = 3,
        backoff_base: float = 0.25,
        transport: httpx.BaseTransport | None = None,
    ):
        if max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        self.endpoint = endpoint.rstrip("/")
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._client = httpx.Client(base_url=self.endpoint, timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "EmbeddingServiceClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def embed(self, record_id: str, image_bytes: bytes) -> np.ndarray:
        """Fetch the embedding for one image; returns the raw vector."""
        payload = {"id": record_id, "image": base64.b64encode(image_bytes).decode("ascii")}
        last_error = "no attempt made"
        for attempt in range(1, self.max_attempts + 1):
            try:
                response = self._client.post(
                    "/v1/embed",
                    json=payload,
                    headers={"x-ragatr-request-id": uuid.uuid4().hex},
                )
            except httpx.HTTPError as exc:
                last_error = f"transport error: {exc}"
            else:
                if response.is_success:
                    return self._decode(record_id, response)
                last_error = f"status {response.status_code}"
                if response.status_code < 500:
                    raise RemoteServiceError(
                        f"embedding service returned {response.status_code} for id {record_id!r}"
                    )
            if attempt < self.max_attempts:
                time.sleep(self.backoff_base * 2 ** (attempt - 1))
        raise RemoteServiceError(
            f"embedding service failed for id {record_id!r} after {self.max_attempts} attempts ({last_error})"
        )

    @staticmethod
    def _decode(record_id: str, response: httpx.Response) -> np.ndarray:
        try:
            body = response.json()
        except ValueError as exc:
            raise RemoteServiceError(f"embedding service sent invalid JSON for id {record_id!r}") from exc
        if not isinstance(body, dict) or "vec" not in body:
            raise RemoteServiceError(f"embedding service response missing vec for id {record_id!r}")
        if body.get("id") != record_id:
            raise RemoteServiceError(
                f"embedding service answered id {body.get('id')!r} to a request for {record_id!r}"
            )
        return np.asarray(body["vec"], dtype=np.float64)


def fetch_embeddings(
    client: EmbeddingServiceClient,
    manifest: DatasetManifest,
    *,
    concurrency: int = 8,
) -> dict[str, np.ndarray]:
    """Fetch one embedding per manifest entry through ``client``.

    Up to ``concurrency`` requests run at once; results assemble in
    manifest order keyed by id, so concurrency never changes the output.
    Per-id failures are collected and reported together.
    """
    if not manifest.entries:
        return {}
    missing_paths = sorted(e.meta.id for e in manifest.entries if not e.image_path)
    if missing_paths:
        shown = ", ".join(missing_paths[:10]) + (", ..." if len(missing_paths) > 10 else "")
        raise DataError(f"{len(missing_paths)} manifest entries lack image_path: {shown}")

    def fetch_one(entry: ManifestEntry) -> np.ndarray:
        image = Path(entry.image_path).read_bytes()
        return client.embed(entry.meta.id, image)

    raw: dict[str, np.ndarray] = {}
    failures: dict[str, str] = {}
    workers = max(1, min(concurrency, len(manifest.entries)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {e.meta.id: pool.submit(fetch_one, e) for e in manifest.entries}
        for record_id, future in futures.items():
            try:
                raw[record_id] = future.result()
            except (RagatrError, OSError) as exc:
                failures[record_id] = str(exc)
    if failures:
        parts = [f"{rid}: {failures[rid]}" for rid in sorted(failures)[:5]]
        more = f" (and {len(failures) - 5} more)" if len(failures) > 5 else ""
        raise RemoteServiceError(f"embedding fetch failed for {len(failures)} ids: " + "; ".join(parts) + more)

    vectors: dict[str, np.ndarray] = {}
    dim: int | None = None
    for entry in manifest.entries:
        vec = raw[entry.meta.id]
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise DimensionMismatchError(
                f"inconsistent dimension from embedding service: got {vec.size} for id "
                f"{entry.meta.id!r} after {dim}"
            )
        try:
            vectors[entry.meta.id] = normalize(vec)
        except RagatrError as exc:
            raise DataError(f"embedding for id {entry.meta.id!r}: {exc}") from exc
    return vectors


def write_manifest(entries: Iterable[ManifestEntry], path: str | Path) -> None:
    """Write manifest entries as line-oriented JSON (inverse of parse_manifest)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for entry in entries:
            obj: dict[str, object] = {"id": entry.meta.id, "target_type": entry.meta.target_type}
            if entry.meta.serial is not None:
                obj["serial"] = entry.meta.serial
            obj["depression_deg"] = entry.meta.depression_deg
            obj["azimuth_deg"] = entry.meta.azimuth_deg
            if entry.meta.condition is not None:
                obj["condition"] = entry.meta.condition
            if entry.meta.source_tag is not None:
                obj["source_tag"] = entry.meta.source_tag
            if entry.image_path is not None:
                obj["image_path"] = entry.image_path
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def write_embeddings(vectors: Mapping[str, Sequence[float] | np.ndarray], path: str | Path) -> None:
    """Write an id -> vector mapping as line-oriented JSON."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record_id, vec in vectors.items():
            values = [float(v) for v in np.asarray(vec)]
            fh.write(json.dumps({"id": record_id, "vec": values}, separators=(",", ":")) + "\n")


def write_vehicle_specs(specs: Mapping[str, VehicleSpec], path: str | Path) -> None:
    """Write a spec table as a JSON array sorted by target type."""
    payload = []
    for target_type in sorted(specs):
        spec = specs[target_type]
        payload.append(
            {
                "target_type": spec.target_type,
                "weight_tons": spec.weight_tons,
                "length_m": spec.length_m,
                "width_m": spec.width_m,
                "height_m": spec.height_m,
                "mounted_weapon": spec.mounted_weapon,
                "qualities": sorted(spec.qualities),
            }
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
