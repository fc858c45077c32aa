"""Shared fixtures and independent oracles for the test suite."""

import math

import numpy as np
import pytest

from ragatr.core import ExemplarMeta, ExemplarRecord, VehicleSpec, make_record
from ragatr.index import MATCH_ALL

NINE_TYPES = ("2S1", "BRDM-2", "BTR-60", "D7", "SLICY", "T-62", "T-72", "ZIL-131", "ZSU-23-4")

# Attribute values are test configuration, not authoritative data.
_SPEC_ROWS = [
    ("2S1", 16.0, 7.26, 2.85, 2.73, True, ("tracked", "howitzer", "turret")),
    ("BRDM-2", 7.0, 5.75, 2.35, 2.31, True, ("wheeled", "amphibious", "scout")),
    ("BTR-60", 10.3, 7.56, 2.83, 2.31, True, ("wheeled", "amphibious", "troop carrier")),
    ("D7", 20.0, 4.55, 2.64, 2.74, False, ("tracked", "bulldozer", "unarmored")),
    ("SLICY", 2.5, 3.05, 3.05, 2.0, False, ("static", "calibration")),
    ("T-62", 37.0, 6.63, 3.3, 2.4, True, ("tracked", "turret", "main gun")),
    ("T-72", 41.5, 6.95, 3.59, 2.23, True, ("tracked", "turret", "main gun", "composite armor")),
    ("ZIL-131", 6.7, 7.04, 2.49, 2.97, False, ("wheeled", "truck", "unarmored")),
    ("ZSU-23-4", 19.0, 6.54, 3.13, 2.58, True, ("tracked", "anti-aircraft", "turret", "radar")),
]


def nine_type_specs() -> dict[str, VehicleSpec]:
    return {
        t: VehicleSpec(t, w, l, wd, h, mw, frozenset(q))
        for t, w, l, wd, h, mw, q in _SPEC_ROWS
    }


@pytest.fixture(scope="session")
def specs9() -> dict[str, VehicleSpec]:
    return nine_type_specs()


def random_records(rng, n, dim, types=("A", "B", "C"), duplicate_every=0):
    """Random unit records; every `duplicate_every`-th record clones the
    previous embedding bit-for-bit to force exact score ties."""
    records = []
    for i in range(n):
        meta = ExemplarMeta(
            id=f"r{i:05d}",
            target_type=types[i % len(types)],
            depression_deg=float(rng.choice([15.0, 17.0, 30.0])),
            azimuth_deg=float(rng.uniform(0.0, 360.0)),
            serial=f"sn{i:04d}" if i % 2 == 0 else None,
        )
        if duplicate_every and i % duplicate_every == 0 and i > 0:
            records.append(ExemplarRecord(meta, records[i - 1].embedding))
        else:
            records.append(make_record(meta, rng.standard_normal(dim)))
    return records


def knn_oracle(records, query, k, metadata_filter=MATCH_ALL):
    """Independent linear-scan reference: per-record float64 dot products in
    a plain Python loop, sorted by (-score, id)."""
    q = np.asarray(query, dtype=np.float32).astype(np.float64)
    qnorm = math.sqrt(float(np.dot(q, q)))
    scored = []
    for record in records:
        if not metadata_filter.matches(record.meta):
            continue
        score = float(np.dot(record.embedding.astype(np.float64), q)) / qnorm
        scored.append((score, record.meta.id, record.meta.target_type))
    scored.sort(key=lambda item: (-item[0], item[1]))
    return scored[:k]


def nn_purity(points) -> float:
    """1-nearest-neighbor class purity of projected 2-D points."""
    xy = np.array([[p.x, p.y] for p in points])
    labels = [p.target_type for p in points]
    d = ((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    nearest = d.argmin(axis=1)
    return float(np.mean([labels[i] == labels[j] for i, j in enumerate(nearest)]))
