import json
import math

import httpx
import numpy as np
import pytest

from conftest import nine_type_specs
from ragatr.core import class_distribution
from ragatr.errors import (
    ConfigError,
    DataError,
    DimensionMismatchError,
    ManifestError,
    RemoteServiceError,
)
from ragatr.index import ExemplarIndex
from ragatr.ingest import (
    DatasetManifest,
    EmbeddingServiceClient,
    SyntheticCorpusConfig,
    build_records,
    fetch_embeddings,
    generate_synthetic_corpus,
    load_embeddings,
    parse_manifest,
    parse_vehicle_specs,
    stratified_split,
    write_embeddings,
    write_manifest,
    write_vehicle_specs,
)


def _write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _line(i, target="A", **extra):
    obj = {"id": f"c{i}", "target_type": target, "depression_deg": 15, "azimuth_deg": 10.0 * i}
    obj.update(extra)
    return json.dumps(obj)


class TestParseManifest:
    def test_three_lines(self, tmp_path):
        path = tmp_path / "m.jsonl"
        _write_lines(path, [_line(0), _line(1, "B", serial="x9"), _line(2, image_path="img/2.png")])
        manifest = parse_manifest(path)
        assert len(manifest) == 3
        assert manifest.entries[1].meta.serial == "x9"
        assert manifest.entries[2].image_path == "img/2.png"
        assert manifest.class_counts() == {"A": 2, "B": 1}

    def test_out_of_range_angle_carries_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        bad = json.dumps({"id": "c9", "target_type": "A", "depression_deg": 95, "azimuth_deg": 0})
        _write_lines(path, [_line(0), bad])
        with pytest.raises(ManifestError, match="line 2"):
            parse_manifest(path)

    def test_duplicate_id_names_it(self, tmp_path):
        path = tmp_path / "m.jsonl"
        _write_lines(path, [_line(0), _line(0)])
        with pytest.raises(ManifestError, match="'c0'"):
            parse_manifest(path)

    def test_invalid_json_and_unknown_field(self, tmp_path):
        path = tmp_path / "m.jsonl"
        _write_lines(path, ["{not json"])
        with pytest.raises(ManifestError, match="line 1"):
            parse_manifest(path)
        _write_lines(path, [_line(0, wheels=8)])
        with pytest.raises(ManifestError, match="wheels"):
            parse_manifest(path)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(_line(0) + "\n\n" + _line(1) + "\n", encoding="utf-8")
        assert len(parse_manifest(path)) == 2


class TestLoadEmbeddings:
    def _embedding_file(self, tmp_path, rows):
        path = tmp_path / "e.jsonl"
        _write_lines(path, [json.dumps(r) for r in rows])
        return path

    def test_full_coverage(self, tmp_path):
        rows = [{"id": f"c{i}", "vec": [1.0, float(i), 0.5, 0.1, 2.0, 1.0, 0.0, 3.0]} for i in range(3)]
        path = self._embedding_file(tmp_path, rows)
        vectors = load_embeddings(path, [f"c{i}" for i in range(3)])
        assert set(vectors) == {"c0", "c1", "c2"}
        for vec in vectors.values():
            assert vec.dtype == np.float32
            assert abs(float(np.linalg.norm(vec)) - 1.0) < 1e-5

    def test_nan_names_id(self, tmp_path):
        path = self._embedding_file(tmp_path, [{"id": "c0", "vec": [1.0, float("nan")]}])
        with pytest.raises(DataError, match="c0"):
            load_embeddings(path, ["c0"])

    def test_missing_ids_listed(self, tmp_path):
        path = self._embedding_file(tmp_path, [{"id": "c0", "vec": [1.0, 2.0]}])
        with pytest.raises(DataError, match="c1"):
            load_embeddings(path, ["c0", "c1"])

    def test_extra_id_skipped_with_warning(self, tmp_path, caplog):
        rows = [{"id": "c0", "vec": [1.0, 2.0]}, {"id": "zz", "vec": [1.0, 2.0]}]
        path = self._embedding_file(tmp_path, rows)
        with caplog.at_level("WARNING"):
            vectors = load_embeddings(path, ["c0"])
        assert set(vectors) == {"c0"}
        assert any("zz" in message for message in caplog.messages)

    def test_dim_mismatch(self, tmp_path):
        rows = [{"id": "c0", "vec": [1.0, 2.0]}, {"id": "c1", "vec": [1.0, 2.0, 3.0]}]
        path = self._embedding_file(tmp_path, rows)
        with pytest.raises(DimensionMismatchError):
            load_embeddings(path, ["c0", "c1"])


class TestVehicleSpecs:
    def test_round_trip_nine(self, tmp_path):
        specs = nine_type_specs()
        path = tmp_path / "specs.json"
        write_vehicle_specs(specs, path)
        parsed = parse_vehicle_specs(path)
        assert parsed == specs

    def test_negative_weight(self, tmp_path):
        path = tmp_path / "specs.json"
        payload = [{"target_type": "T", "weight_tons": -1, "length_m": 5, "width_m": 2,
                    "height_m": 2, "mounted_weapon": True, "qualities": []}]
        path.write_text(json.dumps(payload), encoding="utf-8")
        with pytest.raises(DataError, match="weight_tons"):
            parse_vehicle_specs(path)

    def test_duplicate_type(self, tmp_path):
        path = tmp_path / "specs.json"
        entry = {"target_type": "T-72", "weight_tons": 41.5, "length_m": 6.95, "width_m": 3.59,
                 "height_m": 2.23, "mounted_weapon": True, "qualities": ["tracked"]}
        path.write_text(json.dumps([entry, entry]), encoding="utf-8")
        with pytest.raises(DataError, match="T-72"):
            parse_vehicle_specs(path)

    def test_empty_qualities_warns(self, tmp_path, caplog):
        path = tmp_path / "specs.json"
        payload = [{"target_type": "T", "weight_tons": 1, "length_m": 5, "width_m": 2,
                    "height_m": 2, "mounted_weapon": False, "qualities": []}]
        path.write_text(json.dumps(payload), encoding="utf-8")
        with caplog.at_level("WARNING"):
            parsed = parse_vehicle_specs(path)
        assert parsed["T"].qualities == frozenset()
        assert any("empty qualities" in m for m in caplog.messages)

    def test_duplicate_qualities_rejected(self, tmp_path):
        path = tmp_path / "specs.json"
        payload = [{"target_type": "T", "weight_tons": 1, "length_m": 5, "width_m": 2,
                    "height_m": 2, "mounted_weapon": False, "qualities": ["a", "a"]}]
        path.write_text(json.dumps(payload), encoding="utf-8")
        with pytest.raises(DataError, match="duplicate qualities"):
            parse_vehicle_specs(path)


def _manifest_with_counts(counts):
    from ragatr.core import ExemplarMeta
    from ragatr.ingest import ManifestEntry

    entries = []
    i = 0
    for target, n in counts.items():
        for _ in range(n):
            entries.append(
                ManifestEntry(
                    ExemplarMeta(
                        id=f"c{i}",
                        target_type=target,
                        depression_deg=15.0,
                        azimuth_deg=float(i % 360),
                    )
                )
            )
            i += 1
    return DatasetManifest(tuple(entries))


class TestStratifiedSplit:
    def test_forced_rounding(self):
        manifest = _manifest_with_counts({"A": 4, "B": 2})
        plan = stratified_split(manifest, 0.5, seed=1)
        train_types = [e.meta.target_type for e in manifest.entries if e.meta.id in plan.train_ids]
        assert sorted(train_types) == ["A", "A", "B"]
        assert len(plan.val_ids) == 3

    def test_determinism(self):
        manifest = _manifest_with_counts({"A": 10, "B": 7, "C": 3})
        a = stratified_split(manifest, 0.5, seed=42)
        b = stratified_split(manifest, 0.5, seed=42)
        assert a.train_ids == b.train_ids
        assert a.val_ids == b.val_ids
        c = stratified_split(manifest, 0.5, seed=43)
        assert c.train_ids != a.train_ids

    def test_singleton_class_named(self):
        manifest = _manifest_with_counts({"A": 1})
        with pytest.raises(DataError, match="'A'"):
            stratified_split(manifest, 0.5, seed=1)

    def test_partition_and_proportions(self):
        manifest = _manifest_with_counts({"A": 13, "B": 5, "C": 9})
        for ratio in (0.3, 0.5, 0.7):
            plan = stratified_split(manifest, ratio, seed=7)
            all_ids = set(manifest.ids())
            assert plan.train_ids | plan.val_ids == all_ids
            assert not plan.train_ids & plan.val_ids
            for target, n in manifest.class_counts().items():
                n_train = sum(
                    1
                    for e in manifest.entries
                    if e.meta.target_type == target and e.meta.id in plan.train_ids
                )
                assert n_train == math.ceil(ratio * n)
                assert 0.0 <= n_train - ratio * n < 1.0

    def test_ratio_bounds(self):
        manifest = _manifest_with_counts({"A": 4})
        for ratio in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(ConfigError):
                stratified_split(manifest, ratio, seed=1)

    def test_seed_bounds(self):
        manifest = _manifest_with_counts({"A": 4})
        with pytest.raises(ConfigError):
            stratified_split(manifest, 0.5, seed=-1)
        with pytest.raises(ConfigError):
            stratified_split(manifest, 0.5, seed=2**64)


def _corpus_accuracy_at_1(records, ratio=0.5, seed=1):
    manifest = DatasetManifest.from_records(records)
    plan = stratified_split(manifest, ratio, seed)
    train = [r for r in records if r.meta.id in plan.train_ids]
    val = [r for r in records if r.meta.id in plan.val_ids]
    index = ExemplarIndex(train)
    correct = sum(
        index.knn(r.embedding, 1)[0].target_type == r.meta.target_type for r in val
    )
    return correct / len(val)


class TestSyntheticCorpus:
    def test_deterministic(self):
        cfg = SyntheticCorpusConfig({"A": 5, "B": 5}, dim=8, concentration=3.0, seed=123)
        first = generate_synthetic_corpus(cfg)
        second = generate_synthetic_corpus(cfg)
        assert [r.meta for r in first] == [r.meta for r in second]
        for a, b in zip(first, second):
            assert a.embedding.tobytes() == b.embedding.tobytes()

    def test_high_concentration_separable(self):
        cfg = SyntheticCorpusConfig({"A": 120, "B": 120}, dim=16, concentration=50.0, seed=5)
        records = generate_synthetic_corpus(cfg)
        assert _corpus_accuracy_at_1(records) >= 0.99

    def test_zero_concentration_matches_random_baseline(self):
        accs = []
        for seed in (1, 2, 3):
            cfg = SyntheticCorpusConfig({"A": 150, "B": 150}, dim=16, concentration=0.0, seed=seed)
            accs.append(_corpus_accuracy_at_1(generate_synthetic_corpus(cfg), seed=seed))
        assert abs(float(np.mean(accs)) - 0.5) <= 0.05

    def test_separability_monotone_in_concentration(self):
        # Tolerance: at most one seed-pair inversion per adjacent kappa step.
        kappas = (0.0, 2.0, 10.0, 50.0)
        seeds = (1, 2, 3, 4, 5)
        acc = {}
        for kappa in kappas:
            for seed in seeds:
                cfg = SyntheticCorpusConfig({"A": 60, "B": 60}, dim=16, concentration=kappa, seed=seed)
                acc[(kappa, seed)] = _corpus_accuracy_at_1(generate_synthetic_corpus(cfg), seed=seed)
        for low, high in zip(kappas, kappas[1:]):
            inversions = sum(acc[(high, s)] < acc[(low, s)] for s in seeds)
            assert inversions <= 1, f"kappa {low}->{high}: {inversions} inversions"
        means = [float(np.mean([acc[(k, s)] for s in seeds])) for k in kappas]
        assert means[-1] > means[0]

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SyntheticCorpusConfig({}, dim=8, concentration=1.0, seed=1)
        with pytest.raises(ConfigError):
            SyntheticCorpusConfig({"A": 0}, dim=8, concentration=1.0, seed=1)
        with pytest.raises(ConfigError):
            SyntheticCorpusConfig({"A": 2}, dim=1, concentration=1.0, seed=1)
        with pytest.raises(ConfigError):
            SyntheticCorpusConfig({"A": 2}, dim=8, concentration=-1.0, seed=1)


class TestWriters:
    def test_manifest_round_trip(self, tmp_path):
        cfg = SyntheticCorpusConfig({"A": 4, "B": 3}, dim=4, concentration=2.0, seed=9)
        records = generate_synthetic_corpus(cfg)
        manifest = DatasetManifest.from_records(records)
        path = tmp_path / "m.jsonl"
        write_manifest(manifest.entries, path)
        parsed = parse_manifest(path)
        assert [e.meta for e in parsed.entries] == [e.meta for e in manifest.entries]

    def test_embeddings_round_trip(self, tmp_path):
        cfg = SyntheticCorpusConfig({"A": 4}, dim=6, concentration=2.0, seed=9)
        records = generate_synthetic_corpus(cfg)
        path = tmp_path / "e.jsonl"
        write_embeddings({r.meta.id: r.embedding for r in records}, path)
        vectors = load_embeddings(path, [r.meta.id for r in records])
        for record in records:
            assert np.allclose(vectors[record.meta.id], record.embedding, atol=1e-6)

    def test_build_records_missing_vector(self):
        cfg = SyntheticCorpusConfig({"A": 3}, dim=4, concentration=2.0, seed=9)
        records = generate_synthetic_corpus(cfg)
        manifest = DatasetManifest.from_records(records)
        vectors = {r.meta.id: r.embedding for r in records[:-1]}
        with pytest.raises(DataError, match="A-00002"):
            build_records(manifest, vectors)


def _entry(i, image_path="img.png"):
    from ragatr.core import ExemplarMeta
    from ragatr.ingest import ManifestEntry

    return ManifestEntry(
        ExemplarMeta(id=f"c{i}", target_type="A", depression_deg=15.0, azimuth_deg=0.0),
        image_path,
    )


class TestEmbeddingService:
    def _client(self, handler, **kwargs):
        kwargs.setdefault("backoff_base", 0.001)
        return EmbeddingServiceClient(
            "http://embed.test", transport=httpx.MockTransport(handler), **kwargs
        )

    def test_healthy_fetch(self, tmp_path):
        image = tmp_path / "img.png"
        image.write_bytes(b"fakepixels")
        seen_headers = []

        def handler(request):
            seen_headers.append(request.headers.get("x-ragatr-request-id"))
            body = json.loads(request.content)
            return httpx.Response(200, json={"id": body["id"], "vec": [1.0, 2.0, 2.0]})

        manifest = DatasetManifest((_entry(0, str(image)), _entry(1, str(image))))
        with self._client(handler) as client:
            vectors = fetch_embeddings(client, manifest)
        assert list(vectors) == ["c0", "c1"]
        assert all(abs(float(np.linalg.norm(v)) - 1.0) < 1e-5 for v in vectors.values())
        assert all(h for h in seen_headers)

    def test_inconsistent_dimension(self, tmp_path):
        image = tmp_path / "img.png"
        image.write_bytes(b"x")

        def handler(request):
            body = json.loads(request.content)
            vec = [1.0] * (512 if body["id"] == "c0" else 256)
            return httpx.Response(200, json={"id": body["id"], "vec": vec})

        manifest = DatasetManifest((_entry(0, str(image)), _entry(1, str(image))))
        with self._client(handler) as client:
            with pytest.raises(DimensionMismatchError, match="inconsistent dimension"):
                fetch_embeddings(client, manifest)

    def test_server_down_retries_then_fails(self):
        calls = []

        def handler(request):
            calls.append(1)
            raise httpx.ConnectError("refused")

        with self._client(handler) as client:
            with pytest.raises(RemoteServiceError, match="3 attempts"):
                client.embed("c0", b"x")
        assert len(calls) == 3

    def test_5xx_then_success(self):
        calls = []

        def handler(request):
            calls.append(1)
            if len(calls) < 3:
                return httpx.Response(503)
            body = json.loads(request.content)
            return httpx.Response(200, json={"id": body["id"], "vec": [0.0, 1.0]})

        with self._client(handler) as client:
            vec = client.embed("c0", b"x")
        assert len(calls) == 3
        assert vec.tolist() == [0.0, 1.0]

    def test_4xx_fails_fast(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(404)

        with self._client(handler) as client:
            with pytest.raises(RemoteServiceError, match="404"):
                client.embed("c0", b"x")
        assert len(calls) == 1

    def test_mismatched_response_id(self):
        def handler(request):
            return httpx.Response(200, json={"id": "other", "vec": [1.0]})

        with self._client(handler) as client:
            with pytest.raises(RemoteServiceError, match="other"):
                client.embed("c0", b"x")

    def test_missing_image_path(self):
        manifest = DatasetManifest((_entry(0, None),))
        with self._client(lambda r: httpx.Response(200)) as client:
            with pytest.raises(DataError, match="image_path"):
                fetch_embeddings(client, manifest)

    def test_per_id_failures_reported(self, tmp_path):
        image = tmp_path / "img.png"
        image.write_bytes(b"x")

        def handler(request):
            body = json.loads(request.content)
            if body["id"] == "c1":
                return httpx.Response(400)
            return httpx.Response(200, json={"id": body["id"], "vec": [1.0, 0.0]})

        manifest = DatasetManifest((_entry(0, str(image)), _entry(1, str(image))))
        with self._client(handler) as client:
            with pytest.raises(RemoteServiceError, match="c1"):
                fetch_embeddings(client, manifest)


def test_class_distribution_from_synthetic():
    cfg = SyntheticCorpusConfig({"A": 3, "B": 1}, dim=4, concentration=1.0, seed=2)
    dist = class_distribution(generate_synthetic_corpus(cfg))
    assert dist.probs == {"A": 0.75, "B": 0.25}
