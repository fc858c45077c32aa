"""Per-seed evaluation runs over a corpus: split, index the train half,
score validation queries through retrieval metrics and the configured
generator on all five tasks, and aggregate the runs into a report.

The class prior driving every weighted-random baseline comes from the
TRAIN split of each run (the distribution the deployed system would
know), not from the validation queries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .core import ClassDistribution, ExemplarRecord, VehicleSpec, class_distribution
from .errors import ConfigError, MissingSpecError
from .index import MATCH_ALL, ExemplarIndex, MetadataFilter
from .ingest import DatasetManifest, stratified_split
from .metrics import (
    EvalReport,
    RegressionSample,
    RetrievalOutcome,
    accuracy_at_1,
    aggregate_runs,
    all_correct_at_k,
    any_correct_at_k,
    binary_detection_accuracy,
    classification_accuracy,
    pooled_dimension_baseline,
    precision_at_k,
    qualities_jaccard_mean,
    qualities_set_accuracy,
    random_baseline_binary,
    random_baseline_regression,
    random_baseline_retrieval,
    regression_metrics,
)
from .pipeline import (
    GeneratorClient,
    StructuredAnswer,
    StubGeneratorClient,
    VqaQuestion,
    answer_pipeline,
    derive_seed,
    prior_generate,
)

DIMENSION_TASK_ATTRS = ("length_m", "width_m", "height_m")


@dataclass(frozen=True)
class EvalOutcome:
    """Aggregated report plus the raw per-seed metric maps."""

    report: EvalReport
    per_run: tuple[dict[str, float], ...]
    seeds: tuple[int, ...]
    k: int


def evaluate_corpus(
    records: Sequence[ExemplarRecord],
    specs: Mapping[str, VehicleSpec],
    *,
    seeds: Sequence[int] = (1, 2, 3, 4, 5),
    ratio: float = 0.5,
    k: int = 5,
    client_factory: Callable[[Mapping[str, VehicleSpec]], GeneratorClient] | None = None,
    metadata_filter: MetadataFilter = MATCH_ALL,
    with_baseline: bool = True,
) -> EvalOutcome:
    """Run one evaluation per seed and aggregate the metric maps.

    ``client_factory`` builds the system generator from the spec table;
    it defaults to the deterministic stub.
    """
    if not seeds:
        raise ConfigError("seed list must not be empty")
    if client_factory is None:
        client_factory = StubGeneratorClient
    runs = [
        run_seed(
            records,
            specs,
            seed=seed,
            ratio=ratio,
            k=k,
            client=client_factory(specs),
            metadata_filter=metadata_filter,
            with_baseline=with_baseline,
        )
        for seed in seeds
    ]
    return EvalOutcome(
        report=aggregate_runs(runs),
        per_run=tuple(runs),
        seeds=tuple(int(s) for s in seeds),
        k=k,
    )


def run_seed(
    records: Sequence[ExemplarRecord],
    specs: Mapping[str, VehicleSpec],
    *,
    seed: int,
    ratio: float = 0.5,
    k: int = 5,
    client: GeneratorClient,
    metadata_filter: MetadataFilter = MATCH_ALL,
    with_baseline: bool = True,
) -> dict[str, float]:
    """One split/index/evaluate cycle; returns the flat metric map."""
    records = list(records)
    unknown = sorted({r.meta.target_type for r in records} - set(specs))
    if unknown:
        raise MissingSpecError(f"no vehicle spec for types: {', '.join(unknown)}")

    manifest = DatasetManifest.from_records(records)
    plan = stratified_split(manifest, ratio, seed)
    train = [r for r in records if r.meta.id in plan.train_ids]
    validation = [r for r in records if r.meta.id in plan.val_ids]
    index = ExemplarIndex(train)
    dist = class_distribution(train)

    outcomes = []
    for record in validation:
        hits = index.knn(record.embedding, k, metadata_filter)
        outcomes.append(
            RetrievalOutcome(
                query_id=record.meta.id,
                query_type=record.meta.target_type,
                hit_types=tuple(h.target_type for h in hits),
            )
        )

    metrics: dict[str, float] = {
        "retrieval.accuracy_at_1": accuracy_at_1(outcomes),
        f"retrieval.precision_at_{k}": precision_at_k(outcomes, k),
        f"retrieval.any_correct_at_{k}": any_correct_at_k(outcomes, k),
        f"retrieval.all_correct_at_{k}": all_correct_at_k(outcomes, k),
    }
    if k >= 3:
        metrics["retrieval.all_correct_at_3"] = all_correct_at_k(outcomes, 3)

    def system_answer(record: ExemplarRecord, task: str) -> StructuredAnswer:
        question = VqaQuestion(
            query_id=record.meta.id,
            query_embedding=record.embedding,
            task=task,
            k=k,
            metadata_filter=metadata_filter,
        )
        return answer_pipeline(index, question, client, specs)

    metrics.update(_score_generator(validation, specs, system_answer, prefix=""))
    if with_baseline:
        def baseline_answer(record: ExemplarRecord, task: str) -> StructuredAnswer:
            return prior_generate(dist, specs, task, derive_seed(seed, task, record.meta.id))

        metrics.update(_score_generator(validation, specs, baseline_answer, prefix="baseline."))
    metrics.update(_random_baselines(dist, specs, k))
    return metrics


def _score_generator(
    validation: Sequence[ExemplarRecord],
    specs: Mapping[str, VehicleSpec],
    answer: Callable[[ExemplarRecord, str], StructuredAnswer],
    prefix: str,
) -> dict[str, float]:
    """Score one generator on all five tasks.

    Unparseable answers count as incorrect for classification tasks and
    are excluded from regression sample sets; the exclusion counts are
    reported so they can never vanish silently.
    """
    n = len(validation)
    type_pairs: list[tuple[str, str]] = []
    quality_pairs: list[tuple[frozenset[str], frozenset[str]]] = []
    weapon_pairs: list[tuple[bool, bool]] = []
    type_bad = qualities_bad = weapon_bad = 0
    weight_samples: list[RegressionSample] = []
    dim_samples: list[RegressionSample] = []
    weight_excluded = dims_excluded = 0

    for record in validation:
        truth = specs[record.meta.target_type]

        ans = answer(record, "type")
        if ans.unparseable or ans.target_type is None:
            type_bad += 1
        else:
            type_pairs.append((ans.target_type, record.meta.target_type))

        ans = answer(record, "qualities")
        if ans.unparseable or ans.qualities is None:
            qualities_bad += 1
        else:
            quality_pairs.append((ans.qualities, truth.qualities))

        ans = answer(record, "mounted_weapon")
        if ans.unparseable or ans.mounted_weapon is None:
            weapon_bad += 1
        else:
            weapon_pairs.append((ans.mounted_weapon, truth.mounted_weapon))

        ans = answer(record, "weight")
        if ans.unparseable or ans.weight_tons is None:
            weight_excluded += 1
        else:
            weight_samples.append(
                RegressionSample(record.meta.id, ans.weight_tons, truth.weight_tons, "weight_tons")
            )

        ans = answer(record, "dimensions")
        values = [ans.attribute(a) for a in DIMENSION_TASK_ATTRS]
        if ans.unparseable or any(v is None for v in values):
            dims_excluded += 1
        else:
            for attr, value in zip(DIMENSION_TASK_ATTRS, values):
                dim_samples.append(RegressionSample(record.meta.id, value, truth.attribute(attr), attr))

    def fraction_correct(accuracy_fn, pairs, bad_count):
        if not pairs:
            return 0.0
        return accuracy_fn(pairs) * len(pairs) / (len(pairs) + bad_count)

    out = {
        f"{prefix}classification.type_accuracy": fraction_correct(
            classification_accuracy, type_pairs, type_bad
        ),
        f"{prefix}classification.qualities_set_accuracy": fraction_correct(
            qualities_set_accuracy, quality_pairs, qualities_bad
        ),
        f"{prefix}classification.qualities_jaccard_mean": (
            qualities_jaccard_mean(quality_pairs) * len(quality_pairs) / n if quality_pairs else 0.0
        ),
        f"{prefix}classification.mounted_weapon_accuracy": fraction_correct(
            binary_detection_accuracy, weapon_pairs, weapon_bad
        ),
        f"{prefix}weight.excluded": float(weight_excluded),
        f"{prefix}dimensions.excluded": float(dims_excluded),
    }
    weight = regression_metrics(weight_samples) if weight_samples else None
    dims = regression_metrics(dim_samples) if dim_samples else None
    out[f"{prefix}weight.mae"] = weight.mae if weight else float("nan")
    out[f"{prefix}weight.rmse"] = weight.rmse if weight else float("nan")
    out[f"{prefix}weight.mape_pct"] = weight.mape_pct if weight else float("nan")
    out[f"{prefix}dimensions.mae"] = dims.mae if dims else float("nan")
    out[f"{prefix}dimensions.rmse"] = dims.rmse if dims else float("nan")
    out[f"{prefix}dimensions.mape_pct"] = dims.mape_pct if dims else float("nan")
    return out


def _random_baselines(
    dist: ClassDistribution, specs: Mapping[str, VehicleSpec], k: int
) -> dict[str, float]:
    baseline_k = random_baseline_retrieval(dist, k)
    out = {
        "random.retrieval.accuracy_at_1": baseline_k.acc1,
        f"random.retrieval.precision_at_{k}": baseline_k.precision_k,
        f"random.retrieval.any_correct_at_{k}": baseline_k.any_k,
        f"random.retrieval.all_correct_at_{k}": baseline_k.all_k,
        "random.classification.type_accuracy": baseline_k.acc1,
    }
    if k >= 3:
        out["random.retrieval.all_correct_at_3"] = random_baseline_retrieval(dist, 3).all_k
    p_yes = sum(dist.prob(t) for t in dist.types() if specs[t].mounted_weapon)
    out["random.classification.mounted_weapon_accuracy"] = random_baseline_binary(p_yes)
    weight = random_baseline_regression(dist, specs, "weight_tons")
    out["random.weight.mae"] = weight.mae
    out["random.weight.rmse"] = weight.rmse
    out["random.weight.mape_pct"] = weight.mape_pct
    dims = pooled_dimension_baseline(dist, specs)
    out["random.dimensions.mae"] = dims.mae
    out["random.dimensions.rmse"] = dims.rmse
    out["random.dimensions.mape_pct"] = dims.mape_pct
    return out
