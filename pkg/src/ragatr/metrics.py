"""Retrieval, classification, and regression metrics with their analytic
weighted-random baselines, a Monte Carlo baseline oracle, multi-run
aggregation, and the benchmark-table report renderer.

All metric functions are pure and permutation-invariant in their sample
lists, so runs can be evaluated in parallel and aggregated in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import ClassDistribution, DIMENSION_ATTRIBUTES, NUMERIC_ATTRIBUTES, VehicleSpec
from .errors import ConfigError, DataError, MissingSpecError


@dataclass(frozen=True)
class RetrievalOutcome:
    """Retrieved types (rank order) for one query of known type."""

    query_id: str
    query_type: str
    hit_types: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "hit_types", tuple(self.hit_types))
        if not self.hit_types:
            raise DataError(f"query {self.query_id!r}: hit_types must not be empty")


@dataclass(frozen=True)
class RetrievalBaseline:
    """Weighted-random expectations for the four retrieval statistics at depth k."""

    k: int
    acc1: float
    precision_k: float
    any_k: float
    all_k: float


@dataclass(frozen=True)
class RegressionSample:
    query_id: str
    predicted: float
    truth: float
    attribute: str

    def __post_init__(self):
        if self.attribute not in NUMERIC_ATTRIBUTES:
            raise DataError(f"unknown regression attribute {self.attribute!r}")


@dataclass(frozen=True)
class RegressionMetrics:
    mae: float
    rmse: float
    mape_pct: float


@dataclass(frozen=True)
class MetricRow:
    mean: float
    per_run: tuple[float, ...]


@dataclass(frozen=True)
class EvalReport:
    """Aggregated metrics across repeated split runs."""

    run_count: int
    rows: Mapping[str, MetricRow]

    def mean(self, name: str) -> float:
        return self.rows[name].mean


def _check_outcomes(outcomes: Sequence[RetrievalOutcome], k: int = 1) -> None:
    if not outcomes:
        raise DataError("no retrieval outcomes to score")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    for outcome in outcomes:
        if len(outcome.hit_types) < k:
            raise DataError(
                f"query {outcome.query_id!r} has {len(outcome.hit_types)} hits, need {k}"
            )


def accuracy_at_1(outcomes: Sequence[RetrievalOutcome]) -> float:
    """Fraction of queries whose rank-1 hit matches the query type."""
    _check_outcomes(outcomes, 1)
    return sum(o.hit_types[0] == o.query_type for o in outcomes) / len(outcomes)


def precision_at_k(outcomes: Sequence[RetrievalOutcome], k: int) -> float:
    """Mean fraction of matching types among the top k hits."""
    _check_outcomes(outcomes, k)
    return sum(
        sum(t == o.query_type for t in o.hit_types[:k]) / k for o in outcomes
    ) / len(outcomes)


def any_correct_at_k(outcomes: Sequence[RetrievalOutcome], k: int) -> float:
    """Fraction of queries with at least one matching type in the top k."""
    _check_outcomes(outcomes, k)
    return sum(
        any(t == o.query_type for t in o.hit_types[:k]) for o in outcomes
    ) / len(outcomes)


def all_correct_at_k(outcomes: Sequence[RetrievalOutcome], k: int) -> float:
    """Fraction of queries whose top k hits all match the query type."""
    _check_outcomes(outcomes, k)
    return sum(
        all(t == o.query_type for t in o.hit_types[:k]) for o in outcomes
    ) / len(outcomes)


def random_baseline_retrieval(dist: ClassDistribution, k: int) -> RetrievalBaseline:
    """Closed-form retrieval baselines under the weighted-blind-guess model.

    Model: the query class and each of the k retrieved slots are
    independent draws from ``dist``. Then

        acc1        = sum_t p_t^2
        precision_k = sum_t p_t^2
        any_k       = sum_t p_t * (1 - (1 - p_t)^k)
        all_k       = sum_t p_t^(k+1)
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    _, p = dist.as_arrays()
    acc1 = float(np.sum(p * p))
    any_k = float(np.sum(p * (1.0 - (1.0 - p) ** k)))
    all_k = float(np.sum(p ** (k + 1)))
    return RetrievalBaseline(k=k, acc1=acc1, precision_k=acc1, any_k=any_k, all_k=all_k)


def monte_carlo_baseline(
    dist: ClassDistribution,
    k: int,
    trials: int,
    seed: int,
    *,
    replacement: bool = True,
    population: int = 1000,
) -> RetrievalBaseline:
    """Simulation oracle for :func:`random_baseline_retrieval`.

    With ``replacement=False`` the k slots are drawn without replacement
    from a finite population of ``population`` exemplars whose class
    counts round the distribution; slots are then exchangeable, so acc1
    and precision both equal the mean matching fraction. That variant is
    for sensitivity analysis only.
    """
    if trials < 100_000:
        raise ConfigError(f"trials must be >= 100000, got {trials}")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    _, p = dist.as_arrays()
    rng = np.random.Generator(np.random.Philox(key=seed))
    if replacement:
        draws = rng.choice(len(p), size=(trials, k + 1), p=p)
        hits = draws[:, 1:] == draws[:, :1]
        return RetrievalBaseline(
            k=k,
            acc1=float(hits[:, 0].mean()),
            precision_k=float(hits.mean()),
            any_k=float(hits.any(axis=1).mean()),
            all_k=float(hits.all(axis=1).mean()),
        )
    counts = _population_counts(p, population)
    if population < k:
        raise ConfigError(f"population {population} smaller than k={k}")
    queries = rng.choice(len(p), size=trials, p=p)
    slot_counts = rng.multivariate_hypergeometric(counts, k, size=trials)
    matching = slot_counts[np.arange(trials), queries]
    frac = matching / k
    return RetrievalBaseline(
        k=k,
        acc1=float(frac.mean()),
        precision_k=float(frac.mean()),
        any_k=float((matching >= 1).mean()),
        all_k=float((matching == k).mean()),
    )


def _population_counts(p: np.ndarray, population: int) -> np.ndarray:
    # Largest-remainder rounding keeps the total exactly at `population`.
    raw = p * population
    counts = np.floor(raw).astype(np.int64)
    remainder = population - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def classification_accuracy(pairs: Sequence[tuple[str, str]]) -> float:
    """Exact-string-match fraction over (predicted, truth) pairs."""
    if not pairs:
        raise DataError("no classification pairs to score")
    return sum(pred == truth for pred, truth in pairs) / len(pairs)


def qualities_set_accuracy(pairs: Sequence[tuple[Iterable[str], Iterable[str]]]) -> float:
    """Fraction of pairs with exact set equality (order- and duplicate-insensitive)."""
    if not pairs:
        raise DataError("no qualities pairs to score")
    return sum(frozenset(pred) == frozenset(truth) for pred, truth in pairs) / len(pairs)


def qualities_jaccard_mean(pairs: Sequence[tuple[Iterable[str], Iterable[str]]]) -> float:
    """Mean Jaccard overlap; a diagnostic, not the headline set metric."""
    if not pairs:
        raise DataError("no qualities pairs to score")
    total = 0.0
    for pred, truth in pairs:
        a, b = frozenset(pred), frozenset(truth)
        total += 1.0 if not a | b else len(a & b) / len(a | b)
    return total / len(pairs)


def binary_detection_accuracy(pairs: Sequence[tuple[bool, bool]]) -> float:
    """Match fraction over boolean (predicted, truth) pairs."""
    if not pairs:
        raise DataError("no detection pairs to score")
    return sum(bool(pred) == bool(truth) for pred, truth in pairs) / len(pairs)


def random_baseline_binary(p_yes: float) -> float:
    """Expected accuracy when prediction and truth are independent draws
    with P(yes) = p_yes: p_yes^2 + (1 - p_yes)^2."""
    if not 0.0 <= p_yes <= 1.0:
        raise DataError(f"p_yes must be in [0, 1], got {p_yes}")
    return p_yes * p_yes + (1.0 - p_yes) * (1.0 - p_yes)


def regression_metrics(samples: Sequence[RegressionSample]) -> RegressionMetrics:
    """MAE, RMSE, and MAPE (percent) over prediction/truth samples.

    Truths must be strictly positive since MAPE is always reported.
    """
    if not samples:
        raise DataError("no regression samples to score")
    for s in samples:
        if not s.truth > 0.0:
            raise DataError(f"query {s.query_id!r}: truth must be positive for MAPE, got {s.truth}")
    pred = np.array([s.predicted for s in samples], dtype=np.float64)
    truth = np.array([s.truth for s in samples], dtype=np.float64)
    err = pred - truth
    mae = float(np.mean(np.abs(err)))
    rmse = float(math.sqrt(np.mean(err * err)))
    mape = float(100.0 * np.mean(np.abs(err) / truth))
    return RegressionMetrics(mae=mae, rmse=rmse, mape_pct=mape)


def _attribute_values(
    dist: ClassDistribution, specs: Mapping[str, VehicleSpec], attribute: str
) -> tuple[np.ndarray, np.ndarray]:
    types, p = dist.as_arrays()
    values = []
    for t in types:
        if t not in specs:
            raise MissingSpecError(f"no vehicle spec for type {t!r}")
        values.append(specs[t].attribute(attribute))
    return p, np.array(values, dtype=np.float64)


def random_baseline_regression(
    dist: ClassDistribution, specs: Mapping[str, VehicleSpec], attribute: str
) -> RegressionMetrics:
    """Closed-form regression baselines under the weighted-blind-guess model.

    True type i and guessed type j are independent draws from ``dist``;
    the answer is spec_j's attribute. Errors average over the joint
    (i, j) grid.
    """
    p, a = _attribute_values(dist, specs, attribute)
    w = np.outer(p, p)
    diff = a[np.newaxis, :] - a[:, np.newaxis]  # diff[i, j] = a_j - a_i
    mae = float(np.sum(w * np.abs(diff)))
    rmse = float(math.sqrt(np.sum(w * diff * diff)))
    mape = float(100.0 * np.sum(w * np.abs(diff) / a[:, np.newaxis]))
    return RegressionMetrics(mae=mae, rmse=rmse, mape_pct=mape)


def monte_carlo_regression_baseline(
    dist: ClassDistribution,
    specs: Mapping[str, VehicleSpec],
    attribute: str,
    trials: int,
    seed: int,
) -> RegressionMetrics:
    """Simulation oracle for :func:`random_baseline_regression`."""
    if trials < 100_000:
        raise ConfigError(f"trials must be >= 100000, got {trials}")
    p, a = _attribute_values(dist, specs, attribute)
    rng = np.random.Generator(np.random.Philox(key=seed))
    truth_idx = rng.choice(len(p), size=trials, p=p)
    guess_idx = rng.choice(len(p), size=trials, p=p)
    truth = a[truth_idx]
    err = a[guess_idx] - truth
    return RegressionMetrics(
        mae=float(np.mean(np.abs(err))),
        rmse=float(math.sqrt(np.mean(err * err))),
        mape_pct=float(100.0 * np.mean(np.abs(err) / truth)),
    )


def pooled_dimension_baseline(
    dist: ClassDistribution, specs: Mapping[str, VehicleSpec]
) -> RegressionMetrics:
    """Weighted-random baseline with length/width/height samples pooled,
    mirroring how dimension predictions are scored."""
    maes, mses, mapes = [], [], []
    for attribute in DIMENSION_ATTRIBUTES:
        m = random_baseline_regression(dist, specs, attribute)
        maes.append(m.mae)
        mses.append(m.rmse * m.rmse)
        mapes.append(m.mape_pct)
    return RegressionMetrics(
        mae=float(np.mean(maes)),
        rmse=float(math.sqrt(np.mean(mses))),
        mape_pct=float(np.mean(mapes)),
    )


def aggregate_runs(runs: Sequence[Mapping[str, float]]) -> EvalReport:
    """Mean every metric across runs, retaining the per-run values."""
    if not runs:
        raise DataError("no runs to aggregate")
    names = set(runs[0])
    for i, run in enumerate(runs[1:], start=2):
        if set(run) != names:
            diff = sorted(names.symmetric_difference(run))
            raise DataError(f"run {i} metric names differ from run 1: {diff[:8]}")
    rows = {
        name: MetricRow(
            mean=float(np.mean([run[name] for run in runs])),
            per_run=tuple(float(run[name]) for run in runs),
        )
        for name in sorted(names)
    }
    return EvalReport(run_count=len(runs), rows=rows)


# --- report rendering -------------------------------------------------------

_PCT = "pct"       # fraction in [0, 1], rendered as a percentage
_PCT_POINTS = "pp"  # already in percent (MAPE)
_ERR = "err"        # absolute error, 4 significant figures


def _table_rows(k: int) -> list[tuple[str, str, str, str]]:
    rows = [
        ("Retrieval", "Accuracy @ 1-shot", "retrieval.accuracy_at_1", _PCT),
        ("Retrieval", f"Precision @ {k}-shot", f"retrieval.precision_at_{k}", _PCT),
        ("Retrieval", f"Any Correct @ {k}-shot", f"retrieval.any_correct_at_{k}", _PCT),
    ]
    if k >= 3:
        rows.append(("Retrieval", "All Correct @ 3-shot", "retrieval.all_correct_at_3", _PCT))
    rows += [
        ("Retrieval", f"All Correct @ {k}-shot", f"retrieval.all_correct_at_{k}", _PCT),
        ("Vehicle Classification (accuracy)", "Type", "classification.type_accuracy", _PCT),
        (
            "Vehicle Classification (accuracy)",
            "Descriptive Qualities Set",
            "classification.qualities_set_accuracy",
            _PCT,
        ),
        (
            "Vehicle Classification (accuracy)",
            "Mounted Weapon Detection",
            "classification.mounted_weapon_accuracy",
            _PCT,
        ),
        ("Vehicle Weight (metric tons)", "MAE", "weight.mae", _ERR),
        ("Vehicle Weight (metric tons)", "RMSE", "weight.rmse", _ERR),
        ("Vehicle Weight (metric tons)", "MAPE", "weight.mape_pct", _PCT_POINTS),
        ("Vehicle Dimensions (meters)", "MAE", "dimensions.mae", _ERR),
        ("Vehicle Dimensions (meters)", "RMSE", "dimensions.rmse", _ERR),
        ("Vehicle Dimensions (meters)", "MAPE", "dimensions.mape_pct", _PCT_POINTS),
    ]
    return rows


def _format_value(value: float | None, kind: str) -> str:
    if value is None:
        return "NA"
    if kind == _PCT:
        return f"{100.0 * value:.2f}%"
    if kind == _PCT_POINTS:
        return f"{value:.2f}%"
    return f"{value:.4g}"


def render_report(report: EvalReport, k: int = 5, header_lines: Sequence[str] = ()) -> str:
    """Render the aggregated report as the benchmark-shaped text table.

    One row per metric with system, baseline, and random columns;
    sections follow the benchmark layout. Percentages carry 2 decimal
    places, absolute errors 4 significant figures. Missing columns
    (e.g. a retrieval baseline) render as NA.
    """
    label_width = 30
    col_width = 18
    lines = ["SAR exemplar retrieval & VQA benchmark"]
    lines.extend(header_lines)
    lines.append(f"runs: {report.run_count}")
    lines.append("")
    header = (
        " " * (label_width + 2)
        + "system (mean)".rjust(col_width)
        + "baseline (mean)".rjust(col_width)
        + "random (weighted)".rjust(col_width)
    )
    lines.append(header)
    current_section = None
    for section, label, key, kind in _table_rows(k):
        if section != current_section:
            lines.append(section)
            current_section = section
        cells = []
        for prefix in ("", "baseline.", "random."):
            row = report.rows.get(prefix + key)
            cells.append(_format_value(row.mean if row else None, kind))
        lines.append(
            "  "
            + label.ljust(label_width)
            + cells[0].rjust(col_width)
            + cells[1].rjust(col_width)
            + cells[2].rjust(col_width)
        )
    lines.append("")
    return "\n".join(lines)
