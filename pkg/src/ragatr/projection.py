"""2-D embedding projections for cluster figures: exact t-SNE and PCA.

The t-SNE here is the standard exact O(n^2) formulation: per-point
Gaussian bandwidths found by binary search on the conditional perplexity,
symmetrized affinities, Student-t low-dimensional kernel, and momentum
gradient descent with early exaggeration and adaptive per-parameter
gains. Everything is deterministic for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ExemplarRecord
from .errors import ConfigError, DataError, PerplexityError

_PERPLEXITY_TOL = 1e-3
_MAX_BISECTIONS = 50
_MAX_BRACKET_STEPS = 60
_EPS = 1e-12


@dataclass(frozen=True)
class TsneConfig:
    """Gradient-descent schedule for t-SNE. Defaults follow the standard
    reference formulation: early exaggeration 12 and momentum 0.5 for the
    first 250 iterations, then momentum 0.8 until ``iterations``."""

    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    momentum_switch_iter: int = 250
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    seed: int = 0

    def __post_init__(self):
        if not self.perplexity > 1.0:
            raise ConfigError(f"perplexity must be > 1, got {self.perplexity}")
        if self.iterations < 250:
            raise ConfigError(f"iterations must be >= 250, got {self.iterations}")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")


@dataclass(frozen=True)
class ProjectedPoint:
    id: str
    target_type: str
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DataError(f"point {self.id!r} has non-finite coordinates")


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    """Dense squared euclidean distance matrix, clipped at zero."""
    sq = np.sum(x * x, axis=1)
    d = sq[:, np.newaxis] + sq[np.newaxis, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_perplexity(dist_row: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    # Shift by the row minimum so exp never underflows to an all-zero row.
    shifted = dist_row - dist_row.min()
    w = np.exp(-shifted * beta)
    p = w / w.sum()
    positive = p[p > 0.0]
    entropy = -np.sum(positive * np.log2(positive))
    return float(2.0**entropy), p


def conditional_probabilities(
    dist_sq: np.ndarray,
    perplexity: float,
    labels: Sequence[str] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point conditional affinities whose perplexity matches the target.

    For each point a Gaussian precision beta_i is bracketed by doubling
    and then bisected (at most 50 steps) until the conditional
    distribution's perplexity is within 1e-3 of the target.

    Returns:
        (P_cond, achieved) where P_cond[i, j] = p(j | i) with zero
        diagonal, and achieved[i] is the calibrated perplexity.

    Raises:
        PerplexityError: naming the point whose perplexity cannot reach
            the target (e.g. flat distances force perplexity n - 1).
    """
    n = dist_sq.shape[0]
    if n < 3:
        raise ConfigError("need at least 3 points for conditional affinities")
    if not 1.0 < perplexity <= n - 1:
        raise ConfigError(f"perplexity {perplexity} infeasible for {n} points")
    p_cond = np.zeros((n, n), dtype=np.float64)
    achieved = np.zeros(n, dtype=np.float64)
    others = np.arange(n)
    for i in range(n):
        row = np.delete(dist_sq[i], i)
        name = labels[i] if labels is not None else str(i)
        beta = 1.0
        perp, p = _row_perplexity(row, beta)
        if abs(perp - perplexity) > _PERPLEXITY_TOL:
            beta, perp, p = _bracket_and_bisect(row, beta, perp, p, perplexity, name)
        achieved[i] = perp
        idx = np.delete(others, i)
        p_cond[i, idx] = p
    return p_cond, achieved


def _bracket_and_bisect(row, beta, perp, p, target, name):
    # perp decreases monotonically in beta: too-high perplexity means the
    # kernel is too wide, so grow beta; too low, shrink it.
    lo = hi = None
    for _ in range(_MAX_BRACKET_STEPS):
        if perp > target:
            lo = beta
            beta *= 2.0
        else:
            hi = beta
            beta /= 2.0
        perp, p = _row_perplexity(row, beta)
        if abs(perp - target) <= _PERPLEXITY_TOL:
            return beta, perp, p
        if lo is not None and hi is not None:
            break
    else:
        raise PerplexityError(
            f"point {name}: perplexity stuck at {perp:.4f}, cannot reach {target}"
        )
    for _ in range(_MAX_BISECTIONS):
        beta = 0.5 * (lo + hi)
        perp, p = _row_perplexity(row, beta)
        if abs(perp - target) <= _PERPLEXITY_TOL:
            return beta, perp, p
        if perp > target:
            lo = beta
        else:
            hi = beta
    raise PerplexityError(
        f"point {name}: perplexity calibration did not converge "
        f"(achieved {perp:.6f}, target {target})"
    )


def joint_probabilities(p_cond: np.ndarray) -> np.ndarray:
    """Symmetrized affinities (p_{j|i} + p_{i|j}) / 2n; sums to 1."""
    n = p_cond.shape[0]
    return (p_cond + p_cond.T) / (2.0 * n)


def low_dim_affinities(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Student-t affinities Q of a 2-D layout, plus the unnormalized kernel."""
    num = 1.0 / (1.0 + pairwise_sq_dists(y))
    np.fill_diagonal(num, 0.0)
    q = num / num.sum()
    return q, num


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0.0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], _EPS))))


def tsne_embed(
    x: np.ndarray, cfg: TsneConfig, labels: Sequence[str] | None = None
) -> tuple[np.ndarray, list[float]]:
    """Run exact t-SNE on row vectors ``x``.

    Returns the (n, 2) layout and the per-iteration KL divergence history
    (always measured against the plain, unexaggerated P). The layout is
    recentered on the origin every iteration.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 10:
        raise DataError(f"t-SNE needs at least 10 points, got {n}")
    if n > 10_000:
        raise DataError(f"exact t-SNE is limited to 10000 points, got {n}")
    if not cfg.perplexity < n / 3.0:
        raise ConfigError(f"perplexity {cfg.perplexity} must be < n/3 = {n / 3.0:.1f}")

    p_cond, _ = conditional_probabilities(pairwise_sq_dists(x), cfg.perplexity, labels)
    p = joint_probabilities(p_cond)

    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    kl_history: list[float] = []

    for iteration in range(cfg.iterations):
        effective_p = p * cfg.early_exaggeration if iteration < cfg.exaggeration_iters else p
        q, num = low_dim_affinities(y)
        w = (effective_p - q) * num
        grad = 4.0 * (y * w.sum(axis=1)[:, np.newaxis] - w @ y)

        momentum = (
            cfg.momentum_early if iteration < cfg.momentum_switch_iter else cfg.momentum_late
        )
        same_direction = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_direction, gains * 0.8, gains + 0.2)
        np.clip(gains, 0.01, None, out=gains)
        velocity = momentum * velocity - cfg.learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
        kl_history.append(kl_divergence(p, q))
    return y, kl_history


def tsne_2d(records: Sequence[ExemplarRecord], cfg: TsneConfig) -> list[ProjectedPoint]:
    """Project records to 2-D with exact t-SNE; deterministic given the seed."""
    records = list(records)
    x = np.vstack([r.embedding for r in records]).astype(np.float64)
    labels = [r.meta.id for r in records]
    y, _ = tsne_embed(x, cfg, labels)
    return [
        ProjectedPoint(id=r.meta.id, target_type=r.meta.target_type, x=float(y[i, 0]), y=float(y[i, 1]))
        for i, r in enumerate(records)
    ]


def pca_2d(records: Sequence[ExemplarRecord]) -> list[ProjectedPoint]:
    """Mean-centered projection onto the top-2 principal directions.

    Component signs are fixed by making each component's largest-magnitude
    loading positive, so the output is unique.
    """
    records = list(records)
    if len(records) < 3:
        raise DataError(f"PCA needs at least 3 points, got {len(records)}")
    x = np.vstack([r.embedding for r in records]).astype(np.float64)
    if x.shape[1] < 2:
        raise DataError("PCA to 2-D needs at least 2 input dimensions")
    centered = x - x.mean(axis=0)
    if not np.any(np.abs(centered) > 1e-12):
        raise DataError("all points are identical; PCA is undefined")
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2].copy()
    for comp in components:
        if comp[np.argmax(np.abs(comp))] < 0.0:
            comp *= -1.0
    coords = centered @ components.T
    return [
        ProjectedPoint(
            id=r.meta.id, target_type=r.meta.target_type, x=float(coords[i, 0]), y=float(coords[i, 1])
        )
        for i, r in enumerate(records)
    ]


def export_points(points: Sequence[ProjectedPoint], path: str | Path) -> None:
    """Write points as CSV: header id,target_type,x,y, coordinates with 6
    decimal places."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,target_type,x,y\n")
        for point in points:
            fh.write(f"{point.id},{point.target_type},{point.x:.6f},{point.y:.6f}\n")
