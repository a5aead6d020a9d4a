"""Ranking metrics for multilabel evaluation: P@k and PSP@k.

Top-k ties are broken toward the lower label index so results are
deterministic.  PSP@k implements the un-normalized propensity-weighted
sum (1/k) * sum_{l in top_k} y_l / p_l; dividing by the best achievable
score is available as an option, default off.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
import math

import numpy as np

__all__ = ["PropensityModel", "top_k_indices", "precision_at_k", "psp_at_k",
           "propensity_from_frequencies", "dataset_precision_at_k",
           "dataset_psp_at_k", "metrics_report"]


@dataclass
class PropensityModel:
    """Per-label propensity scores p_l in (0, 1]."""

    propensities: np.ndarray

    def __post_init__(self):
        self.propensities = np.asarray(self.propensities, dtype=np.float64)
        if np.any(self.propensities <= 0) or np.any(self.propensities > 1):
            raise ValueError("propensities must lie in (0, 1]")

    @classmethod
    def uniform(cls, num_labels: int) -> "PropensityModel":
        return cls(np.ones(num_labels))


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores, ties broken by lower label index."""
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ValueError("empty score vector")
    if not (1 <= k <= scores.size):
        raise ValueError(f"k must lie in [1, {scores.size}]")
    # stable sort on -scores keeps lower indices first among ties
    order = np.argsort(-scores, kind="stable")
    return order[:k]


def precision_at_k(scores: np.ndarray, truth, k: int) -> float:
    """|top_k(scores) intersect truth| / k."""
    top = top_k_indices(scores, k)
    truth = set(int(t) for t in truth)
    return sum(1 for l in top if int(l) in truth) / k


def psp_at_k(scores: np.ndarray, truth, propensity: PropensityModel, k: int) -> float:
    """(1/k) * sum over top-k hits of 1/p_l."""
    top = top_k_indices(scores, k)
    truth = set(int(t) for t in truth)
    total = 0.0
    for l in top:
        l = int(l)
        if l in truth:
            if l >= propensity.propensities.size:
                raise ValueError(f"missing propensity for label {l}")
            total += 1.0 / propensity.propensities[l]
    return total / k


def _best_psp_at_k(truth, propensity: PropensityModel, k: int) -> float:
    inv = sorted((1.0 / propensity.propensities[int(l)] for l in truth), reverse=True)
    return sum(inv[:k]) / k


def dataset_precision_at_k(score_matrix: np.ndarray, truths: list, k: int) -> float:
    """Mean per-sample P@k."""
    return float(np.mean([precision_at_k(s, t, k)
                          for s, t in zip(score_matrix, truths)]))


def dataset_psp_at_k(score_matrix: np.ndarray, truths: list,
                     propensity: PropensityModel, k: int,
                     normalized: bool = False) -> float:
    """Mean per-sample PSP@k; optionally divided by the best achievable mean."""
    vals = [psp_at_k(s, t, propensity, k) for s, t in zip(score_matrix, truths)]
    if not normalized:
        return float(np.mean(vals))
    best = [_best_psp_at_k(t, propensity, k) for t in truths]
    denom = float(np.mean(best))
    return float(np.mean(vals)) / denom if denom > 0 else 0.0


def propensity_from_frequencies(label_counts: np.ndarray, n_samples: int,
                                a: float = 0.55, b: float = 1.5) -> PropensityModel:
    """Long-tail propensity model p_l = 1 / (1 + C exp(-A log(n_l + B))).

    C = (log N - 1) (B + 1)^A; head labels approach p = 1, unseen labels get
    the minimum (still positive) propensity.
    """
    if a <= 0:
        raise ValueError("A must be positive")
    if n_samples < 1:
        raise ValueError("N must be at least 1")
    counts = np.asarray(label_counts, dtype=np.float64)
    c = (math.log(n_samples) - 1.0) * (b + 1.0) ** a
    p = 1.0 / (1.0 + c * np.exp(-a * np.log(counts + b)))
    return PropensityModel(np.clip(p, np.finfo(np.float64).tiny, 1.0))


def metrics_report(records: list[dict], as_json: bool = True) -> str:
    """Render {metric, k, value} records as JSON lines or aligned text."""
    if as_json:
        return "\n".join(json.dumps(r) for r in records)
    width = max((len(r["metric"]) for r in records), default=6)
    lines = [f"{r['metric']:<{width}}  @{r['k']:<3d}  {r['value']:.4f}"
             for r in records]
    return "\n".join(lines)
