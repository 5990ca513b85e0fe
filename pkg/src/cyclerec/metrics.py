"""Top-k ranking metrics and their aggregation across update cycles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class CycleReport:
    """Evaluation record of one update cycle."""

    cycle_id: int
    recall_at: dict[int, float]
    mrr_at: dict[int, float]
    test_example_count: int
    unseen_target_fraction: float
    mean_losses: dict[str, float] = field(default_factory=dict)
    lambda_t: float = 0.0
    epochs_trained: int = 0


def rank_of_target(logits: Sequence[float] | np.ndarray, target: int) -> int:
    """1-based rank of the target item.

    rank = 1 + items scoring strictly higher + equal scorers with a lower
    index (deterministic tie-break).
    """
    scores = np.asarray(logits, dtype=np.float64)
    if not 0 <= target < len(scores):
        raise ValueError("rank_of_target: target outside the logit range")
    t = scores[target]
    return 1 + int((scores > t).sum()) + int((scores[:target] == t).sum())


def recall_at_k(ranks: Sequence[float], k: int) -> float:
    """Fraction of ranks <= k; infinite ranks (unrankable targets) count as misses."""
    if k < 1:
        raise ValueError("recall_at_k: k must be >= 1")
    if len(ranks) == 0:
        raise ValueError("recall_at_k: empty test set")
    return sum(1 for r in ranks if r <= k) / len(ranks)


def mrr_at_k(ranks: Sequence[float], k: int) -> float:
    """Mean reciprocal rank, zeroed beyond k."""
    if k < 1:
        raise ValueError("mrr_at_k: k must be >= 1")
    if len(ranks) == 0:
        raise ValueError("mrr_at_k: empty test set")
    return sum(1.0 / r for r in ranks if r <= k) / len(ranks)


def aggregate(reports: Sequence[CycleReport], weight_by_examples: bool = False) -> dict[str, float]:
    """Mean metric values across cycles.

    Each cycle counts once regardless of its test-set size unless
    ``weight_by_examples`` is set.
    """
    if not reports:
        raise ValueError("aggregate: no reports")
    ks = sorted(reports[0].recall_at)
    out: dict[str, float] = {}
    if weight_by_examples:
        weights = [r.test_example_count for r in reports]
        total = sum(weights)
    else:
        weights = [1] * len(reports)
        total = len(reports)
    for k in ks:
        out[f"recall@{k}"] = sum(w * r.recall_at[k] for w, r in zip(weights, reports)) / total
        out[f"mrr@{k}"] = sum(w * r.mrr_at[k] for w, r in zip(weights, reports)) / total
    out["unseen_target_fraction"] = sum(w * r.unseen_target_fraction for w, r in zip(weights, reports)) / total
    return out
