"""Ranking metrics and the sampled-candidates evaluation protocols."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import sample_negatives


@dataclass
class RankedResult:
    ranking: list       # candidate items, best first
    relevant: set


@dataclass
class MetricReport:
    values: dict        # "ndcg@5" -> mean value
    count: int          # number of evaluation units

    def to_dict(self) -> dict:
        return {"count": self.count, "metrics": dict(sorted(self.values.items()))}


def _check(result: RankedResult, k: int):
    if k < 1:
        raise ValueError("k must be >= 1")
    if not result.relevant:
        raise ValueError("relevant set is empty")


def ndcg_at_k(result: RankedResult, k: int) -> float:
    """Binary-relevance NDCG over the top-k ranked candidates."""
    _check(result, k)
    dcg = 0.0
    for pos, item in enumerate(result.ranking[:k], start=1):
        if item in result.relevant:
            dcg += 1.0 / math.log2(pos + 1)
    ideal = sum(1.0 / math.log2(p + 1) for p in range(1, min(k, len(result.relevant)) + 1))
    return dcg / ideal


def hr_at_k(result: RankedResult, k: int, mode: str = "single", normalize: bool = True) -> float:
    """Hit ratio over the top-k.

    single mode: 1 if any relevant item appears in the top-k.
    multi mode: hits / min(k, |relevant|), or the raw hit count when
    normalize is False.
    """
    _check(result, k)
    hits = sum(1 for item in result.ranking[:k] if item in result.relevant)
    if mode == "single":
        return 1.0 if hits > 0 else 0.0
    if mode != "multi":
        raise ValueError(f"unknown HR mode {mode!r}")
    if not normalize:
        return float(hits)
    return hits / min(k, len(result.relevant))


def evaluate_ranking(model, split, n_negatives: int, ks, rng, positives_by_user=None) -> MetricReport:
    """Sampled-candidates protocol: each held-out positive is ranked against
    n_negatives sampled non-positives of the same user.

    split is an iterable of (user index, positive item index) pairs.
    positives_by_user maps user index -> full positive set (all splits), used
    to keep held-out items out of the negative pool.
    """
    split = list(split)
    if not split:
        raise ValueError("empty evaluation split")
    gen = rng.stream("eval-negatives") if hasattr(rng, "stream") else rng
    vocab_size = model.n_items
    sums = {f"{m}@{k}": 0.0 for m in ("ndcg", "hr") for k in ks}
    for user, pos_item in split:
        positives = positives_by_user.get(user, {pos_item}) if positives_by_user else {pos_item}
        negs = sample_negatives(user, n_negatives, vocab_size, positives, gen)
        candidates = [pos_item] + negs
        ranking = model.predict_topk(user, candidates, k=len(candidates))
        result = RankedResult(ranking=list(ranking), relevant={pos_item})
        for k in ks:
            sums[f"ndcg@{k}"] += ndcg_at_k(result, k)
            sums[f"hr@{k}"] += hr_at_k(result, k, mode="single")
    n = len(split)
    return MetricReport(values={name: s / n for name, s in sums.items()}, count=n)


def evaluate_completion(model, split, ks) -> MetricReport:
    """Whole-vocabulary ranking for list completion.

    split is an iterable of (input item indices, target item indices) pairs;
    input items are excluded from the candidate pool and the targets form the
    relevant set (multi-relevant HR).
    """
    split = list(split)
    if not split:
        raise ValueError("empty evaluation split")
    kmax = max(ks)
    sums = {f"{m}@{k}": 0.0 for m in ("ndcg", "hr") for k in ks}
    for prefix, targets in split:
        ranking = model.predict_completion(prefix, k=kmax, exclude=set(prefix))
        result = RankedResult(ranking=list(ranking), relevant=set(targets))
        for k in ks:
            sums[f"ndcg@{k}"] += ndcg_at_k(result, k)
            sums[f"hr@{k}"] += hr_at_k(result, k, mode="multi")
    n = len(split)
    return MetricReport(values={name: s / n for name, s in sums.items()}, count=n)
