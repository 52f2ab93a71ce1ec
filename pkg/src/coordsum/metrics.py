"""Evaluation metrics: overlap scores, rank statistics, calibration, novelty.

Everything here is pure: token sequences and floats in, numbers out. Sentinel
tokens (PAD/BOS/EOS) are stripped before any text-overlap computation, so the
same functions apply to references, decoded candidates, and raw content.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .corpus import strip_sentinels, TokenSequence
from .decode import Candidate, CandidateSet

logger = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Overlap metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @staticmethod
    def from_counts(overlap: int, n_candidate: int, n_reference: int) -> "RougeScore":
        p = overlap / n_candidate if n_candidate else 0.0
        r = overlap / n_reference if n_reference else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return RougeScore(precision=p, recall=r, f1=f1)


def _ngram_counts(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: TokenSequence, reference: TokenSequence, n: int) -> RougeScore:
    """Clipped n-gram overlap between candidate and reference content."""
    if n < 1:
        raise MetricError("n-gram order must be >= 1")
    cand = strip_sentinels(candidate)
    ref = strip_sentinels(reference)
    cand_counts = _ngram_counts(cand, n)
    ref_counts = _ngram_counts(ref, n)
    overlap = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
    return RougeScore.from_counts(overlap, sum(cand_counts.values()), sum(ref_counts.values()))


def _lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    # one-row DP; O(len(a) * len(b)) time, O(len(b)) space
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: TokenSequence, reference: TokenSequence) -> RougeScore:
    """Longest-common-subsequence overlap between candidate and reference."""
    cand = strip_sentinels(candidate)
    ref = strip_sentinels(reference)
    lcs = _lcs_length(cand, ref)
    return RougeScore.from_counts(lcs, len(cand), len(ref))


# ---------------------------------------------------------------------------
# Candidate quality and ordering
# ---------------------------------------------------------------------------


def _rouge_mean(candidate: TokenSequence, reference: TokenSequence) -> float:
    scores = (
        rouge_n(candidate, reference, 1).f1,
        rouge_n(candidate, reference, 2).f1,
        rouge_l(candidate, reference).f1,
    )
    return float(np.mean(scores))


QUALITY_METRICS: dict[str, Callable[[TokenSequence, TokenSequence], float]] = {
    "rouge-mean": _rouge_mean,
    "rouge-1": lambda c, r: rouge_n(c, r, 1).f1,
    "rouge-2": lambda c, r: rouge_n(c, r, 2).f1,
    "rouge-l": lambda c, r: rouge_l(c, r).f1,
}

DEFAULT_QUALITY = "rouge-mean"


def quality(candidate: TokenSequence, reference: TokenSequence, metric: str = DEFAULT_QUALITY) -> float:
    """Candidate quality against the reference under a registered metric."""
    try:
        fn = QUALITY_METRICS[metric]
    except KeyError:
        raise MetricError(f"unknown quality metric {metric!r}") from None
    return fn(candidate, reference)


def order_candidates(
    cand_set: CandidateSet,
    reference: TokenSequence,
    metric: str = DEFAULT_QUALITY,
    tie_tolerance: float = 0.0,
) -> CandidateSet:
    """Sort candidates by quality descending, marking quality ties.

    Ties on quality are ordered by model score (sum_logprob descending), then
    by position in the incoming list; tied candidates share a tie-group id so
    downstream losses can skip those pairs. With a positive tie_tolerance,
    a candidate joins the current group while it is within tolerance of the
    group's best quality (its anchor); the first candidate falling more than
    tie_tolerance below the anchor opens a new group. tie_tolerance=0 keeps
    only exact-quality ties. Candidates must be distinct.
    """
    if tie_tolerance < 0.0:
        raise MetricError("tie_tolerance must be >= 0")
    seen = set()
    for cand in cand_set.candidates:
        key = tuple(cand.tokens)
        if key in seen:
            raise MetricError("duplicate candidates in set")
        seen.add(key)
    scored = []
    for idx, cand in enumerate(cand_set.candidates):
        q = quality(cand.tokens, reference, metric)
        scored.append((q, cand, idx))
    scored.sort(key=lambda t: (-t[0], -t[1].sum_logprob, t[2]))
    ordered: list[Candidate] = []
    tie_group = -1
    anchor: float | None = None
    for q, cand, _ in scored:
        if anchor is None or anchor - q > tie_tolerance:
            tie_group += 1
            anchor = q
        ordered.append(replace(cand, quality=q, tie_group=tie_group))
    return CandidateSet(
        example_index=cand_set.example_index,
        candidates=ordered,
        shortfall=cand_set.shortfall,
    )


# ---------------------------------------------------------------------------
# Rank statistics
# ---------------------------------------------------------------------------


def _average_ranks(values: Sequence[float]) -> np.ndarray:
    """Ranks 1..n with tied values sharing their average rank."""
    arr = np.asarray(values, dtype=np.float64)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(len(arr), dtype=np.float64)
    i = 0
    while i < len(arr):
        j = i
        while j + 1 < len(arr) and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> tuple[float, bool]:
    """Spearman rank correlation; returns (rho, degenerate flag).

    A side with all-equal values has no rank ordering; such inputs
    contribute rho = 0 and are flagged rather than raising.
    """
    if len(x) != len(y):
        raise MetricError("rank correlation needs paired values")
    if len(x) < 2:
        raise MetricError("rank correlation needs at least two pairs")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    sx = rx - rx.mean()
    sy = ry - ry.mean()
    denom = np.sqrt(float(sx @ sx) * float(sy @ sy))
    if denom == 0.0:
        return 0.0, True
    return float(sx @ sy / denom), False


@dataclass(frozen=True)
class RankAgreementReport:
    mean_rho: float
    per_example: tuple[float, ...]
    degenerate_count: int
    skipped_count: int


def spearman_over_examples(
    pairs: Sequence[tuple[Sequence[float], Sequence[float]]]
) -> RankAgreementReport:
    """Mean per-example Spearman rho over (scores, qualities) pairs.

    Examples with fewer than two candidates are skipped with a warning;
    degenerate examples (a constant side) contribute rho = 0.
    """
    values: list[float] = []
    degenerate = 0
    skipped = 0
    for idx, (x, y) in enumerate(pairs):
        if len(x) < 2:
            logger.warning("example %d skipped: %d candidate(s)", idx, len(x))
            skipped += 1
            continue
        rho, flat = spearman(x, y)
        if flat:
            degenerate += 1
        values.append(rho)
    if not values:
        raise MetricError("no example had enough candidates for rank correlation")
    return RankAgreementReport(
        mean_rho=float(np.mean(values)),
        per_example=tuple(values),
        degenerate_count=degenerate,
        skipped_count=skipped,
    )


def ranking_accuracy(score_pairs: Sequence[tuple[float, float]]) -> float:
    """Percentage of (better, worse) pairs the scores order correctly.

    Each pair is (score of higher-quality item, score of lower-quality item);
    exact score ties count half. Result is in [0, 100].
    """
    if not score_pairs:
        raise MetricError("ranking accuracy needs at least one pair")
    total = 0.0
    for f_better, f_worse in score_pairs:
        if f_better > f_worse:
            total += 1.0
        elif f_better == f_worse:
            total += 0.5
    return 100.0 * total / len(score_pairs)


def candidate_rank_pairs(cand_set: CandidateSet) -> list[tuple[float, float]]:
    """All cross-tie-group (better, worse) f_score pairs of an ordered set."""
    cand_set.check_ordering()
    cands = cand_set.candidates
    pairs = []
    for i in range(len(cands)):
        for j in range(i + 1, len(cands)):
            if cands[i].tie_group == cands[j].tie_group:
                continue
            pairs.append((cands[i].f_score, cands[j].f_score))
    return pairs


# ---------------------------------------------------------------------------
# Token-level calibration
# ---------------------------------------------------------------------------


def align_token_labels(hypothesis: TokenSequence, reference: TokenSequence) -> list[bool]:
    """Per-token correctness of hypothesis content via edit-distance alignment.

    Minimal-edit alignment of the two content sequences; a hypothesis token is
    True only where the alignment pairs it with an equal reference token.
    Ambiguous alignments prefer match, then substitution, then deletion.
    """
    hyp = strip_sentinels(hypothesis)
    ref = strip_sentinels(reference)
    n, m = len(hyp), len(ref)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (0 if hyp[i - 1] == ref[j - 1] else 1)
            dist[i, j] = min(sub, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    labels = [False] * n
    i, j = n, m
    while i > 0 and j > 0:
        eq = hyp[i - 1] == ref[j - 1]
        if dist[i, j] == dist[i - 1, j - 1] + (0 if eq else 1):
            labels[i - 1] = eq
            i, j = i - 1, j - 1
        elif dist[i, j] == dist[i - 1, j] + 1:
            i -= 1
        else:
            j -= 1
    return labels


@dataclass(frozen=True)
class CalibrationBucket:
    lower: float
    upper: float
    count: int
    accuracy: float
    confidence: float


@dataclass(frozen=True)
class CalibrationReport:
    ece: float
    buckets: tuple[CalibrationBucket, ...]
    accuracy: float
    confidence: float
    n: int


def expected_calibration_error(
    confidences: Sequence[float], labels: Sequence[bool], n_buckets: int = 10
) -> CalibrationReport:
    """Expected calibration error over equal-width confidence buckets.

    Buckets partition (0, 1]; a confidence of exactly 0 lands in the first
    bucket. ECE is the count-weighted mean absolute gap between per-bucket
    accuracy and mean confidence.
    """
    if n_buckets < 1:
        raise MetricError("need at least one bucket")
    if len(confidences) != len(labels):
        raise MetricError("confidences and labels must pair up")
    if len(confidences) == 0:
        raise MetricError("calibration needs at least one prediction")
    conf = np.asarray(confidences, dtype=np.float64)
    if conf.min() < 0.0 or conf.max() > 1.0:
        raise MetricError("confidences must lie in [0, 1]")
    lab = np.asarray(labels, dtype=np.float64)
    idx = np.minimum(n_buckets - 1, np.maximum(0, np.ceil(conf * n_buckets).astype(np.int64) - 1))
    buckets = []
    ece = 0.0
    n = len(conf)
    for b in range(n_buckets):
        mask = idx == b
        count = int(mask.sum())
        if count:
            acc = float(lab[mask].mean())
            avg_conf = float(conf[mask].mean())
            ece += (count / n) * abs(acc - avg_conf)
        else:
            acc = 0.0
            avg_conf = 0.0
        buckets.append(
            CalibrationBucket(
                lower=b / n_buckets,
                upper=(b + 1) / n_buckets,
                count=count,
                accuracy=acc,
                confidence=avg_conf,
            )
        )
    return CalibrationReport(
        ece=float(ece),
        buckets=tuple(buckets),
        accuracy=float(lab.mean()),
        confidence=float(conf.mean()),
        n=n,
    )


# ---------------------------------------------------------------------------
# Novelty
# ---------------------------------------------------------------------------


def novelty(source: TokenSequence, summary: TokenSequence, n: int = 2) -> float:
    """Fraction of the summary's distinct n-grams absent from the source."""
    if n < 1:
        raise MetricError("n-gram order must be >= 1")
    src_grams = set(_ngram_counts(strip_sentinels(source), n))
    sum_grams = set(_ngram_counts(strip_sentinels(summary), n))
    if not sum_grams:
        raise MetricError("undefined novelty: summary has no n-grams of this order")
    return len(sum_grams - src_grams) / len(sum_grams)
