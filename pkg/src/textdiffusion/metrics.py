"""Text quality and diversity metrics.

BLEU here is smoothed sentence-level BLEU-4: uniform weights, add-one
smoothing on the n>1 precisions, brevity penalty exp(1 - r/h) when the
hypothesis is shorter than the reference.  The same scorer doubles as the
risk function for minimum-Bayes-risk reranking, so reported quality and
selection are consistent.  Corpus-level numbers are means of per-sentence
scores.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from collections import Counter
from dataclasses import dataclass, asdict
from math import exp, log
from typing import Sequence

__all__ = ["MetricError", "MetricReport", "bleu", "dist1", "div4", "exact_match", "evaluate"]


class MetricError(ValueError):
    """Empty or unusable metric input."""


def _ngrams(tokens: Sequence[str], order: int) -> Counter:
    return Counter(tuple(tokens[i:i + order]) for i in range(len(tokens) - order + 1))


def bleu(hypothesis: Sequence[str], reference: Sequence[str], max_order: int = 4) -> float:
    """Smoothed sentence BLEU in [0, 1]; 0 for an empty hypothesis."""
    if not hypothesis:
        warnings.warn("BLEU of an empty hypothesis is 0", stacklevel=2)
        return 0.0
    if not reference:
        return 0.0
    log_precision_sum = 0.0
    for order in range(1, max_order + 1):
        hyp_counts = _ngrams(hypothesis, order)
        ref_counts = _ngrams(reference, order)
        matched = sum(min(count, ref_counts[gram]) for gram, count in hyp_counts.items())
        total = max(len(hypothesis) - order + 1, 0)
        if order == 1:
            if matched == 0:
                return 0.0
            precision = matched / total
        else:
            precision = (matched + 1.0) / (total + 1.0)
        log_precision_sum += log(precision) / max_order
    brevity = 1.0
    if len(hypothesis) < len(reference):
        brevity = exp(1.0 - len(reference) / len(hypothesis))
    return brevity * exp(log_precision_sum)


def dist1(tokens: Sequence[str]) -> float:
    """Distinct-unigram ratio within one sequence."""
    if not tokens:
        raise MetricError("dist1 of an empty sequence")
    return len(set(tokens)) / len(tokens)


def div4(candidates: Sequence[Sequence[str]]) -> float:
    """Distinct-4-gram ratio pooled across a candidate set.

    Candidates shorter than 4 tokens are skipped with a warning; an empty
    usable set is rejected.
    """
    if not candidates:
        raise MetricError("div4 of an empty candidate set")
    pooled: Counter = Counter()
    total = 0
    usable = 0
    for tokens in candidates:
        if len(tokens) < 4:
            warnings.warn("div4 skips a candidate shorter than 4 tokens", stacklevel=2)
            continue
        usable += 1
        grams = _ngrams(tokens, 4)
        pooled.update(grams)
        total += sum(grams.values())
    if usable == 0:
        raise MetricError("div4: no candidate has at least 4 tokens")
    return len(pooled) / total


def exact_match(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    return 1.0 if list(hypothesis) == list(reference) else 0.0


@dataclass
class MetricReport:
    """Corpus-level means over per-sentence scores."""

    bleu: float
    dist1: float
    div4: float
    exact_match: float
    count: int

    def to_json(self) -> str:
        payload = asdict(self)
        payload["config_digest"] = _metric_config_digest()
        return json.dumps(payload, indent=2, sort_keys=True)


def _metric_config_digest() -> str:
    config = {
        "bleu": "sentence-bleu4, add-one smoothing n>1, brevity exp(1-r/h)",
        "dist1": "per-sentence then mean",
        "div4": "pooled 4-grams across the hypothesis set",
        "corpus": "mean of sentence scores",
    }
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def evaluate(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> MetricReport:
    """Score aligned hypothesis/reference token lists."""
    if len(hypotheses) != len(references):
        raise MetricError(
            f"line count mismatch: {len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if not hypotheses:
        raise MetricError("nothing to evaluate")
    bleu_scores = [bleu(h, r) for h, r in zip(hypotheses, references)]
    dist_scores = [dist1(h) if h else 0.0 for h in hypotheses]
    em_scores = [exact_match(h, r) for h, r in zip(hypotheses, references)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            diversity = div4(hypotheses)
        except MetricError:
            diversity = 0.0
    count = len(hypotheses)
    return MetricReport(
        bleu=sum(bleu_scores) / count,
        dist1=sum(dist_scores) / count,
        div4=diversity,
        exact_match=sum(em_scores) / count,
        count=count,
    )
