"""Corpus BLEU and paired-bootstrap significance testing.

Scores are computed from per-sentence sufficient statistics (matched and
total n-gram counts for n = 1..4 plus hypothesis and reference lengths),
pooled over the corpus and passed through sacrebleu's BLEU formula. The
same statistics drive the bootstrap, so each resample costs only a sum.

Zero n-gram precision is strict by default (the score becomes 0);
``smoothing="add-one"`` adds one to the matched and total counts of every
order above unigrams.
"""

from __future__ import annotations

from collections.abc import Sequence
from functools import lru_cache
from typing import Literal, Protocol

import numpy as np
from pydantic import BaseModel, Field
from sacrebleu.metrics import BLEU

from .exceptions import LengthMismatchError
from .logging_config import get_logger

logger = get_logger(__name__)

NGRAM_ORDER = 4
DEFAULT_RESAMPLES = 1000
DEFAULT_ALPHA = 0.05

PreTokenizer = Literal["whitespace", "13a"]
Smoothing = Literal["none", "add-one"]

_SACREBLEU_TOKENIZE = {"whitespace": "none", "13a": "13a"}
_SACREBLEU_SMOOTH = {"none": ("none", None), "add-one": ("add-k", 1)}


class BleuReport(BaseModel):
    """Corpus BLEU with its components; ``precisions`` are fractions in [0, 1]."""

    score: float = Field(ge=0.0, le=100.0)
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    counts: tuple[int, int, int, int]
    totals: tuple[int, int, int, int]
    tokenizer: PreTokenizer = "whitespace"
    smoothing: Smoothing = "none"

    model_config = {"frozen": True}

    def summary(self) -> str:
        precisions = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (
            f"BLEU = {self.score:.2f} {precisions} (BP = {self.brevity_penalty:.3f} "
            f"ratio = {self.hyp_len / max(self.ref_len, 1):.3f} hyp_len = {self.hyp_len} "
            f"ref_len = {self.ref_len}) tok:{self.tokenizer} smooth:{self.smoothing}"
        )


class SignificanceResult(BaseModel):
    """One-sided test that system A scores higher than system B."""

    p_value: float = Field(ge=0.0, le=1.0)
    n_resamples: int
    delta_observed: float
    score_a: float
    score_b: float
    test: str = "paired_bootstrap"

    model_config = {"frozen": True}

    def significant(self, alpha: float = DEFAULT_ALPHA) -> bool:
        return self.delta_observed > 0 and self.p_value < alpha


@lru_cache(maxsize=None)
def _sentence_scorer(tokenizer: PreTokenizer) -> BLEU:
    return BLEU(tokenize=_SACREBLEU_TOKENIZE[tokenizer], force=True)


def _normalize(text: str, tokenizer: PreTokenizer) -> str:
    return " ".join(text.split()) if tokenizer == "whitespace" else text.strip()


def sufficient_stats(
    hypotheses: Sequence[str], references: Sequence[str], tokenizer: PreTokenizer = "whitespace"
) -> np.ndarray:
    """Per-sentence ``[correct_1..4, total_1..4, hyp_len, ref_len]`` as an ``(N, 10)`` array.

    Raises:
        LengthMismatchError: If the sequences differ in length.
    """
    if len(hypotheses) != len(references):
        raise LengthMismatchError(len(references), len(hypotheses))
    scorer = _sentence_scorer(tokenizer)
    rows = []
    for hyp, ref in zip(hypotheses, references):
        stats = scorer.corpus_score([_normalize(hyp, tokenizer)], [[_normalize(ref, tokenizer)]])
        rows.append([*stats.counts, *stats.totals, stats.sys_len, stats.ref_len])
    return np.asarray(rows, dtype=np.int64).reshape(len(rows), 2 * NGRAM_ORDER + 2)


def bleu_from_stats(
    stats: np.ndarray, tokenizer: PreTokenizer = "whitespace", smoothing: Smoothing = "none"
) -> BleuReport:
    """Pool sentence statistics (rows of :func:`sufficient_stats`) into a report."""
    pooled = [int(x) for x in stats.sum(axis=0)]
    correct, total = pooled[:NGRAM_ORDER], pooled[NGRAM_ORDER : 2 * NGRAM_ORDER]
    hyp_len, ref_len = pooled[-2], pooled[-1]
    method, value = _SACREBLEU_SMOOTH[smoothing]
    result = BLEU.compute_bleu(
        correct=list(correct),
        total=list(total),
        sys_len=hyp_len,
        ref_len=ref_len,
        smooth_method=method,
        smooth_value=value,
    )
    return BleuReport(
        score=min(100.0, max(0.0, round(float(result.score), 10))),
        precisions=tuple(float(p) / 100.0 for p in result.precisions),  # type: ignore[arg-type]
        brevity_penalty=float(result.bp),
        hyp_len=hyp_len,
        ref_len=ref_len,
        counts=tuple(correct),  # type: ignore[arg-type]
        totals=tuple(total),  # type: ignore[arg-type]
        tokenizer=tokenizer,
        smoothing=smoothing,
    )


def corpus_bleu(
    hypotheses: Sequence[str],
    references: Sequence[str],
    tokenizer: PreTokenizer = "whitespace",
    smoothing: Smoothing = "none",
) -> BleuReport:
    """4-gram corpus BLEU with clipped, pooled precisions and brevity penalty.

    Raises:
        LengthMismatchError: If the sequences differ in length.
        ValueError: If there are no sentences.
    """
    if len(hypotheses) != len(references):
        raise LengthMismatchError(len(references), len(hypotheses))
    if not references:
        raise ValueError("corpus_bleu needs at least one sentence")
    return bleu_from_stats(sufficient_stats(hypotheses, references, tokenizer), tokenizer, smoothing)


# =============================================================================
# Significance
# =============================================================================


class SignificanceTest(Protocol):
    def __call__(
        self,
        hyp_a: Sequence[str],
        hyp_b: Sequence[str],
        refs: Sequence[str],
        n_resamples: int = ...,
        seed: int = ...,
        tokenizer: PreTokenizer = ...,
        smoothing: Smoothing = ...,
    ) -> SignificanceResult: ...


def paired_bootstrap(
    hyp_a: Sequence[str],
    hyp_b: Sequence[str],
    refs: Sequence[str],
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    tokenizer: PreTokenizer = "whitespace",
    smoothing: Smoothing = "none",
) -> SignificanceResult:
    """One-sided paired bootstrap over sentence indices.

    Each resample draws N indices with replacement and scores both systems
    on the same indices. ``p_value`` is the fraction of resamples where A
    does not beat B. When A does not beat B on the full corpus the test
    has nothing to confirm and ``p_value`` is 1.

    Raises:
        LengthMismatchError: If the three sequences differ in length.
        ValueError: If ``n_resamples < 100`` or there are no sentences.
    """
    if len(hyp_a) != len(refs):
        raise LengthMismatchError(len(refs), len(hyp_a), what="system A hypotheses")
    if len(hyp_b) != len(refs):
        raise LengthMismatchError(len(refs), len(hyp_b), what="system B hypotheses")
    if n_resamples < 100:
        raise ValueError(f"n_resamples must be >= 100, got {n_resamples}")
    if not refs:
        raise ValueError("paired_bootstrap needs at least one sentence")

    stats_a = sufficient_stats(hyp_a, refs, tokenizer)
    stats_b = sufficient_stats(hyp_b, refs, tokenizer)
    score_a = bleu_from_stats(stats_a, tokenizer, smoothing).score
    score_b = bleu_from_stats(stats_b, tokenizer, smoothing).score
    delta = score_a - score_b

    if delta <= 0:
        p_value = 1.0
    else:
        rng = np.random.default_rng(seed)
        indices = rng.integers(0, len(refs), size=(n_resamples, len(refs)))
        not_better = 0
        for sample in indices:
            a = bleu_from_stats(stats_a[sample], tokenizer, smoothing).score
            b = bleu_from_stats(stats_b[sample], tokenizer, smoothing).score
            not_better += a - b <= 0
        p_value = not_better / n_resamples

    logger.debug(
        "Paired bootstrap",
        extra={"delta": delta, "p_value": p_value, "n_resamples": n_resamples, "seed": seed},
    )
    return SignificanceResult(
        p_value=p_value,
        n_resamples=n_resamples,
        delta_observed=delta,
        score_a=score_a,
        score_b=score_b,
    )


SIGNIFICANCE_TESTS: dict[str, SignificanceTest] = {
    "paired_bootstrap": paired_bootstrap,
}


def get_significance_test(name: str) -> SignificanceTest:
    """Look up a registered significance test by name."""
    try:
        return SIGNIFICANCE_TESTS[name]
    except KeyError:
        raise ValueError(
            f"Unknown significance test {name!r}; registered: {sorted(SIGNIFICANCE_TESTS)}"
        ) from None


def register_significance_test(name: str, test: SignificanceTest) -> None:
    SIGNIFICANCE_TESTS[name] = test
