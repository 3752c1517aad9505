"""Tests for similarity-band filtering."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from parallel_cpt.corpus import Corpus
from parallel_cpt.exceptions import (
    EmbeddingError,
    MalformedRecordError,
    MissingSimilarityError,
    VectorShapeError,
)
from parallel_cpt.filtering import (
    HashProjectionProvider,
    PrecomputedVectorProvider,
    SimilarityBand,
    band_filter,
    band_report,
    cosine_similarity,
    score_corpus,
)

from .conftest import make_corpus

SIMILARITIES = [0.2, 0.4, 0.7, 0.95, 0.99, 0.3999]


@pytest.fixture
def scored() -> Corpus:
    """Six pairs whose similarities straddle the default band."""
    return make_corpus(similarities=SIMILARITIES)


class TestSimilarityBand:
    """Tests for SimilarityBand."""

    def test_defaults(self) -> None:
        """Test the default [0.4, 0.95) band."""
        band = SimilarityBand()

        assert (band.low, band.high) == (0.4, 0.95)
        assert band.contains(0.4)
        assert not band.contains(0.95)

    def test_low_must_be_below_high(self) -> None:
        """Test that an empty band is rejected."""
        with pytest.raises(ValueError):
            SimilarityBand(low=0.5, high=0.5)


class TestCosineSimilarity:
    """Tests for cosine_similarity."""

    def test_known_values(self) -> None:
        """Test parallel, orthogonal and opposite vectors."""
        assert cosine_similarity([1, 0], [2, 0]) == pytest.approx(1.0)
        assert cosine_similarity([1, 0], [0, 3]) == pytest.approx(0.0)
        assert cosine_similarity([1, 1], [-1, -1]) == pytest.approx(-1.0)

    def test_clamped(self) -> None:
        """Test that rounding never escapes [-1, 1]."""
        v = np.full(1000, 0.1)
        assert -1.0 <= cosine_similarity(v, v) <= 1.0

    def test_identical_vectors_exactly_one(self) -> None:
        """Test that a vector compared with itself scores exactly 1."""
        rng = np.random.default_rng(3)
        for _ in range(50):
            v = rng.normal(size=int(rng.integers(2, 300)))
            assert cosine_similarity(v, v) == 1.0
        assert cosine_similarity(np.full(1000, 0.1), np.full(1000, 0.1)) == 1.0

    def test_symmetric_and_scale_invariant(self) -> None:
        """Test symmetry and invariance to positive scaling within 1e-9."""
        rng = np.random.default_rng(4)
        for _ in range(100):
            a, b = rng.normal(size=(2, 64))
            scale = float(rng.uniform(0.01, 100.0))
            base = cosine_similarity(a, b)

            assert abs(base - cosine_similarity(b, a)) < 1e-9
            assert abs(base - cosine_similarity(scale * a, b)) < 1e-9
            assert abs(base - cosine_similarity(a, scale * b)) < 1e-9

    def test_dimension_mismatch(self) -> None:
        """Test that mismatched dimensions raise VectorShapeError."""
        with pytest.raises(VectorShapeError):
            cosine_similarity([1, 0], [1, 0, 0])

    def test_zero_vector(self) -> None:
        """Test that a zero vector raises VectorShapeError."""
        with pytest.raises(VectorShapeError):
            cosine_similarity([0, 0], [1, 0])


class TestBandFilter:
    """Tests for band_filter and band_report."""

    def test_keeps_band_in_order(self, scored: Corpus) -> None:
        """Test that exactly low <= sim < high survives, in input order."""
        kept = band_filter(scored, SimilarityBand())

        assert [p.id for p in kept] == [1, 2]
        assert all(0.4 <= p.similarity < 0.95 for p in kept)  # type: ignore[operator]

    def test_report_counts(self, scored: Corpus) -> None:
        """Test kept and dropped counts."""
        report = band_report(scored, SimilarityBand())

        assert report.kept == 2
        assert report.dropped_low == 2
        assert report.dropped_high == 2
        assert report.kept + report.dropped_low + report.dropped_high == len(scored)

    def test_idempotent(self, scored: Corpus) -> None:
        """Test that filtering twice changes nothing."""
        band = SimilarityBand()
        once = band_filter(scored, band)

        assert band_filter(once, band) == once

    def test_uniform_similarities(self) -> None:
        """Test the closed-open band on 1000 uniform similarities plus both edges."""
        rng = np.random.default_rng(5)
        sims = [float(s) for s in rng.uniform(-1.0, 1.0, size=1000)] + [0.4, 0.95]
        corpus = make_corpus([(f"s{i}", f"t{i}") for i in range(len(sims))], similarities=sims)

        kept = band_filter(corpus, SimilarityBand())

        assert [p.id for p in kept] == [i for i, s in enumerate(sims) if 0.4 <= s < 0.95]
        assert kept[len(kept) - 1].similarity == 0.4

    def test_copy_pairs_dropped(self) -> None:
        """Test that pairs whose two sides are identical fall outside [-1, 1)."""
        texts = ["Good morning", "おはよう", "a", "The weather is nice today", "駅はどこですか？"]
        corpus = score_corpus(make_corpus([(t, t) for t in texts]), HashProjectionProvider())

        assert [p.similarity for p in corpus] == [1.0] * len(texts)
        assert len(band_filter(corpus, SimilarityBand(low=-1.0, high=1.0))) == 0

    def test_empty_corpus(self) -> None:
        """Test that an empty corpus filters to an empty corpus."""
        assert len(band_filter(Corpus(), SimilarityBand())) == 0

    def test_unscored_pair(self, corpus_ab: Corpus) -> None:
        """Test that an unscored pair raises MissingSimilarityError."""
        with pytest.raises(MissingSimilarityError):
            band_filter(corpus_ab, SimilarityBand())


class TestHashProjectionProvider:
    """Tests for HashProjectionProvider."""

    def test_deterministic(self) -> None:
        """Test that the same text always embeds the same way."""
        a = HashProjectionProvider().embed("Good morning")
        b = HashProjectionProvider().embed("Good morning")

        assert np.array_equal(a, b)
        assert a.shape == (128,)

    def test_identical_texts_score_one(self) -> None:
        """Test that a copy pair lands above the default band."""
        provider = HashProjectionProvider()
        corpus = make_corpus([("same text", "same text")])

        assert score_corpus(corpus, provider)[0].similarity == pytest.approx(1.0)

    def test_invalid_dimension(self) -> None:
        """Test constructor validation."""
        with pytest.raises(ValueError):
            HashProjectionProvider(dimension=0)


class TestScoreCorpus:
    """Tests for score_corpus."""

    def test_parallel_matches_serial(self, corpus_ab: Corpus) -> None:
        """Test that worker count does not change scores or order."""
        provider = HashProjectionProvider()

        serial = score_corpus(corpus_ab, provider, workers=1)
        parallel = score_corpus(corpus_ab, provider, workers=4)

        assert serial == parallel
        assert all(p.similarity is not None for p in serial)

    def test_precomputed_vectors(self, tmp_path: Path) -> None:
        """Test scoring from a vectors file keyed by pair id."""
        path = tmp_path / "vectors.jsonl"
        path.write_text(
            json.dumps({"id": 0, "src_vec": [1, 0], "tgt_vec": [1, 1]})
            + "\n"
            + json.dumps({"id": 1, "src_vec": [0, 1], "tgt_vec": [0, 2]})
            + "\n"
        )
        corpus = make_corpus([("a", "b"), ("c", "d")])

        scored = score_corpus(corpus, PrecomputedVectorProvider.from_file(path))

        assert scored[0].similarity == pytest.approx(2**-0.5)
        assert scored[1].similarity == pytest.approx(1.0)

    def test_missing_vector_names_pair(self) -> None:
        """Test that a pair without vectors raises EmbeddingError with its id."""
        provider = PrecomputedVectorProvider({0: (np.ones(2), np.ones(2))})
        corpus = make_corpus([("a", "b"), ("c", "d")])

        with pytest.raises(EmbeddingError) as exc_info:
            score_corpus(corpus, provider)
        assert exc_info.value.pair_id == 1

    def test_malformed_vectors_file(self, tmp_path: Path) -> None:
        """Test that a record without tgt_vec names its line."""
        path = tmp_path / "vectors.jsonl"
        path.write_text('{"id": 0, "src_vec": [1]}\n')

        with pytest.raises(MalformedRecordError, match="^line 1:"):
            PrecomputedVectorProvider.from_file(path)

    def test_inconsistent_dimensions(self) -> None:
        """Test that vectors of different sizes are rejected."""
        with pytest.raises(VectorShapeError):
            PrecomputedVectorProvider({0: (np.ones(2), np.ones(3))})
