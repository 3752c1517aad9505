"""Tests for the corpus module."""

from __future__ import annotations

import json
import random
from pathlib import Path

import pytest

from parallel_cpt.corpus import (
    Corpus,
    Direction,
    ParallelPair,
    ceil_fraction,
    load_pairs,
    save_pairs,
)
from parallel_cpt.exceptions import CorpusError, DuplicatePairIdError, MalformedRecordError

from .conftest import EN_JA, make_corpus


class TestDirection:
    """Tests for Direction."""

    def test_parse(self) -> None:
        """Test parsing both separator forms."""
        assert Direction.parse("en-ja") == EN_JA
        assert Direction.parse("en>ja") == EN_JA

    def test_reversed(self) -> None:
        """Test reversing a direction."""
        assert EN_JA.reversed() == Direction(source="ja", target="en")
        assert str(EN_JA.reversed()) == "ja-en"

    def test_same_language_rejected(self) -> None:
        """Test that source and target must differ."""
        with pytest.raises(ValueError):
            Direction(source="en", target="en")

    def test_invalid_code(self) -> None:
        """Test that codes must be lowercase alphanumerics."""
        with pytest.raises(ValueError):
            Direction(source="EN", target="ja")
        with pytest.raises(ValueError):
            Direction.parse("english")


class TestParallelPair:
    """Tests for ParallelPair."""

    def test_empty_text_rejected(self) -> None:
        """Test that whitespace-only texts are rejected."""
        with pytest.raises(ValueError):
            ParallelPair(id=0, source_text="  ", target_text="x", direction=EN_JA)
        with pytest.raises(ValueError):
            ParallelPair(id=0, source_text="x", target_text="\n", direction=EN_JA)

    def test_similarity_range(self) -> None:
        """Test that similarity must lie in [-1, 1]."""
        with pytest.raises(ValueError):
            ParallelPair(id=0, source_text="a", target_text="b", direction=EN_JA, similarity=1.5)

    def test_to_record(self) -> None:
        """Test the pair-file record shape."""
        pair = ParallelPair(id=3, source_text="a", target_text="b", direction=EN_JA, similarity=0.5)

        assert pair.to_record() == {
            "id": 3, "src": "a", "tgt": "b", "src_lang": "en", "tgt_lang": "ja", "sim": 0.5
        }


class TestCorpus:
    """Tests for Corpus."""

    def test_duplicate_ids(self) -> None:
        """Test that duplicate ids raise DuplicatePairIdError."""
        pair = ParallelPair(id=1, source_text="a", target_text="b", direction=EN_JA)

        with pytest.raises(DuplicatePairIdError):
            Corpus(pairs=(pair, pair))

    def test_equality_ignores_provenance(self, corpus_ab: Corpus) -> None:
        """Test that provenance does not take part in equality."""
        assert corpus_ab == corpus_ab.model_copy(update={"provenance": "elsewhere"})

    def test_subset(self, corpus_ab: Corpus) -> None:
        """Test that subset keeps the first ceil(fraction * N) pairs."""
        half = corpus_ab.subset(0.5)
        assert [p.id for p in half] == [0, 1, 2]
        assert len(corpus_ab.subset(0.01)) == 1
        assert "subset=0.5" in half.provenance

        with pytest.raises(ValueError):
            corpus_ab.subset(0.0)

    def test_with_similarities(self, corpus_ab: Corpus) -> None:
        """Test replacing similarities in order."""
        scored = corpus_ab.with_similarities([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])

        assert [p.similarity for p in scored] == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
        with pytest.raises(CorpusError):
            corpus_ab.with_similarities([0.1])


class TestCeilFraction:
    """Tests for ceil_fraction."""

    @pytest.mark.parametrize(
        ("fraction", "count", "expected"),
        [(0.07, 100, 7), (0.01, 50, 1), (0.5, 5, 3), (1.0, 9, 9), (0.0, 10, 0)],
    )
    def test_values(self, fraction: float, count: int, expected: int) -> None:
        """Test ceiling without float noise."""
        assert ceil_fraction(fraction, count) == expected


class TestPairFiles:
    """Tests for load_pairs and save_pairs."""

    def test_load(self, pair_file: Path) -> None:
        """Test loading a pair file."""
        corpus = load_pairs(pair_file)

        assert len(corpus) == 6
        assert corpus[0].source_text == "Good morning"
        assert corpus.directions == {EN_JA}
        assert corpus.provenance == str(pair_file)

    def test_save_then_load(self, tmp_path: Path) -> None:
        """Test that texts with tabs, newlines and line separators survive."""
        corpus = make_corpus([("a\tb", "c\nd"), ("e f", "g\u0085h")], similarities=[0.5, -0.25])
        path = tmp_path / "out.jsonl"

        save_pairs(corpus, path)

        assert load_pairs(path) == corpus

    def test_random_round_trip(self, tmp_path: Path) -> None:
        """Test that 100 random pairs survive save and load field for field."""
        rng = random.Random(0)
        alphabet = "abcxyz Äéñあいうカナ漢字\"\\{}:\t\n\u2028😀"

        def text() -> str:
            body = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 30)))
            return f"w{body}w"

        pairs = [(text(), text()) for _ in range(100)]
        similarities = [rng.uniform(-1.0, 1.0) for _ in range(100)]
        corpus = make_corpus(pairs, similarities=similarities)
        path = tmp_path / "random.jsonl"

        save_pairs(corpus, path)
        loaded = load_pairs(path)

        assert loaded == corpus
        for a, b in zip(corpus, loaded):
            assert (a.id, a.source_text, a.target_text, a.direction, a.similarity) == (
                b.id, b.source_text, b.target_text, b.direction, b.similarity
            )

    def test_missing_ids_assigned(self, tmp_path: Path) -> None:
        """Test that records without ids get sequential ids."""
        path = tmp_path / "p.jsonl"
        path.write_text('{"src": "a", "tgt": "b"}\n\n{"src": "c", "tgt": "d"}\n')

        corpus = load_pairs(path, EN_JA)

        assert [p.id for p in corpus] == [0, 1]
        assert corpus.directions == {EN_JA}

    def test_missing_field(self, tmp_path: Path) -> None:
        """Test that a record without tgt names its line."""
        path = tmp_path / "p.jsonl"
        path.write_text('{"src": "a", "tgt": "b"}\n{"src": "c"}\n')

        with pytest.raises(MalformedRecordError, match="^line 2: missing field 'tgt'"):
            load_pairs(path, EN_JA)

    def test_missing_language_without_direction(self, tmp_path: Path) -> None:
        """Test that language keys are required when no direction is given."""
        path = tmp_path / "p.jsonl"
        path.write_text('{"src": "a", "tgt": "b"}\n')

        with pytest.raises(MalformedRecordError, match="src_lang"):
            load_pairs(path)

    def test_direction_mismatch(self, pair_file: Path) -> None:
        """Test that records in another direction are rejected."""
        with pytest.raises(MalformedRecordError, match="^line 1: direction"):
            load_pairs(pair_file, EN_JA.reversed())

    def test_invalid_json(self, tmp_path: Path) -> None:
        """Test that invalid JSON raises MalformedRecordError."""
        path = tmp_path / "p.jsonl"
        path.write_text("{oops\n")

        with pytest.raises(MalformedRecordError, match="^line 1: invalid JSON"):
            load_pairs(path, EN_JA)

    def test_empty_text(self, tmp_path: Path) -> None:
        """Test that an empty source names its line."""
        path = tmp_path / "p.jsonl"
        path.write_text(json.dumps({"src": " ", "tgt": "b"}) + "\n")

        with pytest.raises(MalformedRecordError, match="^line 1:"):
            load_pairs(path, EN_JA)

    def test_duplicate_ids_in_file(self, tmp_path: Path) -> None:
        """Test that duplicate ids in a file raise DuplicatePairIdError."""
        path = tmp_path / "p.jsonl"
        path.write_text('{"id": 4, "src": "a", "tgt": "b"}\n{"id": 4, "src": "c", "tgt": "d"}\n')

        with pytest.raises(DuplicatePairIdError):
            load_pairs(path, EN_JA)

    def test_missing_file(self, tmp_path: Path) -> None:
        """Test that a missing file raises CorpusError."""
        with pytest.raises(CorpusError):
            load_pairs(tmp_path / "absent.jsonl")
