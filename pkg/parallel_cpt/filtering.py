"""Similarity-band filtering of parallel corpora.

Every pair is embedded on both sides, scored by cosine similarity and
kept when ``low <= sim < high``. The default band ``[0.4, 0.95)`` drops
misaligned pairs (low similarity) and near-copies (very high similarity).

Embeddings come from a pluggable :class:`EmbeddingProvider`. Two are
bundled: :class:`HashProjectionProvider`, a deterministic character
n-gram hashing projection that needs no model, and
:class:`PrecomputedVectorProvider`, which reads vectors computed elsewhere.
"""

from __future__ import annotations

import hashlib
import json
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .corpus import Corpus, ParallelPair
from .exceptions import (
    EmbeddingError,
    FilterError,
    MalformedRecordError,
    MissingSimilarityError,
    VectorShapeError,
)
from .logging_config import get_logger

logger = get_logger(__name__)

DEFAULT_LOW = 0.4
DEFAULT_HIGH = 0.95


class SimilarityBand(BaseModel):
    """Closed-open similarity interval ``[low, high)``."""

    low: float = Field(default=DEFAULT_LOW, ge=-1.0)
    high: float = Field(default=DEFAULT_HIGH, le=1.0)

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def _ordered(self) -> SimilarityBand:
        if not self.low < self.high:
            raise ValueError(f"band requires low < high, got [{self.low}, {self.high})")
        return self

    def contains(self, similarity: float) -> bool:
        return self.low <= similarity < self.high


class FilterReport(BaseModel):
    """Counts produced by one band filtering pass."""

    kept: int
    dropped_low: int
    dropped_high: int


class EmbeddingProvider(ABC):
    """Maps text to a fixed-dimension real vector.

    Implementations must be deterministic. ``thread_safe`` tells
    :func:`score_corpus` whether it may call the provider concurrently.
    """

    thread_safe: bool = True

    @property
    @abstractmethod
    def dimension(self) -> int:
        """Vector dimension d ≥ 1."""

    @abstractmethod
    def embed(self, text: str) -> np.ndarray:
        """Embed one text."""

    def embed_pair(self, pair: ParallelPair) -> tuple[np.ndarray, np.ndarray]:
        """Embed both sides of a pair; providers keyed by pair id override this."""
        return self.embed(pair.source_text), self.embed(pair.target_text)


class HashProjectionProvider(EmbeddingProvider):
    """Character n-gram feature hashing into ``dimension`` signed buckets.

    Each n-gram (n in ``ngram_orders``, text padded with a boundary mark)
    adds ±1 to one bucket, both chosen from a BLAKE2b digest of the n-gram.
    Languages with disjoint scripts therefore score near 0, identical
    texts score 1.
    """

    def __init__(self, dimension: int = 128, ngram_orders: tuple[int, ...] = (1, 2, 3)) -> None:
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        if not ngram_orders or min(ngram_orders) < 1:
            raise ValueError("ngram_orders must be positive")
        self._dimension = dimension
        self.ngram_orders = tuple(ngram_orders)

    @property
    def dimension(self) -> int:
        return self._dimension

    def _bucket(self, ngram: str) -> tuple[int, float]:
        digest = hashlib.blake2b(ngram.encode("utf-8"), digest_size=8).digest()
        value = int.from_bytes(digest, "little")
        sign = 1.0 if (value >> 63) & 1 else -1.0
        return value % self._dimension, sign

    def embed(self, text: str) -> np.ndarray:
        vector = np.zeros(self._dimension, dtype=np.float64)
        padded = f"\x02{text}\x03"
        for n in self.ngram_orders:
            for start in range(len(padded) - n + 1):
                index, sign = self._bucket(padded[start : start + n])
                vector[index] += sign
        return vector


class PrecomputedVectorProvider(EmbeddingProvider):
    """Vectors read from a file of ``{"id", "src_vec", "tgt_vec"}`` records."""

    def __init__(self, vectors: dict[int, tuple[np.ndarray, np.ndarray]]) -> None:
        dims = {v.shape[0] for pair in vectors.values() for v in pair}
        if len(dims) > 1:
            raise VectorShapeError(
                "Precomputed vectors have inconsistent dimensions", details={"dims": sorted(dims)}
            )
        self._vectors = vectors
        self._dimension = dims.pop() if dims else 1

    @classmethod
    def from_file(cls, path: str | Path) -> PrecomputedVectorProvider:
        """Read a vectors file.

        Raises:
            FilterError: If the file cannot be read.
            MalformedRecordError: If a record lacks a key or holds non-numbers.
        """
        path = Path(path)
        vectors: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        try:
            lines = path.read_text(encoding="utf-8").split("\n")
        except OSError as e:
            raise FilterError(f"Failed to read vectors file: {path} - {e}") from e

        for line_number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                vectors[int(record["id"])] = (
                    np.asarray(record["src_vec"], dtype=np.float64),
                    np.asarray(record["tgt_vec"], dtype=np.float64),
                )
            except KeyError as e:
                raise MalformedRecordError(str(path), line_number, f"missing field {e}") from e
            except (json.JSONDecodeError, TypeError, ValueError) as e:
                raise MalformedRecordError(str(path), line_number, str(e)) from e

        logger.info("Loaded precomputed vectors", extra={"path": str(path), "pairs": len(vectors)})
        return cls(vectors)

    @property
    def dimension(self) -> int:
        return self._dimension

    def embed(self, text: str) -> np.ndarray:
        raise NotImplementedError("precomputed vectors are looked up by pair id")

    def embed_pair(self, pair: ParallelPair) -> tuple[np.ndarray, np.ndarray]:
        return self._vectors[pair.id]


def cosine_similarity(a: np.ndarray | list[float], b: np.ndarray | list[float]) -> float:
    """Cosine of the angle between ``a`` and ``b``, clamped to [-1, 1].

    Raises:
        VectorShapeError: On dimension mismatch or a zero vector.
    """
    va = np.asarray(a, dtype=np.float64).ravel()
    vb = np.asarray(b, dtype=np.float64).ravel()
    if va.shape != vb.shape:
        raise VectorShapeError(
            "Vector dimensions differ", details={"a": va.shape[0], "b": vb.shape[0]}
        )
    norm_a = float(np.linalg.norm(va))
    norm_b = float(np.linalg.norm(vb))
    if norm_a == 0.0 or norm_b == 0.0:
        raise VectorShapeError("Cosine similarity is undefined for a zero vector")
    unit_a, unit_b = va / norm_a, vb / norm_b
    if np.array_equal(unit_a, unit_b):
        return 1.0
    return max(-1.0, min(1.0, float(np.dot(unit_a, unit_b))))


def _score_pair(pair: ParallelPair, provider: EmbeddingProvider) -> float:
    try:
        src_vec, tgt_vec = provider.embed_pair(pair)
        return cosine_similarity(src_vec, tgt_vec)
    except Exception as e:
        raise EmbeddingError(pair.id, e) from e


def score_corpus(corpus: Corpus, provider: EmbeddingProvider, workers: int = 1) -> Corpus:
    """Set every pair's similarity to the cosine of its two embeddings.

    Pairs are scored in parallel when ``workers > 1`` and the provider is
    thread safe; results keep input order.

    Raises:
        EmbeddingError: Naming the first pair whose scoring failed.
    """
    if workers > 1 and provider.thread_safe and len(corpus) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            similarities = list(pool.map(lambda p: _score_pair(p, provider), corpus.pairs))
    else:
        similarities = [_score_pair(pair, provider) for pair in corpus.pairs]

    logger.debug("Scored corpus", extra={"pairs": len(similarities), "workers": workers})
    return corpus.with_similarities(similarities)


def band_report(corpus: Corpus, band: SimilarityBand) -> FilterReport:
    """Count how a band would split a scored corpus."""
    kept = low = high = 0
    for pair in corpus.pairs:
        if pair.similarity is None:
            raise MissingSimilarityError(pair.id)
        if pair.similarity < band.low:
            low += 1
        elif pair.similarity >= band.high:
            high += 1
        else:
            kept += 1
    return FilterReport(kept=kept, dropped_low=low, dropped_high=high)


def band_filter(corpus: Corpus, band: SimilarityBand) -> Corpus:
    """Keep exactly the pairs with ``band.low <= sim < band.high``, in order.

    Raises:
        MissingSimilarityError: If a pair has not been scored.
    """
    report = band_report(corpus, band)
    kept = [pair for pair in corpus.pairs if band.contains(pair.similarity)]  # type: ignore[arg-type]
    logger.info(
        "Band filter applied",
        extra={"low": band.low, "high": band.high, **report.model_dump()},
    )
    return corpus.replace_pairs(kept, note=f"band=[{band.low},{band.high})")
