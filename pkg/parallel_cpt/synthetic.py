"""Seeded synthetic bilingual tasks with exact ground truth.

Source sentences are uniform random words over a small vocabulary of
pseudo-words. The target is a deterministic bijective transform of the
source: a word-for-word substitution cipher, a word-order reversal, or
both. Because every transform is invertible, the reverse direction is
exact too.
"""

from __future__ import annotations

import json
import string
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from .corpus import Corpus, Direction, LanguageCode, ParallelPair, save_pairs
from .formats import build_marker
from .logging_config import get_logger
from .packing import VocabTokenizer
from .sft import synthetic_template

logger = get_logger(__name__)

TaskName = Literal["substitution_cipher", "word_reversal", "cipher_plus_reversal"]

DEFAULT_VOCAB_SIZE = 32
SPLIT_NAMES = ("train", "val", "test", "sft")


def pseudo_words(count: int, seed: int, min_len: int = 2, max_len: int = 4) -> tuple[str, ...]:
    """``count`` distinct lowercase pseudo-words drawn under ``seed``."""
    rng = np.random.default_rng(seed)
    letters = np.array(list(string.ascii_lowercase))
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < count:
        length = int(rng.integers(min_len, max_len + 1))
        word = "".join(rng.choice(letters, size=length))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return tuple(words)


class SyntheticTaskSpec(BaseModel):
    """A synthetic translation task and its split sizes.

    ``vocab`` defaults to 32 pseudo-words drawn from ``seed``; ``cipher``
    defaults to a seeded permutation of ``vocab``. ``n_sft`` pairs form an
    extra fine-tuning split, disjoint from the others.
    """

    task: TaskName = "cipher_plus_reversal"
    vocab: tuple[str, ...] = ()
    cipher: dict[str, str] | None = None
    sentence_len_range: tuple[int, int] = (3, 8)
    n_train: int = Field(default=20000, ge=1)
    n_val: int = Field(default=500, ge=1)
    n_test: int = Field(default=500, ge=1)
    n_sft: int = Field(default=1000, ge=0)
    source_lang: LanguageCode = "srcl"
    target_lang: LanguageCode = "tgtl"
    seed: int = 0

    model_config = {"frozen": True}

    @field_validator("vocab")
    @classmethod
    def validate_vocab(cls, v: tuple[str, ...]) -> tuple[str, ...]:
        if v and len(v) < 8:
            raise ValueError(f"vocab needs at least 8 words, got {len(v)}")
        if len(set(v)) != len(v):
            raise ValueError("vocab words must be distinct")
        if any(not word or any(ch.isspace() for ch in word) for word in v):
            raise ValueError("vocab words must be non-empty and contain no whitespace")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> SyntheticTaskSpec:
        low, high = self.sentence_len_range
        if not 1 <= low <= high:
            raise ValueError(f"sentence_len_range must satisfy 1 <= min <= max, got {(low, high)}")
        if self.source_lang == self.target_lang:
            raise ValueError("source and target language codes must differ")
        if self.cipher is not None:
            words = set(self.words)
            if set(self.cipher) != words or set(self.cipher.values()) != words:
                raise ValueError("cipher must be a bijection of the vocabulary onto itself")
        if self.total > self.sentence_space:
            raise ValueError(
                f"{self.total} distinct sentences requested but only {self.sentence_space} exist"
            )
        return self

    @property
    def words(self) -> tuple[str, ...]:
        return self.vocab or pseudo_words(DEFAULT_VOCAB_SIZE, self.seed)

    @property
    def direction(self) -> Direction:
        return Direction(source=self.source_lang, target=self.target_lang)

    @property
    def total(self) -> int:
        return self.n_train + self.n_val + self.n_test + self.n_sft

    @property
    def sentence_space(self) -> int:
        low, high = self.sentence_len_range
        return sum(len(self.words) ** length for length in range(low, high + 1))

    def substitution(self) -> dict[str, str]:
        """The word cipher: ``cipher`` if given, else a seeded permutation."""
        if self.cipher is not None:
            return dict(self.cipher)
        words = self.words
        order = np.random.default_rng(self.seed + 1).permutation(len(words))
        return {word: words[int(j)] for word, j in zip(words, order)}


def transform(words: list[str], task: TaskName, cipher: dict[str, str]) -> list[str]:
    """Apply the task's target transform to a tokenized source sentence."""
    if task in ("substitution_cipher", "cipher_plus_reversal"):
        words = [cipher[w] for w in words]
    if task in ("word_reversal", "cipher_plus_reversal"):
        words = words[::-1]
    return words


class SyntheticSplits(BaseModel):
    """Disjoint corpora of one synthetic task (``sft`` may be empty)."""

    train: Corpus
    val: Corpus
    test: Corpus
    sft: Corpus = Corpus()

    model_config = {"frozen": True}

    def items(self) -> list[tuple[str, Corpus]]:
        return [(name, getattr(self, name)) for name in SPLIT_NAMES]


def generate(spec: SyntheticTaskSpec) -> SyntheticSplits:
    """Draw ``spec.total`` distinct source sentences and split them in order.

    Pair ids run across all splits, so no id repeats between splits.
    """
    rng = np.random.default_rng(spec.seed)
    words = spec.words
    cipher = spec.substitution()
    low, high = spec.sentence_len_range

    sentences: list[tuple[str, ...]] = []
    seen: set[tuple[str, ...]] = set()
    while len(sentences) < spec.total:
        length = int(rng.integers(low, high + 1))
        sentence = tuple(words[int(i)] for i in rng.integers(0, len(words), size=length))
        if sentence not in seen:
            seen.add(sentence)
            sentences.append(sentence)

    direction = spec.direction
    pairs = [
        ParallelPair(
            id=index,
            source_text=" ".join(sentence),
            target_text=" ".join(transform(list(sentence), spec.task, cipher)),
            direction=direction,
        )
        for index, sentence in enumerate(sentences)
    ]

    bounds = np.cumsum([0, spec.n_train, spec.n_val, spec.n_test, spec.n_sft])
    corpora = {
        name: Corpus(
            pairs=tuple(pairs[bounds[i] : bounds[i + 1]]),
            provenance=f"synthetic:{spec.task}:seed={spec.seed}:{name}",
        )
        for i, name in enumerate(SPLIT_NAMES)
    }
    logger.info(
        "Generated synthetic task",
        extra={"task": spec.task, "seed": spec.seed, **{k: len(v) for k, v in corpora.items()}},
    )
    return SyntheticSplits(**corpora)


def invert_direction(corpus: Corpus) -> Corpus:
    """Swap source and target (texts and languages) of every pair."""
    pairs = [
        pair.model_copy(
            update={
                "source_text": pair.target_text,
                "target_text": pair.source_text,
                "direction": pair.direction.reversed(),
            }
        )
        for pair in corpus.pairs
    ]
    return Corpus(pairs=tuple(pairs), provenance=corpus.provenance)


def write_splits(splits: SyntheticSplits, out_dir: str | Path) -> list[Path]:
    """Write ``<split>.ab.jsonl`` and ``<split>.ba.jsonl`` for every non-empty split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, corpus in splits.items():
        if not len(corpus):
            continue
        for suffix, data in (("ab", corpus), ("ba", invert_direction(corpus))):
            path = out_dir / f"{name}.{suffix}.jsonl"
            save_pairs(data, path)
            written.append(path)
    return written


def task_pieces(spec: SyntheticTaskSpec) -> list[str]:
    """Word pieces that make every task text a short sequence of whole tokens.

    Covers each word with and without a leading space, the prompt template
    of both directions (instruction line and response header), the shot
    separator, and the prefix, tag and JSON framing of every marker.
    """
    pieces: list[str] = []
    for word in spec.words:
        pieces += [word, f" {word}"]
    pieces.append("\n\n")
    for direction in (spec.direction, spec.direction.reversed()):
        template = synthetic_template(direction)
        head = template.template.split("{source}", 1)[0]
        pieces += [head, "\n" + template.response_header]
        pieces.append(build_marker("prefixed", [direction]).prefix(direction))
        pieces.append(build_marker("tagged", [direction]).tag(direction))
        src_name, tgt_name = build_marker("json", [direction]).key_names(direction)
        framing = json.dumps({src_name: "@", tgt_name: "#"}, ensure_ascii=False)
        opening, rest = framing.split("@", 1)
        middle, closing = rest.split("#", 1)
        pieces += [opening, middle, closing]
    return pieces


def task_tokenizer(spec: SyntheticTaskSpec) -> VocabTokenizer:
    """Word-level tokenizer for one synthetic task (``tokenizer: task``).

    Source and target sentences of ``n`` words encode to exactly ``n``
    tokens; anything else falls back to bytes.
    """
    return VocabTokenizer(task_pieces(spec), source=f"task:{spec.task}:seed={spec.seed}")
