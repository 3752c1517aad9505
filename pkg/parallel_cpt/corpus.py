"""Parallel corpus types and pair-file I/O.

A pair file holds one JSON object per line::

    {"id": 0, "src": "Good morning", "tgt": "おはよう",
     "src_lang": "en", "tgt_lang": "ja", "sim": 0.83}

``id`` and ``sim`` are optional. Texts are stored verbatim (no
normalization); JSON string escaping lets them carry tabs and newlines.

Example:
    >>> corpus = load_pairs("train.jsonl", Direction.parse("en-ja"))
    >>> save_pairs(corpus, "copy.jsonl")
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterator, Sequence
from pathlib import Path
from typing import Annotated, Any

from pydantic import BaseModel, Field, StringConstraints, ValidationError, model_validator

from .exceptions import CorpusError, DuplicatePairIdError, MalformedRecordError
from .logging_config import get_logger

logger = get_logger(__name__)

LanguageCode = Annotated[str, StringConstraints(pattern=r"^[a-z0-9]+$")]
"""Short language identifier: non-empty, lowercase ASCII letters and digits."""


def ceil_fraction(fraction: float, count: int) -> int:
    """⌈fraction·count⌉ without float noise (0.07 * 100 is 7, not 8)."""
    return math.ceil(round(fraction * count, 9))


class Direction(BaseModel):
    """A translation direction ``source ⇒ target``."""

    source: LanguageCode
    target: LanguageCode

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def _distinct_languages(self) -> Direction:
        if self.source == self.target:
            raise ValueError(f"source and target language are both {self.source!r}")
        return self

    @classmethod
    def parse(cls, text: str) -> Direction:
        """Parse ``"en-ja"`` (or ``"en>ja"``) into a direction."""
        for sep in ("-", ">"):
            if sep in text:
                source, target = text.split(sep, 1)
                return cls(source=source.strip(), target=target.strip())
        raise ValueError(f"Direction must look like 'en-ja', got {text!r}")

    def reversed(self) -> Direction:
        return Direction(source=self.target, target=self.source)

    def __str__(self) -> str:
        return f"{self.source}-{self.target}"


class ParallelPair(BaseModel):
    """One aligned source/target sentence pair."""

    id: int = Field(ge=0)
    source_text: str
    target_text: str
    direction: Direction
    similarity: float | None = Field(default=None, ge=-1.0, le=1.0)

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def _non_empty_texts(self) -> ParallelPair:
        if not self.source_text.strip():
            raise ValueError("source_text is empty")
        if not self.target_text.strip():
            raise ValueError("target_text is empty")
        return self

    def to_record(self) -> dict[str, Any]:
        """Return the pair-file record for this pair."""
        record: dict[str, Any] = {
            "id": self.id,
            "src": self.source_text,
            "tgt": self.target_text,
            "src_lang": self.direction.source,
            "tgt_lang": self.direction.target,
        }
        if self.similarity is not None:
            record["sim"] = self.similarity
        return record


class Corpus(BaseModel):
    """An ordered sequence of pairs with unique ids.

    ``provenance`` is a free-text label and does not take part in equality.
    """

    pairs: tuple[ParallelPair, ...] = ()
    provenance: str = ""

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def _unique_ids(self) -> Corpus:
        seen: set[int] = set()
        for pair in self.pairs:
            if pair.id in seen:
                raise DuplicatePairIdError(pair.id)
            seen.add(pair.id)
        return self

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[ParallelPair]:  # type: ignore[override]
        return iter(self.pairs)

    def __getitem__(self, index: int) -> ParallelPair:
        return self.pairs[index]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.pairs == other.pairs

    def __hash__(self) -> int:
        return hash(self.pairs)

    @property
    def directions(self) -> set[Direction]:
        return {pair.direction for pair in self.pairs}

    def replace_pairs(self, pairs: Sequence[ParallelPair], note: str | None = None) -> Corpus:
        """Return a corpus with the same provenance (plus ``note``) and new pairs."""
        provenance = f"{self.provenance}|{note}" if note else self.provenance
        return Corpus(pairs=tuple(pairs), provenance=provenance)

    def subset(self, fraction: float) -> Corpus:
        """Return the first ⌈fraction·N⌉ pairs, for data-fraction curves."""
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"fraction must be in (0, 1], got {fraction}")
        count = ceil_fraction(fraction, len(self.pairs))
        return self.replace_pairs(self.pairs[:count], note=f"subset={fraction}")

    def with_similarities(self, similarities: Sequence[float]) -> Corpus:
        """Return the corpus with every pair's similarity replaced, in order."""
        if len(similarities) != len(self.pairs):
            raise CorpusError(
                "Similarity count does not match pair count",
                details={"pairs": len(self.pairs), "similarities": len(similarities)},
            )
        pairs = [
            pair.model_copy(update={"similarity": max(-1.0, min(1.0, float(sim)))})
            for pair, sim in zip(self.pairs, similarities)
        ]
        return self.replace_pairs(pairs)


def _record_to_pair(
    record: Any, index: int, direction: Direction | None, path: str, line_number: int
) -> ParallelPair:
    if not isinstance(record, dict):
        raise MalformedRecordError(path, line_number, "record is not an object")

    for key in ("src", "tgt"):
        if key not in record:
            raise MalformedRecordError(path, line_number, f"missing field '{key}'")

    if "src_lang" in record and "tgt_lang" in record:
        try:
            record_direction = Direction(source=record["src_lang"], target=record["tgt_lang"])
        except ValidationError as e:
            raise MalformedRecordError(path, line_number, f"invalid languages: {e}") from e
        if direction is not None and record_direction != direction:
            raise MalformedRecordError(
                path, line_number, f"direction {record_direction} differs from expected {direction}"
            )
    elif direction is not None:
        record_direction = direction
    else:
        missing = "src_lang" if "src_lang" not in record else "tgt_lang"
        raise MalformedRecordError(path, line_number, f"missing field '{missing}'")

    pair_id = record.get("id")
    if pair_id is None:
        pair_id = index
    if isinstance(pair_id, bool) or not isinstance(pair_id, int):
        raise MalformedRecordError(path, line_number, "field 'id' is not an integer")

    try:
        return ParallelPair(
            id=pair_id,
            source_text=record["src"],
            target_text=record["tgt"],
            direction=record_direction,
            similarity=record.get("sim"),
        )
    except ValidationError as e:
        reason = "; ".join(err["msg"] for err in e.errors())
        raise MalformedRecordError(path, line_number, reason) from e


def load_pairs(
    path: str | Path,
    direction: Direction | None = None,
    provenance: str | None = None,
) -> Corpus:
    """Load a pair file.

    Args:
        path: Pair file path.
        direction: Expected direction. Records carrying other languages are
            rejected; records without language keys take this direction.
            ``None`` accepts whatever each record declares.
        provenance: Label for the corpus (defaults to the path).

    Returns:
        All pairs in file order; missing ids are assigned sequentially from 0.

    Raises:
        CorpusError: If the file cannot be read.
        MalformedRecordError: If a line is not a valid record.
        DuplicatePairIdError: If two records share an id.
    """
    path = Path(path)
    try:
        # "\n" only: raw U+2028 or U+0085 may sit inside a record's strings
        lines = path.read_text(encoding="utf-8").split("\n")
    except OSError as e:
        raise CorpusError(f"Failed to read pair file: {path} - {e}", details={"path": str(path)}) from e

    pairs: list[ParallelPair] = []
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise MalformedRecordError(str(path), line_number, f"invalid JSON ({e.msg})") from e
        pairs.append(_record_to_pair(record, len(pairs), direction, str(path), line_number))

    corpus = Corpus(pairs=tuple(pairs), provenance=provenance or str(path))
    logger.info("Loaded pair file", extra={"path": str(path), "pairs": len(corpus)})
    return corpus


def save_pairs(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus as a pair file (UTF-8, one record per line).

    Raises:
        CorpusError: If the path cannot be written.
    """
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for pair in corpus.pairs:
                f.write(json.dumps(pair.to_record(), ensure_ascii=False))
                f.write("\n")
    except OSError as e:
        raise CorpusError(f"Failed to write pair file: {path} - {e}", details={"path": str(path)}) from e
    logger.debug("Saved pair file", extra={"path": str(path), "pairs": len(corpus)})
