"""Continual pre-training documents in eight data formats.

A :class:`FormatSpec` crosses an ordering scheme with a direction-marker
format:

* orderings: ``Mono`` (all sources, then all targets), a single direction
  (``A→B`` or ``B→A``), or ``Mix`` (a disjoint split of the pairs between
  the two directions, shuffled together);
* markers: ``Interleaved`` (``src tgt``), ``Prefixed`` (a natural-language
  instruction written in the source language), ``Tagged`` (``<2xx>`` for
  the target language) and ``JsonWrapped`` (``{"L1": src, "L2": tgt}``
  with language names written in the source language).

Mono only combines with Interleaved, because it has no direction to mark.
"""

from __future__ import annotations

import json
import re
from collections.abc import Sequence
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .corpus import Corpus, Direction, ParallelPair, ceil_fraction
from .exceptions import (
    FormatError,
    MalformedRecordError,
    MarkerLookupError,
    MixPairingError,
    ReplayError,
)
from .logging_config import get_logger

logger = get_logger(__name__)

TAG_PATTERN = re.compile(r"^<2[a-z0-9]+>$")

# Markers for the English/Japanese pair; other languages get code-based defaults.
EN_JA_PREFIXES = {
    "en-ja": "translate to Japanese: ",
    "ja-en": "英語に翻訳してください: ",
}
EN_JA_JSON_NAMES = {
    "en-ja": {"en": "English", "ja": "Japanese"},
    "ja-en": {"ja": "日本語", "en": "英語"},
}


# =============================================================================
# Ordering schemes
# =============================================================================


class MonoOrdering(BaseModel):
    """All source sentences, then all target sentences, one per document."""

    kind: Literal["mono"] = "mono"

    model_config = {"frozen": True}


class SingleDirectionOrdering(BaseModel):
    """Every pair of one direction, in corpus order."""

    kind: Literal["single"] = "single"
    direction: Direction

    model_config = {"frozen": True}


class MixOrdering(BaseModel):
    """A ``fraction`` of pair indices read A→B, the rest B→A, shuffled by ``seed``."""

    kind: Literal["mix"] = "mix"
    fraction_per_direction: float = Field(default=0.5, gt=0.0, le=1.0)
    seed: int = 0

    model_config = {"frozen": True}


OrderingScheme = Annotated[
    Union[MonoOrdering, SingleDirectionOrdering, MixOrdering],
    Field(discriminator="kind"),
]


# =============================================================================
# Marker formats
# =============================================================================


class InterleavedMarker(BaseModel):
    """Plain concatenation of source and target."""

    kind: Literal["interleaved"] = "interleaved"

    model_config = {"frozen": True}


class PrefixedMarker(BaseModel):
    """Source-language instruction prefix, keyed by direction (``"en-ja"``)."""

    kind: Literal["prefixed"] = "prefixed"
    prefix_by_direction: dict[str, str]

    model_config = {"frozen": True}

    def prefix(self, direction: Direction) -> str:
        try:
            return self.prefix_by_direction[str(direction)]
        except KeyError:
            raise MarkerLookupError(self.kind, str(direction)) from None


class TaggedMarker(BaseModel):
    """Target-language tag such as ``<2ja>``, keyed by target language code."""

    kind: Literal["tagged"] = "tagged"
    tag_by_target_language: dict[str, str]

    model_config = {"frozen": True}

    @field_validator("tag_by_target_language")
    @classmethod
    def _tag_form(cls, v: dict[str, str]) -> dict[str, str]:
        for language, tag in v.items():
            if not TAG_PATTERN.match(tag):
                raise ValueError(f"tag for {language!r} must look like '<2xx>', got {tag!r}")
        return v

    def tag(self, direction: Direction) -> str:
        try:
            return self.tag_by_target_language[direction.target]
        except KeyError:
            raise MarkerLookupError(self.kind, direction.target) from None


class JsonWrappedMarker(BaseModel):
    """Single-line JSON object whose keys are language names.

    ``names`` maps a direction (``"en-ja"``) to ``{code: name}`` with both
    names written in that direction's source language.
    """

    kind: Literal["json"] = "json"
    names: dict[str, dict[str, str]]

    model_config = {"frozen": True}

    def key_names(self, direction: Direction) -> tuple[str, str]:
        table = self.names.get(str(direction))
        if table is None:
            raise MarkerLookupError(self.kind, str(direction))
        try:
            return table[direction.source], table[direction.target]
        except KeyError as e:
            raise MarkerLookupError(self.kind, f"{direction}:{e.args[0]}") from None


MarkerFormat = Annotated[
    Union[InterleavedMarker, PrefixedMarker, TaggedMarker, JsonWrappedMarker],
    Field(discriminator="kind"),
]

MarkerKind = Literal["interleaved", "prefixed", "tagged", "json"]


def build_marker(kind: MarkerKind, directions: Sequence[Direction]) -> MarkerFormat:
    """Build a marker covering ``directions``.

    English/Japanese directions use the fixed prefixes, tags and JSON
    names; any other language uses its code (``translate to xb: ``,
    ``<2xb>``, ``{"xa": ..., "xb": ...}``).
    """
    if kind == "interleaved":
        return InterleavedMarker()
    if kind == "prefixed":
        return PrefixedMarker(
            prefix_by_direction={
                str(d): EN_JA_PREFIXES.get(str(d), f"translate to {d.target}: ") for d in directions
            }
        )
    if kind == "tagged":
        return TaggedMarker(tag_by_target_language={d.target: f"<2{d.target}>" for d in directions})
    if kind == "json":
        return JsonWrappedMarker(
            names={
                str(d): EN_JA_JSON_NAMES.get(str(d), {d.source: d.source, d.target: d.target})
                for d in directions
            }
        )
    raise ValueError(f"Unknown marker kind: {kind}")


# =============================================================================
# Specs and documents
# =============================================================================


class FormatSpec(BaseModel):
    """Ordering × marker; ``separator`` joins the segments inside a document.

    Documents themselves are separated by the tokenizer's eos at packing time.
    """

    ordering: OrderingScheme
    marker: MarkerFormat = Field(default_factory=InterleavedMarker)
    separator: str = " "

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def _mono_is_unmarked(self) -> FormatSpec:
        if isinstance(self.ordering, MonoOrdering) and not isinstance(
            self.marker, InterleavedMarker
        ):
            raise ValueError("Mono ordering has no translation direction to mark")
        return self


class CptDocument(BaseModel):
    """One text unit of the continual pre-training stream."""

    text: str = Field(min_length=1)
    origin_id: int
    direction: Direction | None = None

    model_config = {"frozen": True}

    def to_record(self) -> dict[str, object]:
        record: dict[str, object] = {"text": self.text, "origin_id": self.origin_id}
        if self.direction is not None:
            record["direction"] = str(self.direction)
        return record


def format_pair(pair: ParallelPair, marker: MarkerFormat, separator: str = " ") -> CptDocument:
    """Render one pair in its own direction under ``marker``.

    Raises:
        MarkerLookupError: If the marker lacks an entry for the pair's direction.
    """
    src, tgt, direction = pair.source_text, pair.target_text, pair.direction
    if isinstance(marker, InterleavedMarker):
        text = f"{src}{separator}{tgt}"
    elif isinstance(marker, PrefixedMarker):
        text = f"{marker.prefix(direction)}{src}{separator}{tgt}"
    elif isinstance(marker, TaggedMarker):
        text = f"{marker.tag(direction)}{separator}{src}{separator}{tgt}"
    elif isinstance(marker, JsonWrappedMarker):
        src_name, tgt_name = marker.key_names(direction)
        text = json.dumps({src_name: src, tgt_name: tgt}, ensure_ascii=False)
    else:  # pragma: no cover - exhaustive over MarkerFormat
        raise FormatError(f"Unsupported marker: {marker!r}")
    return CptDocument(text=text, origin_id=pair.id, direction=direction)


def _single_direction(corpus: Corpus | None, direction: Direction, name: str) -> Corpus:
    if corpus is None:
        raise FormatError(f"{name} is required for direction {direction}")
    if corpus.directions - {direction}:
        raise FormatError(
            f"{name} is not a {direction} corpus",
            details={"directions": sorted(str(d) for d in corpus.directions)},
        )
    return corpus


def build_cpt_corpus(
    corpus_ab: Corpus,
    corpus_ba: Corpus | None,
    spec: FormatSpec,
) -> list[CptDocument]:
    """Emit the ordered CPT documents selected by ``spec``.

    ``corpus_ba`` holds the same pairs as ``corpus_ab`` read in the reverse
    direction (index ``i`` of each is the same sentence pair); it is only
    needed for the B→A and Mix orderings.

    Raises:
        FormatError: If the corpora do not match the ordering's directions.
        MixPairingError: If Mix gets corpora of different sizes.
    """
    ordering, marker, sep = spec.ordering, spec.marker, spec.separator
    directions = corpus_ab.directions
    if len(directions) > 1:
        raise FormatError("corpus_ab mixes directions", details={"directions": len(directions)})

    if isinstance(ordering, MonoOrdering):
        docs = [CptDocument(text=p.source_text, origin_id=p.id) for p in corpus_ab]
        docs += [CptDocument(text=p.target_text, origin_id=p.id) for p in corpus_ab]

    elif isinstance(ordering, SingleDirectionOrdering):
        if ordering.direction in directions:
            source = corpus_ab
        else:
            source = _single_direction(corpus_ba, ordering.direction, "corpus_ba")
        docs = [format_pair(pair, marker, sep) for pair in source]

    else:
        docs = _build_mix(corpus_ab, corpus_ba, ordering, marker, sep)

    logger.info(
        "Built CPT documents",
        extra={"ordering": ordering.kind, "marker": marker.kind, "documents": len(docs)},
    )
    return docs


def _build_mix(
    corpus_ab: Corpus,
    corpus_ba: Corpus | None,
    ordering: MixOrdering,
    marker: MarkerFormat,
    separator: str,
) -> list[CptDocument]:
    if corpus_ba is None or len(corpus_ba) != len(corpus_ab):
        raise MixPairingError(
            "Mix ordering needs both directions of the same pairs",
            details={
                "pairs_ab": len(corpus_ab),
                "pairs_ba": None if corpus_ba is None else len(corpus_ba),
            },
        )
    if corpus_ab.directions and corpus_ba.directions and (
        {d.reversed() for d in corpus_ab.directions} != corpus_ba.directions
    ):
        raise MixPairingError("corpus_ba is not the reverse direction of corpus_ab")

    n = len(corpus_ab)
    k = ceil_fraction(ordering.fraction_per_direction, n)
    rng = np.random.default_rng(ordering.seed)
    ab_indices = np.sort(rng.choice(n, size=k, replace=False)) if n else np.array([], dtype=int)
    chosen = np.zeros(n, dtype=bool)
    chosen[ab_indices] = True
    ba_indices = np.flatnonzero(~chosen)

    docs = [format_pair(corpus_ab[int(i)], marker, separator) for i in ab_indices]
    docs += [format_pair(corpus_ba[int(i)], marker, separator) for i in ba_indices]
    order = rng.permutation(len(docs))
    logger.debug("Mix split", extra={"ab": len(ab_indices), "ba": len(ba_indices)})
    return [docs[int(i)] for i in order]


def replay_mix(
    primary: Sequence[CptDocument],
    replay: Sequence[CptDocument],
    replay_fraction: float,
    seed: int,
) -> list[CptDocument]:
    """Add ⌈replay_fraction·|primary|⌉ documents from ``replay`` and shuffle.

    Replay documents are drawn without replacement, or with replacement
    when ``replay`` is too small.

    Raises:
        ReplayError: If ``primary`` is empty, the fraction is outside (0, 1),
            or ``replay`` is empty.
    """
    if not primary:
        raise ReplayError("Replay mixing needs a non-empty primary stream")
    if not 0.0 < replay_fraction < 1.0:
        raise ReplayError(
            "replay_fraction must be in (0, 1)", details={"replay_fraction": replay_fraction}
        )
    if not replay:
        raise ReplayError("Replay stream is empty")

    count = ceil_fraction(replay_fraction, len(primary))
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(replay), size=count, replace=count > len(replay))
    combined = list(primary) + [replay[int(i)] for i in picked]
    order = rng.permutation(len(combined))
    logger.info(
        "Replay mixed",
        extra={"primary": len(primary), "replayed": count, "replay_pool": len(replay)},
    )
    return [combined[int(i)] for i in order]


# =============================================================================
# Document files
# =============================================================================


def save_documents(docs: Sequence[CptDocument], path: str | Path) -> None:
    """Write documents as JSON lines (``text``, ``origin_id``, optional ``direction``)."""
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for doc in docs:
                f.write(json.dumps(doc.to_record(), ensure_ascii=False))
                f.write("\n")
    except OSError as e:
        raise FormatError(f"Failed to write documents: {path} - {e}") from e


def load_documents(path: str | Path) -> list[CptDocument]:
    """Read a document file written by :func:`save_documents`."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").split("\n")
    except OSError as e:
        raise FormatError(f"Failed to read documents: {path} - {e}") from e

    docs: list[CptDocument] = []
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            direction = record.get("direction")
            docs.append(
                CptDocument(
                    text=record["text"],
                    origin_id=record["origin_id"],
                    direction=Direction.parse(direction) if direction else None,
                )
            )
        except KeyError as e:
            raise MalformedRecordError(str(path), line_number, f"missing field {e}") from e
        except (json.JSONDecodeError, ValidationError, ValueError, AttributeError) as e:
            raise MalformedRecordError(str(path), line_number, str(e)) from e
    return docs
