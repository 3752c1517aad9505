"""Supervised fine-tuning examples with target-only loss masks.

An example is ``encode(prompt) ++ encode(target) ++ [eos]``. The loss is
the causal next-token NLL restricted to target positions: the prediction
made at position ``i - 1`` for token ``i`` counts only when ``i`` is a
target (or the final eos) position. Prompt tokens are fed to the model but
never supervised.

SFT file layout (little-endian)::

    magic "BFSF" | version u16 | example_count u64
    then per example: len u32 | prompt_len u32 | ids u32[len]
"""

from __future__ import annotations

import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, model_validator

from .config import load_structured_file
from .corpus import Direction, ParallelPair
from .exceptions import (
    ConfigFileParseError,
    EmptyTargetError,
    LossShapeError,
    PackFileError,
    PromptDirectionError,
    TokenizationError,
)
from .packing import Tokenizer

PLACEHOLDER = "{source}"

SFT_MAGIC = b"BFSF"
SFT_VERSION = 1
_SFT_HEADER = struct.Struct("<4sHQ")
_SFT_RECORD = struct.Struct("<II")

LossNormalization = Literal["tokens", "sum"]


class PromptTemplate(BaseModel):
    """A translation prompt with one ``{source}`` slot.

    ``response_header`` is the trailing text after which the target starts;
    it belongs to the prompt and is never supervised.
    """

    direction: Direction
    template: str
    response_header: str

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def _well_formed(self) -> PromptTemplate:
        if self.template.count(PLACEHOLDER) != 1:
            raise ValueError(f"template must contain exactly one {PLACEHOLDER} placeholder")
        if not self.template.endswith(self.response_header):
            raise ValueError("template must end with its response header")
        if self.template.rindex(PLACEHOLDER) + len(PLACEHOLDER) > len(self.template) - len(
            self.response_header
        ):
            raise ValueError("response header must follow the placeholder")
        return self

    @classmethod
    def from_text(cls, direction: Direction, template: str) -> PromptTemplate:
        """Derive the response header: the text after the placeholder's last line break."""
        tail = template.split(PLACEHOLDER, 1)[-1] if PLACEHOLDER in template else ""
        header = tail.rsplit("\n", 1)[-1]
        return cls(direction=direction, template=template, response_header=header)


ENJA_TEMPLATE = PromptTemplate(
    direction=Direction(source="en", target="ja"),
    template="Translate this from English to Japanese:\nEnglish: {source}\nJapanese: ",
    response_header="Japanese: ",
)
JAEN_TEMPLATE = PromptTemplate(
    direction=Direction(source="ja", target="en"),
    template="これを日本語から英語に翻訳してください :\n日本語 : {source}\n英語 : ",
    response_header="英語 : ",
)
BUILTIN_TEMPLATES = {"enja": ENJA_TEMPLATE, "jaen": JAEN_TEMPLATE}


def synthetic_template(direction: Direction) -> PromptTemplate:
    """English-style template naming languages by their codes."""
    s, t = direction.source, direction.target
    return PromptTemplate.from_text(direction, f"Translate {s} to {t}:\n{s}: {{source}}\n{t}: ")


def resolve_template(spec: str, direction: Direction | None = None) -> PromptTemplate:
    """Resolve ``enja``, ``jaen``, ``synthetic`` or ``file:PATH``.

    A template file is JSON/YAML with ``source_lang``, ``target_lang``,
    ``template`` and optionally ``response_header``. ``synthetic`` needs
    ``direction``.
    """
    if spec in BUILTIN_TEMPLATES:
        return BUILTIN_TEMPLATES[spec]
    if spec == "synthetic":
        if direction is None:
            raise ValueError("the synthetic template needs a direction")
        return synthetic_template(direction)
    if spec.startswith("file:"):
        path = spec.removeprefix("file:")
        data = load_structured_file(path)
        try:
            file_direction = Direction(source=data["source_lang"], target=data["target_lang"])
            if "response_header" in data:
                return PromptTemplate(
                    direction=file_direction,
                    template=data["template"],
                    response_header=data["response_header"],
                )
            return PromptTemplate.from_text(file_direction, data["template"])
        except (KeyError, ValueError) as e:
            raise ConfigFileParseError(path, e) from e
    raise ValueError(f"Unknown template {spec!r}; expected enja, jaen, synthetic or file:PATH")


def render_prompt(pair: ParallelPair, template: PromptTemplate) -> str:
    """Fill the template with the pair's source; the target is not included.

    Raises:
        PromptDirectionError: If the template is for another direction.
    """
    if template.direction != pair.direction:
        raise PromptDirectionError(str(template.direction), str(pair.direction))
    return template.template.replace(PLACEHOLDER, pair.source_text, 1)


@dataclass(frozen=True)
class SftExample:
    """Prompt + target + eos ids with a target-only loss mask."""

    input_ids: np.ndarray
    loss_mask: np.ndarray
    prompt_len: int

    def __post_init__(self) -> None:
        n = self.input_ids.shape[0]
        if self.loss_mask.shape != (n,):
            raise ValueError("loss_mask must match input_ids")
        if not 0 <= self.prompt_len < n:
            raise ValueError("an example needs at least one supervised token")
        if self.loss_mask[: self.prompt_len].any() or not self.loss_mask[self.prompt_len :].all():
            raise ValueError("loss_mask must be false on the prompt and true after it")

    @classmethod
    def from_ids(cls, ids: Sequence[int] | np.ndarray, prompt_len: int) -> SftExample:
        input_ids = np.asarray(ids, dtype=np.int64)
        mask = np.arange(input_ids.shape[0]) >= prompt_len
        return cls(input_ids=input_ids, loss_mask=mask, prompt_len=prompt_len)

    def __len__(self) -> int:
        return int(self.input_ids.shape[0])


def build_sft_example(pair: ParallelPair, template: PromptTemplate, tok: Tokenizer) -> SftExample:
    """Tokenize prompt and target and mark the target (plus eos) as supervised.

    Raises:
        PromptDirectionError: If the template is for another direction.
        EmptyTargetError: If the target encodes to nothing.
        TokenizationError: If the tokenizer fails.
    """
    prompt = render_prompt(pair, template)
    if not pair.target_text:
        raise EmptyTargetError(f"Pair {pair.id} has an empty target", details={"pair_id": pair.id})
    try:
        prompt_ids = tok.encode(prompt)
        target_ids = tok.encode(pair.target_text)
    except Exception as e:
        raise TokenizationError(pair.id, e) from e
    if not target_ids:
        raise EmptyTargetError(f"Pair {pair.id} has an empty target", details={"pair_id": pair.id})
    return SftExample.from_ids(prompt_ids + target_ids + [tok.eos_id], prompt_len=len(prompt_ids))


# =============================================================================
# Loss
# =============================================================================


def token_nll(logits: torch.Tensor, input_ids: torch.Tensor) -> torch.Tensor:
    """Per-position next-token NLL: entry ``i`` is −log P(ids[i+1] | ids[..i]).

    Works on ``(L, V)``/``(L,)`` or batched ``(B, L, V)``/``(B, L)`` inputs and
    returns ``(L-1,)`` or ``(B, L-1)``.
    """
    predictions = logits[..., :-1, :]
    targets = input_ids[..., 1:]
    flat = F.cross_entropy(
        predictions.reshape(-1, predictions.shape[-1]), targets.reshape(-1), reduction="none"
    )
    return flat.reshape(targets.shape)


def batch_masked_nll(
    logits: torch.Tensor,
    input_ids: torch.Tensor,
    loss_mask: torch.Tensor,
    normalization: LossNormalization = "tokens",
) -> torch.Tensor:
    """Masked NLL over a batch, summed, optionally divided by supervised-token count.

    ``loss_mask[b, i]`` selects whether token ``i`` is a supervised target;
    position 0 has no predictor and is ignored.
    """
    nll = token_nll(logits, input_ids)
    mask = loss_mask[..., 1:].to(nll.dtype)
    total = (nll * mask).sum()
    if normalization == "sum":
        return total
    return total / mask.sum().clamp_min(1.0)


def masked_nll(logits: torch.Tensor, example: SftExample) -> torch.Tensor:
    """Summed target-only NLL of one example.

    ``logits`` has one row per input position. The supervised token at
    position ``i`` is scored with the row of position ``i - 1``; rows that
    predict prompt tokens contribute nothing.

    Raises:
        LossShapeError: If ``logits`` does not have one row per position.
    """
    n = len(example)
    if logits.ndim != 2 or logits.shape[0] != n:
        raise LossShapeError(
            "logits must have one row per input position",
            details={"logits": tuple(logits.shape), "positions": n},
        )
    ids = torch.as_tensor(example.input_ids, dtype=torch.long, device=logits.device)
    mask = torch.as_tensor(example.loss_mask, device=logits.device)
    return batch_masked_nll(logits, ids, mask, normalization="sum")


def collate_sft(
    examples: Sequence[SftExample], pad_id: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad a batch; padding is never supervised. Returns ``(ids, mask)``."""
    width = max(len(ex) for ex in examples)
    ids = torch.full((len(examples), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(examples), width), dtype=torch.bool)
    for row, ex in enumerate(examples):
        ids[row, : len(ex)] = torch.as_tensor(ex.input_ids, dtype=torch.long)
        mask[row, : len(ex)] = torch.as_tensor(ex.loss_mask)
    return ids, mask


# =============================================================================
# SFT files
# =============================================================================


def save_examples(examples: Sequence[SftExample], path: str | Path) -> None:
    """Write examples in the SFT file layout (mask is rebuilt from ``prompt_len``)."""
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(_SFT_HEADER.pack(SFT_MAGIC, SFT_VERSION, len(examples)))
            for ex in examples:
                f.write(_SFT_RECORD.pack(len(ex), ex.prompt_len))
                f.write(ex.input_ids.astype("<u4").tobytes())
    except OSError as e:
        raise PackFileError(str(path), str(e)) from e


def load_examples(path: str | Path) -> list[SftExample]:
    """Read an SFT file.

    Raises:
        PackFileError: On a bad header, a truncated record or a prompt length
            that leaves no supervised token.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise PackFileError(str(path), str(e)) from e
    if len(data) < _SFT_HEADER.size:
        raise PackFileError(str(path), "file shorter than header")
    magic, version, count = _SFT_HEADER.unpack_from(data)
    if magic != SFT_MAGIC:
        raise PackFileError(str(path), f"bad magic {magic!r}")
    if version != SFT_VERSION:
        raise PackFileError(str(path), f"unsupported version {version}")

    offset = _SFT_HEADER.size
    examples: list[SftExample] = []
    for index in range(count):
        if offset + _SFT_RECORD.size > len(data):
            raise PackFileError(str(path), f"truncated at example {index}")
        length, prompt_len = _SFT_RECORD.unpack_from(data, offset)
        offset += _SFT_RECORD.size
        end = offset + 4 * length
        if end > len(data):
            raise PackFileError(str(path), f"truncated at example {index}")
        ids = np.frombuffer(data[offset:end], dtype="<u4").astype(np.int64)
        try:
            examples.append(SftExample.from_ids(ids, prompt_len))
        except ValueError as e:
            raise PackFileError(str(path), f"example {index}: {e}") from e
        offset = end
    if offset != len(data):
        raise PackFileError(str(path), "trailing bytes after last example")
    return examples
