"""Tokenization and fixed-window packing of CPT document streams.

Documents are encoded, each followed by eos, and concatenated into one
stream ``z``. Training windows are read from the stream in non-overlapping
steps of ``c`` tokens: window ``k`` has input ``z[kc : kc+c]`` and target
``z[kc+1 : kc+c+1]``. Windows ignore document boundaries, so a window may
start or end in the middle of a sentence. A tail with fewer than ``c + 1``
tokens left is dropped.

Packed file layout (little-endian)::

    magic "BFPK" | version u16 | c u32 | window_count u64
    then per window: input u32[c], target u32[c]
"""

from __future__ import annotations

import struct
import warnings
from abc import ABC, abstractmethod
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import PackFileError, ShortStreamWarning, TokenizationError
from .formats import CptDocument
from .logging_config import get_logger

logger = get_logger(__name__)

PACK_MAGIC = b"BFPK"
PACK_VERSION = 1
_PACK_HEADER = struct.Struct("<4sHIQ")

DEFAULT_CONTEXT = 64
PRODUCTION_CONTEXT = 2048


# =============================================================================
# Tokenizers
# =============================================================================


class Tokenizer(ABC):
    """Text ↔ token-id codec with eos/pad (and optional bos) specials."""

    vocab_size: int
    eos_id: int
    pad_id: int
    bos_id: int | None = None

    @abstractmethod
    def encode(self, text: str) -> list[int]:
        """Encode text without special tokens."""

    @abstractmethod
    def decode(self, ids: Sequence[int]) -> str:
        """Decode ids, skipping special tokens."""

    @property
    def name(self) -> str:
        return type(self).__name__

    @property
    def special_ids(self) -> frozenset[int]:
        ids = {self.eos_id, self.pad_id}
        if self.bos_id is not None:
            ids.add(self.bos_id)
        return frozenset(ids)


class ByteTokenizer(Tokenizer):
    """UTF-8 bytes as ids 0..255; bos=256, eos=257, pad=258."""

    vocab_size = 259
    bos_id = 256
    eos_id = 257
    pad_id = 258

    @property
    def name(self) -> str:
        return "byte"

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        data = bytes(int(i) for i in ids if 0 <= int(i) < 256)
        return data.decode("utf-8", errors="replace")


class VocabTokenizer(Tokenizer):
    """Greedy longest-match over a word-piece list, with byte fallback.

    Ids 0..255 are bytes, 256..258 bos/eos/pad, vocabulary entries follow
    in file order. Any byte sequence not covered by an entry falls back to
    byte ids, so encoding is lossless.
    """

    bos_id = 256
    eos_id = 257
    pad_id = 258

    def __init__(self, pieces: Sequence[str], source: str = "") -> None:
        self._piece_ids: dict[bytes, int] = {}
        self._id_bytes: dict[int, bytes] = {}
        for piece in pieces:
            data = piece.encode("utf-8")
            if len(data) < 2 or data in self._piece_ids:
                continue
            token_id = 259 + len(self._id_bytes)
            self._piece_ids[data] = token_id
            self._id_bytes[token_id] = data
        self._max_len = max((len(p) for p in self._piece_ids), default=1)
        self.vocab_size = 259 + len(self._id_bytes)
        self.source = source

    @classmethod
    def from_file(cls, path: str | Path) -> VocabTokenizer:
        """One piece per line (UTF-8); blank lines and single bytes are ignored."""
        path = Path(path)
        try:
            pieces = path.read_text(encoding="utf-8").split("\n")
        except OSError as e:
            raise TokenizationError(str(path), e) from e
        return cls([p for p in pieces if p], source=str(path))

    @property
    def name(self) -> str:
        return f"vocab:{self.source}"

    def encode(self, text: str) -> list[int]:
        data = text.encode("utf-8")
        ids: list[int] = []
        pos = 0
        while pos < len(data):
            for length in range(min(self._max_len, len(data) - pos), 1, -1):
                token_id = self._piece_ids.get(data[pos : pos + length])
                if token_id is not None:
                    ids.append(token_id)
                    pos += length
                    break
            else:
                ids.append(data[pos])
                pos += 1
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        chunks = []
        for i in ids:
            i = int(i)
            if i < 256:
                chunks.append(bytes((i,)))
            elif i in self._id_bytes:
                chunks.append(self._id_bytes[i])
        return b"".join(chunks).decode("utf-8", errors="replace")


def byte_tokenizer() -> ByteTokenizer:
    """Return the bundled lossless byte-level tokenizer (vocab 259)."""
    return ByteTokenizer()


def load_tokenizer(spec: str) -> Tokenizer:
    """Resolve ``"byte"`` or ``"vocab:PATH"``."""
    if spec == "byte":
        return byte_tokenizer()
    if spec.startswith("vocab:"):
        return VocabTokenizer.from_file(spec.removeprefix("vocab:"))
    raise ValueError(f"Unknown tokenizer {spec!r}; expected 'byte' or 'vocab:PATH'")


# =============================================================================
# Streams and windows
# =============================================================================


@dataclass(frozen=True)
class TokenStream:
    """Concatenated token ids; ``boundaries`` are the end offsets of documents."""

    ids: np.ndarray
    boundaries: tuple[int, ...]

    def __post_init__(self) -> None:
        if any(b <= a for a, b in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("boundaries must be strictly increasing")
        if self.boundaries and self.boundaries[-1] != len(self.ids):
            raise ValueError("last boundary must equal the stream length")

    def __len__(self) -> int:
        return int(self.ids.shape[0])


@dataclass(frozen=True)
class PackedWindow:
    """One next-token example: ``target_ids`` is ``input_ids`` shifted by one."""

    input_ids: np.ndarray
    target_ids: np.ndarray

    def __post_init__(self) -> None:
        if self.input_ids.shape != self.target_ids.shape or self.input_ids.ndim != 1:
            raise ValueError("input_ids and target_ids must be 1-D of equal length")

    @property
    def context(self) -> int:
        return int(self.input_ids.shape[0])


def encode_stream(
    docs: Sequence[CptDocument], tok: Tokenizer, workers: int = 1
) -> TokenStream:
    """Encode documents in order, appending eos after each.

    Raises:
        ValueError: If ``docs`` is empty.
        TokenizationError: Naming the origin of a document that failed.
    """
    if not docs:
        raise ValueError("encode_stream needs at least one document")

    def encode_one(doc: CptDocument) -> list[int]:
        try:
            return tok.encode(doc.text)
        except Exception as e:
            raise TokenizationError(doc.origin_id, e) from e

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            encoded = list(pool.map(encode_one, docs))
    else:
        encoded = [encode_one(doc) for doc in docs]

    ids: list[int] = []
    boundaries: list[int] = []
    for doc_ids in encoded:
        ids.extend(doc_ids)
        ids.append(tok.eos_id)
        boundaries.append(len(ids))

    return TokenStream(ids=np.asarray(ids, dtype=np.int64), boundaries=tuple(boundaries))


def window_count(stream_length: int, context: int) -> int:
    """Number of windows ``pack_windows`` yields: ⌊(m − 1) / c⌋ for m ≥ 1."""
    return max(0, (stream_length - 1) // context)


def pack_windows(stream: TokenStream, c: int) -> list[PackedWindow]:
    """Slice non-overlapping ``c``-token windows with one-token-shifted targets.

    A stream shorter than ``c + 1`` yields no window and issues a
    :class:`ShortStreamWarning`.

    Raises:
        ValueError: If ``c < 2``.
    """
    if c < 2:
        raise ValueError(f"context must be >= 2, got {c}")

    ids = stream.ids
    count = window_count(len(stream), c)
    if count == 0:
        message = f"stream of {len(stream)} tokens is too short for one window of {c}"
        logger.warning("Stream too short to pack", extra={"tokens": len(stream), "context": c})
        warnings.warn(message, ShortStreamWarning, stacklevel=2)
        return []

    windows = [
        PackedWindow(
            input_ids=ids[k * c : k * c + c].copy(),
            target_ids=ids[k * c + 1 : k * c + c + 1].copy(),
        )
        for k in range(count)
    ]
    logger.info(
        "Packed windows",
        extra={"windows": count, "context": c, "unused_tokens": len(stream) - count * c},
    )
    return windows


@dataclass(frozen=True)
class PackReport:
    """Summary of one packing run."""

    documents: int
    tokens: int
    context: int
    windows: int
    dropped_tail_tokens: int

    def to_dict(self) -> dict[str, int]:
        return {
            "documents": self.documents,
            "tokens": self.tokens,
            "context": self.context,
            "windows": self.windows,
            "dropped_tail_tokens": self.dropped_tail_tokens,
        }


def pack_report(stream: TokenStream, c: int) -> PackReport:
    """Describe what ``pack_windows(stream, c)`` keeps and drops."""
    count = window_count(len(stream), c)
    return PackReport(
        documents=len(stream.boundaries),
        tokens=len(stream),
        context=c,
        windows=count,
        dropped_tail_tokens=len(stream) - count * c,
    )


def windows_to_arrays(windows: Sequence[PackedWindow]) -> tuple[np.ndarray, np.ndarray]:
    """Stack windows into ``(N, c)`` input and target arrays."""
    if not windows:
        return np.zeros((0, 0), dtype=np.int64), np.zeros((0, 0), dtype=np.int64)
    inputs = np.stack([w.input_ids for w in windows]).astype(np.int64)
    targets = np.stack([w.target_ids for w in windows]).astype(np.int64)
    return inputs, targets


# =============================================================================
# Packed files
# =============================================================================


def save_windows(windows: Sequence[PackedWindow], c: int, path: str | Path) -> None:
    """Write windows in the packed-file layout."""
    path = Path(path)
    inputs, targets = windows_to_arrays(windows)
    if windows and inputs.shape[1] != c:
        raise PackFileError(str(path), f"windows have context {inputs.shape[1]}, header says {c}")
    body = np.stack([inputs, targets], axis=1).astype("<u4") if windows else np.zeros(0, "<u4")
    try:
        with open(path, "wb") as f:
            f.write(_PACK_HEADER.pack(PACK_MAGIC, PACK_VERSION, c, len(windows)))
            f.write(body.tobytes())
    except OSError as e:
        raise PackFileError(str(path), str(e)) from e


def load_windows(path: str | Path) -> tuple[int, list[PackedWindow]]:
    """Read a packed file; returns ``(c, windows)``.

    Raises:
        PackFileError: On a bad magic/version or truncated body.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise PackFileError(str(path), str(e)) from e
    if len(data) < _PACK_HEADER.size:
        raise PackFileError(str(path), "file shorter than header")

    magic, version, c, count = _PACK_HEADER.unpack_from(data)
    if magic != PACK_MAGIC:
        raise PackFileError(str(path), f"bad magic {magic!r}")
    if version != PACK_VERSION:
        raise PackFileError(str(path), f"unsupported version {version}")

    expected = count * 2 * c * 4
    body = data[_PACK_HEADER.size :]
    if len(body) != expected:
        raise PackFileError(str(path), f"body has {len(body)} bytes, expected {expected}")

    arrays = np.frombuffer(body, dtype="<u4").astype(np.int64).reshape(count, 2, c)
    return c, [PackedWindow(input_ids=a[0], target_ids=a[1]) for a in arrays]
