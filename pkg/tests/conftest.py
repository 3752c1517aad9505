"""Pytest configuration and shared fixtures.

This module provides common fixtures used across all test modules.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import pytest
import torch

from parallel_cpt.corpus import Corpus, Direction, ParallelPair
from parallel_cpt.model import ModelConfig
from parallel_cpt.packing import ByteTokenizer

EN_JA = Direction(source="en", target="ja")
JA_EN = EN_JA.reversed()

# Sample aligned sentences for testing
SAMPLE_PAIRS: list[tuple[str, str]] = [
    ("Good morning", "おはよう"),
    ("Thank you very much", "どうもありがとう"),
    ("Where is the station?", "駅はどこですか？"),
    ("I like green tea", "緑茶が好きです"),
    ("See you tomorrow", "また明日"),
    ("The weather is nice today", "今日は天気がいいです"),
]


def make_corpus(
    pairs: list[tuple[str, str]] | None = None,
    direction: Direction = EN_JA,
    similarities: list[float] | None = None,
) -> Corpus:
    """Build a corpus from (source, target) tuples with ids 0..N-1."""
    pairs = SAMPLE_PAIRS if pairs is None else pairs
    items = [
        ParallelPair(
            id=i,
            source_text=src,
            target_text=tgt,
            direction=direction,
            similarity=None if similarities is None else similarities[i],
        )
        for i, (src, tgt) in enumerate(pairs)
    ]
    return Corpus(pairs=tuple(items), provenance="test")


@pytest.fixture
def en_ja() -> Direction:
    """English to Japanese direction."""
    return EN_JA


@pytest.fixture
def corpus_ab() -> Corpus:
    """Six en-ja pairs without similarity scores."""
    return make_corpus()


@pytest.fixture
def corpus_ba() -> Corpus:
    """The same six pairs in the ja-en direction."""
    return make_corpus([(tgt, src) for src, tgt in SAMPLE_PAIRS], JA_EN)


@pytest.fixture
def pair_file(tmp_path: Path) -> Path:
    """Write sample pairs as a pair file.

    Args:
        tmp_path: Pytest temporary path fixture.

    Returns:
        Path to the pair file.
    """
    path = tmp_path / "pairs.jsonl"
    lines = [
        json.dumps({"id": i, "src": s, "tgt": t, "src_lang": "en", "tgt_lang": "ja"}, ensure_ascii=False)
        for i, (s, t) in enumerate(SAMPLE_PAIRS)
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def byte_tok() -> ByteTokenizer:
    """The bundled byte tokenizer."""
    return ByteTokenizer()


@pytest.fixture
def tiny_config() -> ModelConfig:
    """A model small enough for float64 gradient checks."""
    return ModelConfig(
        vocab_size=8, context_len=6, embed_dim=8, n_layers=1, n_heads=2, ffn_dim=16, seed=0
    )


@pytest.fixture
def small_config() -> ModelConfig:
    """A byte-vocabulary model for short training runs."""
    return ModelConfig(
        vocab_size=259, context_len=48, embed_dim=32, n_layers=1, n_heads=2, ffn_dim=64, seed=0
    )


@pytest.fixture(autouse=True)
def clean_env(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    """Run every test without PCPT_* variables and outside any .env directory.

    Args:
        monkeypatch: Pytest monkeypatch fixture.
        tmp_path: Pytest temporary path fixture.
    """
    for name in (
        "PCPT_LOG_LEVEL",
        "PCPT_LOG_JSON",
        "PCPT_LOG_FILE",
        "PCPT_WORKERS",
        "PCPT_TORCH_THREADS",
        "PCPT_ARTIFACTS_DIR",
        "PCPT_SEED",
    ):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def fixed_seed() -> Any:
    """Seed torch's global generator for tests that draw random tensors."""
    torch.manual_seed(1234)
    return 1234


TINY_VOCAB = ["ka", "mo", "ri", "su", "te", "no", "ha", "yu"]


def tiny_spec_data(**overrides: Any) -> dict[str, Any]:
    """Experiment spec fields for a two-cell matrix that runs in seconds."""
    data: dict[str, Any] = {
        "name": "tiny",
        "task": {
            "n_train": 24,
            "n_val": 6,
            "n_test": 4,
            "n_sft": 8,
            "sentence_len_range": [2, 3],
            "vocab": TINY_VOCAB,
        },
        "seeds": [0],
        "model": {"context_len": 128, "embed_dim": 16, "n_layers": 1, "n_heads": 2, "ffn_dim": 32},
        "pack_context": 32,
        "cpt_train": {"preset": "desk_cpt", "epochs": 0},
        "sft_full": {"preset": "desk_sft_full", "epochs": 0},
        "sft_lora": {"preset": "desk_sft_lora", "epochs": 0},
        "decode": {"max_new": 6, "shots": 1},
        "evaluation": {"n_resamples": 100, "baseline": "base"},
        "cells": [
            {"name": "base", "sft": "none"},
            {"name": "tagged", "cpt": [{"ordering": "mix", "marker": "tagged"}], "sft": "lora"},
        ],
    }
    data.update(overrides)
    return data
