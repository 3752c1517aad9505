"""parallel-cpt - parallel-corpus continual pre-training for translation LMs.

This package builds and evaluates two-phase training pipelines for
decoder-only translation models: continual pre-training on formatted
parallel text, then supervised fine-tuning (full or LoRA) on
prompt-masked instruction examples. A seeded synthetic task family with
exact ground truth lets a whole experiment matrix run on a CPU.

Features:
    - Similarity-band bitext filtering with pluggable embedding providers
    - Interleaved, prefixed, tagged and JSON-wrapped pre-training formats
    - Document packing into fixed context windows
    - Prompt-masked SFT examples and LoRA adapters
    - Corpus BLEU with paired-bootstrap significance
    - Resumable, parallel experiment matrices

Example:
    Using as a CLI tool::

        $ parallel-cpt synth --task cipher_plus_reversal --seed 0 --out-dir data/
        $ parallel-cpt experiment --spec experiments/desk_replication.yaml --out runs/desk

    Using as a library::

        from parallel_cpt.experiment import run_experiment_matrix

        matrix = run_experiment_matrix("experiments/desk_replication.yaml", "runs/desk")
        print(matrix.render_text())

Attributes:
    __version__: Package version following semantic versioning.
"""

from __future__ import annotations

import importlib
from typing import TYPE_CHECKING, Any

__version__ = "0.1.0"
__all__ = [
    "__version__",
    "Config",
    "load_config",
    "Corpus",
    "ParallelPair",
    "Direction",
    "ExperimentSpec",
    "run_experiment_matrix",
]

_LAZY = {
    "Config": "config",
    "load_config": "config",
    "Corpus": "corpus",
    "ParallelPair": "corpus",
    "Direction": "corpus",
    "ExperimentSpec": "experiment",
    "run_experiment_matrix": "experiment",
}

if TYPE_CHECKING:
    from .config import Config, load_config
    from .corpus import Corpus, Direction, ParallelPair
    from .experiment import ExperimentSpec, run_experiment_matrix


def __getattr__(name: str) -> Any:
    # torch is only imported when something that needs it is touched
    if name in _LAZY:
        return getattr(importlib.import_module(f".{_LAZY[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
