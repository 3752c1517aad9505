"""Experiment matrix runner for synthetic-task replications.

An experiment spec (JSON or YAML) names a synthetic task, the model, the
training presets, the seeds and a list of cells. Each cell describes one
pipeline: zero or more CPT stages (ordering, marker, data fraction, replay),
an optional SFT phase, and zero- or few-shot decoding of the test split in
each direction. Every (cell, seed) unit runs the whole pipeline::

    synth -> build CPT docs -> pack -> train CPT stages -> SFT -> decode -> BLEU

Units live in content-addressed directories (``<cell>-<hash>/seed-<n>``)
keyed by everything that influences their result; a unit whose
``result.json`` exists is loaded instead of recomputed. A failing unit is
recorded in the matrix and never stops its siblings.

Outputs: ``matrix.json`` (per-cell records) and ``matrix.txt`` (aligned
table with per-seed scores, means and "# Sig." counts).
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Literal

import numpy as np
import torch
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .config import load_structured_file
from .corpus import Corpus, Direction, ParallelPair
from .evaluation import PreTokenizer, Smoothing, corpus_bleu, get_significance_test
from .exceptions import CellFailedError, ConfigurationError
from .formats import (
    CptDocument,
    FormatSpec,
    MarkerKind,
    MixOrdering,
    MonoOrdering,
    OrderingScheme,
    SingleDirectionOrdering,
    build_cpt_corpus,
    build_marker,
    replay_mix,
    save_documents,
)
from .logging_config import LoggerAdapter, get_logger, log_duration
from .model import CausalLM, Checkpoint, ModelConfig, merge_adapters, save_checkpoint
from .packing import Tokenizer, byte_tokenizer, encode_stream, load_tokenizer, pack_windows
from .sft import build_sft_example, synthetic_template
from .synthetic import SyntheticSplits, SyntheticTaskSpec, generate, invert_direction, task_tokenizer
from .training import TrainConfig, few_shot_prompt, train_phase, translate_pairs

logger = get_logger(__name__)

DirectionKey = Literal["ab", "ba"]
RESULT_FILE = "result.json"


def _train_config(value: Any) -> Any:
    """Expand ``{"preset": name, **overrides}`` into a TrainConfig."""
    if isinstance(value, dict) and "preset" in value:
        overrides = {k: v for k, v in value.items() if k != "preset"}
        return TrainConfig.preset(value["preset"], **overrides)
    return value


class CptStage(BaseModel):
    """One continual pre-training pass over formatted parallel data."""

    ordering: Literal["mono", "ab", "ba", "mix"]
    marker: MarkerKind = "interleaved"
    data_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    replay_fraction: float = Field(default=0.0, ge=0.0, lt=1.0)
    mix_fraction: float = Field(default=0.5, gt=0.0, le=1.0)

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def _mono_is_unmarked(self) -> CptStage:
        if self.ordering == "mono" and self.marker != "interleaved":
            raise ValueError("mono ordering takes no marker")
        return self

    def label(self) -> str:
        text = self.ordering if self.ordering == "mono" else f"{self.ordering}/{self.marker}"
        if self.data_fraction < 1.0:
            text += f"@{self.data_fraction:g}"
        if self.replay_fraction:
            text += f"+replay{self.replay_fraction:g}"
        return text


class CellSpec(BaseModel):
    """One row of the matrix."""

    name: str = Field(pattern=r"^[A-Za-z0-9_.-]+$")
    cpt: tuple[CptStage, ...] = ()
    sft: Literal["none", "full", "lora"] = "lora"
    sft_data: Literal["sft", "train"] = "sft"
    sft_train: TrainConfig | None = None
    shots: int | None = Field(default=None, ge=0)
    directions: tuple[DirectionKey, ...] = ("ab", "ba")

    model_config = {"frozen": True}

    @field_validator("sft_train", mode="before")
    @classmethod
    def _expand_preset(cls, v: Any) -> Any:
        return _train_config(v)

    def label(self) -> str:
        cpt = " > ".join(stage.label() for stage in self.cpt) or "-"
        return f"{cpt} | sft={self.sft}"


class DecodeSettings(BaseModel):
    max_new: int = Field(default=64, ge=1)
    shots: int = Field(default=5, ge=0)


class EvaluationSettings(BaseModel):
    tokenizer: PreTokenizer = "whitespace"
    smoothing: Smoothing = "none"
    test: str = "paired_bootstrap"
    n_resamples: int = Field(default=1000, ge=100)
    alpha: float = Field(default=0.05, gt=0.0, lt=1.0)
    baseline: str | None = None


class ExperimentSpec(BaseModel):
    """Declarative description of an experiment matrix."""

    name: str = "experiment"
    task: SyntheticTaskSpec = Field(default_factory=SyntheticTaskSpec)
    seeds: tuple[int, ...] = (0,)
    tokenizer: str = "byte"
    model: ModelConfig = Field(default_factory=ModelConfig)
    pack_context: int = Field(default=128, ge=2)
    cpt_train: TrainConfig = Field(default_factory=lambda: TrainConfig.preset("desk_cpt"))
    sft_full: TrainConfig = Field(default_factory=lambda: TrainConfig.preset("desk_sft_full"))
    sft_lora: TrainConfig = Field(default_factory=lambda: TrainConfig.preset("desk_sft_lora"))
    decode: DecodeSettings = Field(default_factory=DecodeSettings)
    evaluation: EvaluationSettings = Field(default_factory=EvaluationSettings)
    cells: tuple[CellSpec, ...] = Field(min_length=1)

    @field_validator("cpt_train", "sft_full", "sft_lora", mode="before")
    @classmethod
    def _expand_presets(cls, v: Any) -> Any:
        return _train_config(v)

    @field_validator("tokenizer")
    @classmethod
    def _known_tokenizer(cls, v: str) -> str:
        if v not in ("byte", "task") and not v.startswith("vocab:"):
            raise ValueError(f"tokenizer must be 'byte', 'task' or 'vocab:PATH', got {v!r}")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> ExperimentSpec:
        if not self.seeds:
            raise ValueError("at least one seed is required")
        names = [cell.name for cell in self.cells]
        if len(set(names)) != len(names):
            raise ValueError("cell names must be unique")
        if self.evaluation.baseline is not None and self.evaluation.baseline not in names:
            raise ValueError(f"baseline cell {self.evaluation.baseline!r} is not defined")
        if self.pack_context > self.model.context_len:
            raise ValueError("pack_context cannot exceed the model context length")
        if self.cpt_train.phase != "cpt" or self.sft_full.phase != "sft" or self.sft_lora.phase != "sft":
            raise ValueError("cpt_train must be a cpt phase and sft_* must be sft phases")
        for cell in self.cells:
            need = self.decode_tokens_needed(cell)
            if need > self.model.context_len:
                raise ValueError(
                    f"cell {cell.name!r}: a {self.shots_for(cell)}-shot prompt plus its target needs "
                    f"{need} tokens but the model context is {self.model.context_len}"
                )
        return self

    def cell(self, name: str) -> CellSpec:
        return next(cell for cell in self.cells if cell.name == name)

    def shots_for(self, cell: CellSpec) -> int:
        """Few-shot examples at decoding: the cell's own, else 0 after SFT and ``decode.shots`` without."""
        if cell.shots is not None:
            return cell.shots
        return 0 if cell.sft != "none" else self.decode.shots

    def decode_tokens_needed(self, cell: CellSpec) -> int:
        """Tokens for the longest possible prompt of ``cell``, its target and eos.

        Sentences of the longest word at the maximum length bound every
        prompt. ``vocab:`` tokenizers are bounded by their byte count.
        """
        shots = self.shots_for(cell)
        need = 0
        for seed in self.seeds:
            task = self.task.model_copy(update={"seed": seed})
            tok = task_tokenizer(task) if self.tokenizer == "task" else byte_tokenizer()
            longest = max(task.words, key=lambda word: len(word.encode("utf-8")))
            sentence = " ".join([longest] * task.sentence_len_range[1])
            for key in cell.directions:
                direction = task.direction if key == "ab" else task.direction.reversed()
                pair = ParallelPair(id=0, source_text=sentence, target_text=sentence, direction=direction)
                prompt = few_shot_prompt([pair] * shots, pair, synthetic_template(direction))
                need = max(need, len(tok.encode(prompt)) + len(tok.encode(sentence)) + 1)
        return need


def build_tokenizer(name: str, task: SyntheticTaskSpec) -> Tokenizer:
    """Resolve an experiment tokenizer; ``"task"`` is built from the seeded task."""
    if name == "task":
        return task_tokenizer(task)
    return load_tokenizer(name)


def load_experiment_spec(path: str | Path) -> ExperimentSpec:
    """Load and validate an experiment spec file.

    Raises:
        ConfigFileError: If the file cannot be read or parsed.
        ConfigurationError: If the experiment spec is invalid.
    """
    data = load_structured_file(path)
    try:
        return ExperimentSpec(**data)
    except ValidationError as e:
        raise ConfigurationError(
            f"Invalid experiment spec: {path}",
            details={"errors": [f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors()]},
        ) from e


# =============================================================================
# Matrix records
# =============================================================================


class UnitResult(BaseModel):
    """Outcome of one (cell, seed) pipeline run.

    ``directory`` is relative to the experiment output root.
    """

    cell: str
    seed: int
    status: Literal["ok", "failed"]
    bleu: dict[str, float] = {}
    reports: dict[str, dict[str, Any]] = {}
    error: dict[str, Any] | None = None
    directory: str = ""


class CellResult(BaseModel):
    name: str
    label: str
    status: Literal["ok", "partial", "failed"]
    per_seed: dict[str, dict[str, float | None]]
    mean: dict[str, float | None]
    significant: dict[str, int | None] = {}
    errors: list[str] = []


class ExperimentMatrix(BaseModel):
    """Every configured cell, filled with scores or marked failed."""

    name: str
    seeds: list[int]
    directions: dict[str, str]
    baseline: str | None = None
    alpha: float = 0.05
    cells: list[CellResult]

    def render_text(self) -> str:
        """Aligned text table: one row per cell, a column group per direction."""
        keys = list(self.directions)
        header = ["Cell", "Pipeline", "Status"]
        for key in keys:
            header += [f"{self.directions[key]} BLEU", "per seed", "# Sig."]
        rows = [header]
        for cell in self.cells:
            row = [cell.name, cell.label, cell.status]
            for key in keys:
                mean = cell.mean.get(key)
                seeds = [cell.per_seed.get(str(s), {}).get(key) for s in self.seeds]
                sig = cell.significant.get(key)
                row += [
                    "-" if mean is None else f"{mean:.2f}",
                    " ".join("x" if v is None else f"{v:.1f}" for v in seeds),
                    "-" if sig is None else str(sig),
                ]
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(value.ljust(width) for value, width in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        if self.baseline:
            lines.append("")
            lines.append(
                f"# Sig.: seeds significantly better than {self.baseline} (p < {self.alpha:g})"
            )
        return "\n".join(lines) + "\n"


# =============================================================================
# Unit pipeline
# =============================================================================


def unit_key(spec: ExperimentSpec, cell: CellSpec, seed: int) -> str:
    """Hash of everything that determines a unit's result."""
    payload = {
        "task": spec.task.model_dump(mode="json"),
        "tokenizer": spec.tokenizer,
        "model": spec.model.model_dump(mode="json"),
        "pack_context": spec.pack_context,
        "cpt_train": spec.cpt_train.model_dump(mode="json") if cell.cpt else None,
        "sft_train": _sft_config(spec, cell).model_dump(mode="json") if cell.sft != "none" else None,
        "decode": spec.decode.model_dump(mode="json"),
        "evaluation": {
            "tokenizer": spec.evaluation.tokenizer,
            "smoothing": spec.evaluation.smoothing,
        },
        "cell": cell.model_dump(mode="json", exclude={"name", "sft_train"}),
        "seed": seed,
    }
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()
    return digest[:12]


def unit_path(spec: ExperimentSpec, cell: CellSpec, seed: int) -> Path:
    """Unit directory relative to the output root."""
    return Path(f"{cell.name}-{unit_key(spec, cell, seed)}") / f"seed-{seed}"


def _sft_config(spec: ExperimentSpec, cell: CellSpec) -> TrainConfig:
    if cell.sft_train is not None:
        return cell.sft_train
    return spec.sft_full if cell.sft == "full" else spec.sft_lora


def _ordering(stage: CptStage, direction: Direction, seed: int) -> OrderingScheme:
    if stage.ordering == "mono":
        return MonoOrdering()
    if stage.ordering == "mix":
        return MixOrdering(fraction_per_direction=stage.mix_fraction, seed=seed)
    chosen = direction if stage.ordering == "ab" else direction.reversed()
    return SingleDirectionOrdering(direction=chosen)


def _stage_documents(
    stage: CptStage, train: Corpus, val: Corpus, direction: Direction, seed: int
) -> tuple[list[CptDocument], list[CptDocument]]:
    fmt = FormatSpec(
        ordering=_ordering(stage, direction, seed),
        marker=build_marker(stage.marker, [direction, direction.reversed()]),
    )
    subset = train.subset(stage.data_fraction)
    docs = build_cpt_corpus(subset, invert_direction(subset), fmt)
    val_docs = build_cpt_corpus(val, invert_direction(val), fmt)
    return docs, val_docs


def _write_json(path: Path, data: Any) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, ensure_ascii=False, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)


def _write_lines(path: Path, lines: list[str]) -> None:
    path.write_text("".join(line.replace("\n", " ") + "\n" for line in lines), encoding="utf-8")


def execute_unit(spec: ExperimentSpec, cell: CellSpec, seed: int, directory: Path) -> UnitResult:
    """Run one cell for one seed and write its artifacts under ``directory``."""
    log = LoggerAdapter(logger, {"cell": cell.name, "seed": seed})
    directory.mkdir(parents=True, exist_ok=True)

    task = spec.task.model_copy(update={"seed": seed})
    tok = build_tokenizer(spec.tokenizer, task)
    splits: SyntheticSplits = generate(task)
    direction = task.direction
    model = CausalLM(spec.model.model_copy(update={"vocab_size": tok.vocab_size, "seed": seed}))

    best: Checkpoint | None = None
    previous: list[CptDocument] | None = None
    for index, stage in enumerate(cell.cpt):
        with log_duration(log, "CPT stage finished", stage=index, label=stage.label()) as info:
            docs, val_docs = _stage_documents(stage, splits.train, splits.val, direction, seed)
            primary = docs
            if stage.replay_fraction and previous:
                docs = replay_mix(docs, previous, stage.replay_fraction, seed)
            save_documents(docs, directory / f"cpt-{index}.docs.jsonl")
            windows = pack_windows(encode_stream(docs, tok), spec.pack_context)
            val_windows = pack_windows(encode_stream(val_docs, tok), spec.pack_context)
            cfg = spec.cpt_train.model_copy(update={"seed": seed})
            best = train_phase(model, windows, val_windows, cfg, pad_id=tok.pad_id)
            model = best.build_model()
            info.update(windows=len(windows), best_step=best.step, val_loss=best.validation_loss)
            previous = primary

    if cell.sft != "none":
        with log_duration(log, "SFT finished", mode=cell.sft) as info:
            source = splits.sft if cell.sft_data == "sft" and len(splits.sft) else splits.train
            examples, val_examples = [], []
            for corpus, target in ((source, examples), (splits.val, val_examples)):
                for pairs in (corpus, invert_direction(corpus)):
                    template = synthetic_template(pairs[0].direction)
                    target.extend(build_sft_example(p, template, tok) for p in pairs)
            cfg = _sft_config(spec, cell).model_copy(update={"seed": seed})
            best = train_phase(model, examples, val_examples, cfg, pad_id=tok.pad_id)
            model = merge_adapters(best.build_model())
            info.update(examples=len(examples), best_step=best.step, val_loss=best.validation_loss)

    if best is not None:
        save_checkpoint(
            Checkpoint.capture(model, best.step, best.validation_loss, cell=cell.name, seed=seed),
            directory / "model.bfck",
        )

    shots = spec.shots_for(cell)
    bleu: dict[str, float] = {}
    reports: dict[str, dict[str, Any]] = {}
    for key in cell.directions:
        test = splits.test if key == "ab" else invert_direction(splits.test)
        shot_pool = splits.val if key == "ab" else invert_direction(splits.val)
        shot_pairs = list(shot_pool.pairs[:shots])
        template = synthetic_template(test[0].direction)
        hyps = translate_pairs(model, tok, list(test), template, shot_pairs, spec.decode.max_new)
        refs = [pair.target_text for pair in test]
        _write_lines(directory / f"{key}.hyp.txt", hyps)
        _write_lines(directory / f"{key}.ref.txt", refs)
        report = corpus_bleu(hyps, refs, spec.evaluation.tokenizer, spec.evaluation.smoothing)
        bleu[key] = report.score
        reports[key] = report.model_dump(mode="json")
        log.info("Decoded test split", extra={"direction": key, "bleu": round(report.score, 2)})

    return UnitResult(
        cell=cell.name,
        seed=seed,
        status="ok",
        bleu=bleu,
        reports=reports,
    )


def _run_unit(args: tuple[ExperimentSpec, CellSpec, int, str, str, int]) -> dict[str, Any]:
    """Process-pool entry point; never raises.

    ``args`` carries the output root and the unit directory relative to it.
    """
    spec, cell, seed, out_dir, relative, torch_threads = args
    if torch_threads:
        torch.set_num_threads(torch_threads)
    path = Path(out_dir) / relative
    try:
        with log_duration(logger, "Unit finished", cell=cell.name, seed=seed):
            result = execute_unit(spec, cell, seed, path)
    except Exception as e:
        error = CellFailedError(f"{cell.name}/seed-{seed}", e)
        logger.error(
            "Cell failed",
            extra={"cell": cell.name, "seed": seed, "error": str(e)},
            exc_info=True,
        )
        result = UnitResult(
            cell=cell.name, seed=seed, status="failed", error=error.to_dict(), directory=relative
        )
    else:
        result = result.model_copy(update={"directory": relative})
        _write_json(path / RESULT_FILE, result.model_dump(mode="json"))
    return result.model_dump(mode="json")


def _cached(directory: Path) -> UnitResult | None:
    path = directory / RESULT_FILE
    if not path.is_file():
        return None
    try:
        result = UnitResult(**json.loads(path.read_text(encoding="utf-8")))
    except (OSError, ValueError, ValidationError):
        logger.warning("Ignoring unreadable result", extra={"path": str(path)})
        return None
    return result if result.status == "ok" else None


# =============================================================================
# Matrix
# =============================================================================


def _read_lines(path: Path) -> list[str]:
    return path.read_text(encoding="utf-8").split("\n")[:-1]


def _significance_counts(
    spec: ExperimentSpec, cell: CellSpec, units: dict[tuple[str, int], UnitResult], out_dir: Path
) -> dict[str, int | None]:
    settings = spec.evaluation
    if settings.baseline is None or cell.name == settings.baseline:
        return {}
    test = get_significance_test(settings.test)
    counts: dict[str, int | None] = {}
    for key in cell.directions:
        hits, compared = 0, 0
        for seed in spec.seeds:
            mine, base = units.get((cell.name, seed)), units.get((settings.baseline, seed))
            if not mine or not base or mine.status != "ok" or base.status != "ok":
                continue
            mine_dir, base_hyp = out_dir / mine.directory, out_dir / base.directory / f"{key}.hyp.txt"
            if not base_hyp.is_file():
                continue
            result = test(
                _read_lines(mine_dir / f"{key}.hyp.txt"),
                _read_lines(base_hyp),
                _read_lines(mine_dir / f"{key}.ref.txt"),
                n_resamples=settings.n_resamples,
                seed=seed,
                tokenizer=settings.tokenizer,
                smoothing=settings.smoothing,
            )
            compared += 1
            hits += result.significant(settings.alpha)
        counts[key] = hits if compared else None
    return counts


def _cell_result(
    spec: ExperimentSpec, cell: CellSpec, units: dict[tuple[str, int], UnitResult], out_dir: Path
) -> CellResult:
    per_seed: dict[str, dict[str, float | None]] = {}
    errors: list[str] = []
    ok = 0
    for seed in spec.seeds:
        unit = units[(cell.name, seed)]
        if unit.status == "ok":
            ok += 1
            per_seed[str(seed)] = {key: unit.bleu.get(key) for key in cell.directions}
        else:
            per_seed[str(seed)] = {key: None for key in cell.directions}
            errors.append((unit.error or {}).get("message", "failed"))
    mean: dict[str, float | None] = {}
    for key in cell.directions:
        scores = [s[key] for s in per_seed.values() if s.get(key) is not None]
        mean[key] = float(np.mean(scores)) if scores else None
    status = "ok" if ok == len(spec.seeds) else ("failed" if ok == 0 else "partial")
    return CellResult(
        name=cell.name,
        label=cell.label(),
        status=status,
        per_seed=per_seed,
        mean=mean,
        significant=_significance_counts(spec, cell, units, out_dir),
        errors=errors,
    )


def run_experiment_matrix(
    spec: ExperimentSpec | str | Path,
    out_dir: str | Path,
    workers: int = 1,
    torch_threads: int = 0,
) -> ExperimentMatrix:
    """Run (or resume) every cell for every seed and write the matrix files.

    Args:
        spec: A spec or the path of a spec file.
        out_dir: Root of the unit directories and matrix outputs.
        workers: Units run in this many processes (1 runs them in-process).
        torch_threads: Per-process torch thread count (0 keeps the default).
    """
    if not isinstance(spec, ExperimentSpec):
        spec = load_experiment_spec(spec)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "spec.json", spec.model_dump(mode="json"))

    units: dict[tuple[str, int], UnitResult] = {}
    pending = []
    for cell in spec.cells:
        for seed in spec.seeds:
            relative = unit_path(spec, cell, seed)
            cached = _cached(out_dir / relative)
            if cached is not None:
                cached = cached.model_copy(update={"directory": relative.as_posix()})
                units[(cell.name, seed)] = cached
            else:
                pending.append((spec, cell, seed, str(out_dir), relative.as_posix(), torch_threads))

    logger.info(
        "Experiment started",
        extra={"experiment": spec.name, "units": len(units) + len(pending), "cached": len(units)},
    )

    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(args, pool.submit(_run_unit, args)) for args in pending]
            for args, future in futures:
                try:
                    record = future.result()
                except Exception as e:
                    error = CellFailedError(f"{args[1].name}/seed-{args[2]}", e)
                    record = UnitResult(
                        cell=args[1].name,
                        seed=args[2],
                        status="failed",
                        error=error.to_dict(),
                        directory=args[4],
                    ).model_dump(mode="json")
                result = UnitResult(**record)
                units[(result.cell, result.seed)] = result
    else:
        for args in pending:
            result = UnitResult(**_run_unit(args))
            units[(result.cell, result.seed)] = result

    direction = spec.task.direction
    matrix = ExperimentMatrix(
        name=spec.name,
        seeds=list(spec.seeds),
        directions={"ab": str(direction), "ba": str(direction.reversed())},
        baseline=spec.evaluation.baseline,
        alpha=spec.evaluation.alpha,
        cells=[_cell_result(spec, cell, units, out_dir) for cell in spec.cells],
    )
    _write_json(out_dir / "matrix.json", matrix.model_dump(mode="json"))
    (out_dir / "matrix.txt").write_text(matrix.render_text(), encoding="utf-8")
    failed = sum(1 for cell in matrix.cells if cell.status != "ok")
    logger.info(
        "Experiment finished",
        extra={"experiment": spec.name, "cells": len(matrix.cells), "incomplete_cells": failed},
    )
    return matrix
