"""Command-line entry point for the parallel-cpt toolkit.

Example:
    Generate a synthetic task and run an experiment::

        $ parallel-cpt synth --task cipher_plus_reversal --seed 0 --out-dir data/
        $ parallel-cpt experiment --spec experiments/desk_replication.yaml --out runs/desk

    Running as a module::

        $ python -m parallel_cpt --help

Every command reads its settings from flags, falling back to ``PCPT_*``
environment variables (see :mod:`parallel_cpt.config`). Machine-readable
summaries are printed to stdout as JSON; logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from . import __version__
from .config import Config, load_config, load_structured_file
from .corpus import Direction, load_pairs, save_pairs
from .evaluation import corpus_bleu, get_significance_test
from .exceptions import ConfigurationError, ParallelCptError
from .experiment import run_experiment_matrix
from .filtering import (
    DEFAULT_HIGH,
    DEFAULT_LOW,
    HashProjectionProvider,
    PrecomputedVectorProvider,
    SimilarityBand,
    band_filter,
    band_report,
    score_corpus,
)
from .formats import (
    FormatSpec,
    MixOrdering,
    MonoOrdering,
    SingleDirectionOrdering,
    build_cpt_corpus,
    build_marker,
    load_documents,
    replay_mix,
    save_documents,
)
from .logging_config import get_logger, setup_logging
from .model import (
    AdapterSpec,
    CausalLM,
    ModelConfig,
    apply_adapters,
    load_checkpoint,
    merge_adapters,
    save_checkpoint,
)
from .packing import (
    DEFAULT_CONTEXT,
    encode_stream,
    load_tokenizer,
    load_windows,
    pack_report,
    pack_windows,
    save_windows,
)
from .sft import build_sft_example, load_examples, resolve_template, save_examples
from .synthetic import SyntheticTaskSpec, generate, invert_direction, write_splits
from .training import PRESETS, TrainConfig, Trainer, translate_pairs

logger = get_logger(__name__)


def _emit(payload: dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=True))


def _read_lines(path: str | Path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    return lines[:-1] if lines and lines[-1] == "" else lines


def _write_lines(path: str | Path, lines: Sequence[str]) -> None:
    Path(path).write_text("".join(line.replace("\n", " ") + "\n" for line in lines), encoding="utf-8")


# =============================================================================
# Commands
# =============================================================================


def cmd_filter(args: argparse.Namespace, config: Config) -> int:
    direction = Direction.parse(args.direction) if args.direction else None
    corpus = load_pairs(args.input, direction)
    if args.vectors:
        corpus = score_corpus(corpus, PrecomputedVectorProvider.from_file(args.vectors), config.runtime.workers)
    elif args.rescore or any(pair.similarity is None for pair in corpus):
        corpus = score_corpus(corpus, HashProjectionProvider(), config.runtime.workers)
    band = SimilarityBand(low=args.low, high=args.high)
    report = band_report(corpus, band)
    save_pairs(band_filter(corpus, band), args.output)
    _emit(report.model_dump())
    return 0


def cmd_build_cpt(args: argparse.Namespace, config: Config) -> int:
    corpus_ab = load_pairs(args.in_ab)
    corpus_ba = load_pairs(args.in_ba) if args.in_ba else invert_direction(corpus_ab)
    directions = corpus_ab.directions or {Direction.parse(args.direction or "en-ja")}
    if len(directions) != 1:
        raise ConfigurationError(
            f"--in-ab must hold a single direction, found {sorted(map(str, directions))}"
        )
    (direction,) = directions
    if args.ordering == "mono":
        ordering: Any = MonoOrdering()
    elif args.ordering == "mix":
        ordering = MixOrdering(fraction_per_direction=args.mix_fraction, seed=args.seed)
    else:
        chosen = direction if args.ordering == "ab" else direction.reversed()
        ordering = SingleDirectionOrdering(direction=chosen)
    spec = FormatSpec(
        ordering=ordering,
        marker=build_marker(args.format, [direction, direction.reversed()]),
        separator=args.separator,
    )
    docs = build_cpt_corpus(corpus_ab, corpus_ba, spec)
    if args.replay:
        docs = replay_mix(docs, load_documents(args.replay), args.replay_fraction, args.seed)
    save_documents(docs, args.output)
    _emit({"documents": len(docs), "ordering": args.ordering, "format": args.format})
    return 0


def cmd_pack(args: argparse.Namespace, config: Config) -> int:
    tok = load_tokenizer(args.tokenizer)
    stream = encode_stream(load_documents(args.input), tok, workers=config.runtime.workers)
    windows = pack_windows(stream, args.context)
    save_windows(windows, args.context, args.output)
    _emit({"tokenizer": tok.name, **pack_report(stream, args.context).to_dict()})
    return 0


def cmd_build_sft(args: argparse.Namespace, config: Config) -> int:
    tok = load_tokenizer(args.tokenizer)
    corpus = load_pairs(args.input)
    examples = []
    for pair in corpus:
        template = resolve_template(args.template, pair.direction)
        examples.append(build_sft_example(pair, template, tok))
    save_examples(examples, args.output)
    supervised = sum(len(ex) - ex.prompt_len for ex in examples)
    _emit({"examples": len(examples), "supervised_tokens": supervised, "template": args.template})
    return 0


def _train_config(args: argparse.Namespace, config: Config) -> TrainConfig:
    overrides: dict[str, Any] = {"seed": args.seed if args.seed is not None else config.runtime.default_seed}
    for flag, field in (
        ("lr", "peak_lr"),
        ("schedule", "schedule"),
        ("epochs", "epochs"),
        ("batch_size", "batch_size"),
        ("warmup_ratio", "warmup_ratio"),
    ):
        value = getattr(args, flag)
        if value is not None:
            overrides[field] = value
    if args.validate_every is not None:
        overrides.update(validate_every=args.validate_every, validate_fraction=None)
    if args.adapter:
        overrides["adapter"] = AdapterSpec.parse(args.adapter)
    if args.snapshots:
        overrides["snapshot_fractions"] = tuple(float(f) for f in args.snapshots.split(","))
    preset = args.preset or f"desk_{args.phase}" + ("" if args.phase == "cpt" else "_full")
    cfg = TrainConfig.preset(preset, **overrides)
    if cfg.phase != args.phase:
        raise ConfigurationError(f"Preset {preset} is a {cfg.phase} preset, not {args.phase}")
    return cfg


def cmd_train(args: argparse.Namespace, config: Config) -> int:
    tok = load_tokenizer(args.tokenizer)
    cfg = _train_config(args, config)
    if args.phase == "cpt":
        _, data = load_windows(args.data)
        _, val = load_windows(args.val)
    else:
        data, val = load_examples(args.data), load_examples(args.val)

    if args.init.startswith("ckpt:"):
        model = merge_adapters(load_checkpoint(args.init.removeprefix("ckpt:")).build_model())
    elif args.init == "random":
        model = CausalLM(ModelConfig(vocab_size=tok.vocab_size, context_len=args.context, seed=cfg.seed))
    else:
        raise ConfigurationError(f"--init must be 'random' or 'ckpt:PATH', got {args.init!r}")

    if cfg.adapter is not None:
        model = apply_adapters(model, cfg.adapter, seed=cfg.seed)
    trainer = Trainer(model, data, val, cfg, pad_id=tok.pad_id)  # type: ignore[arg-type]
    best = trainer.run()
    save_checkpoint(best, args.output)
    out = Path(args.output)
    for snapshot in trainer.snapshots:
        fraction = snapshot.metadata["fraction"]
        save_checkpoint(snapshot, out.with_name(f"{out.stem}.at{round(fraction * 100):03d}{out.suffix}"))
    _emit(
        {
            "phase": cfg.phase,
            "best_step": best.step,
            "validation_loss": best.validation_loss,
            "total_steps": trainer.total_steps,
            "snapshots": len(trainer.snapshots),
        }
    )
    return 0


def cmd_translate(args: argparse.Namespace, config: Config) -> int:
    tok = load_tokenizer(args.tokenizer)
    model = merge_adapters(load_checkpoint(args.ckpt).build_model())
    corpus = load_pairs(args.input)
    shots: list[Any] = []
    if args.shots != "0":
        count, _, path = args.shots.partition(":")
        if not path:
            raise ConfigurationError("--shots must be 0 or K:PATH")
        shots = list(load_pairs(path).pairs[: int(count)])
    hyps = []
    for direction in sorted(corpus.directions, key=str):
        template = resolve_template(args.template, direction)
        pairs = [p for p in corpus if p.direction == direction]
        direction_shots = [p for p in shots if p.direction == direction]
        hyps.extend(zip((p.id for p in pairs), translate_pairs(model, tok, pairs, template, direction_shots, args.max_new)))
    order = {pair.id: index for index, pair in enumerate(corpus)}
    hyps.sort(key=lambda item: order[item[0]])
    _write_lines(args.output, [text for _, text in hyps])
    _emit({"translated": len(hyps), "shots": len(shots)})
    return 0


def cmd_synth(args: argparse.Namespace, config: Config) -> int:
    settings: dict[str, Any] = load_structured_file(args.config) if args.config else {}
    for flag in ("task", "n_train", "n_val", "n_test", "n_sft"):
        value = getattr(args, flag)
        if value is not None:
            settings[flag] = value
    settings["seed"] = args.seed if args.seed is not None else config.runtime.default_seed
    spec = SyntheticTaskSpec(**settings)
    written = write_splits(generate(spec), args.out_dir)
    _emit({"task": spec.task, "seed": spec.seed, "files": [str(p) for p in written]})
    return 0


def cmd_evaluate(args: argparse.Namespace, config: Config) -> int:
    hyps, refs = _read_lines(args.hyp), _read_lines(args.ref)
    report = corpus_bleu(hyps, refs, args.tokenizer, args.smoothing)
    payload: dict[str, Any] = {"bleu": report.model_dump(mode="json"), "summary": report.summary()}
    if args.baseline:
        test = get_significance_test(args.test)
        result = test(
            hyps,
            _read_lines(args.baseline),
            refs,
            n_resamples=args.bootstrap,
            seed=args.seed if args.seed is not None else config.runtime.default_seed,
            tokenizer=args.tokenizer,
            smoothing=args.smoothing,
        )
        payload["significance"] = {**result.model_dump(mode="json"), "significant": result.significant()}
    _emit(payload)
    return 0


def cmd_experiment(args: argparse.Namespace, config: Config) -> int:
    workers = args.experiment_workers or config.runtime.workers
    out = args.output or str(Path(config.runtime.artifacts_dir) / Path(args.spec).stem)
    matrix = run_experiment_matrix(args.spec, out, workers=workers, torch_threads=config.runtime.torch_threads)
    sys.stdout.write(matrix.render_text())
    return 0 if all(cell.status == "ok" for cell in matrix.cells) else 2


# =============================================================================
# Parser
# =============================================================================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parallel-cpt",
        description="Parallel-corpus continual pre-training and fine-tuning toolkit",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", help="Override PCPT_LOG_LEVEL")
    parser.add_argument("--log-json", action="store_true", help="JSON logs on stderr")
    parser.add_argument("--env-file", type=Path, help="Path to a .env file")
    parser.add_argument("--workers", type=int, help="Override PCPT_WORKERS")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter", help="Score pairs and keep the similarity band")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--low", type=float, default=DEFAULT_LOW)
    p.add_argument("--high", type=float, default=DEFAULT_HIGH)
    p.add_argument("--vectors", help="Precomputed vector file (JSON lines: id, src_vec, tgt_vec)")
    p.add_argument("--direction", help="Expected direction, e.g. en-ja")
    p.add_argument("--rescore", action="store_true", help="Ignore similarities stored in the file")
    p.set_defaults(handler=cmd_filter)

    p = sub.add_parser("build-cpt", help="Emit continual pre-training documents")
    p.add_argument("--format", choices=["interleaved", "prefixed", "tagged", "json"], default="interleaved")
    p.add_argument("--ordering", choices=["mono", "ab", "ba", "mix"], required=True)
    p.add_argument("--mix-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replay", help="Document file to replay from")
    p.add_argument("--replay-fraction", type=float, default=0.01)
    p.add_argument("--in-ab", required=True)
    p.add_argument("--in-ba", help="Reverse-direction pairs (default: --in-ab inverted)")
    p.add_argument("--direction", help="Direction of --in-ab when it is empty")
    p.add_argument("--separator", default=" ")
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(handler=cmd_build_cpt)

    p = sub.add_parser("pack", help="Tokenize documents and pack fixed windows")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--context", type=int, default=DEFAULT_CONTEXT)
    p.add_argument("--tokenizer", default="byte")
    p.set_defaults(handler=cmd_pack)

    p = sub.add_parser("build-sft", help="Build prompt-masked fine-tuning examples")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--template", required=True, help="enja, jaen, synthetic or file:PATH")
    p.add_argument("--tokenizer", default="byte")
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(handler=cmd_build_sft)

    p = sub.add_parser("train", help="Run one training phase")
    p.add_argument("--phase", choices=["cpt", "sft"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--init", default="random", help="random or ckpt:PATH")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--lr", type=float)
    p.add_argument("--schedule", choices=["cosine", "inverse_sqrt"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--warmup-ratio", type=float)
    p.add_argument("--validate-every", type=int)
    p.add_argument("--adapter", help="e.g. r=16,alpha=32,dropout=0.05,targets=qkv")
    p.add_argument("--snapshots", help="Comma-separated step fractions, e.g. 0.1,0.3")
    p.add_argument("--context", type=int, default=128, help="Model context for --init random")
    p.add_argument("--tokenizer", default="byte")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("translate", help="Greedy-decode a pair file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--template", required=True, help="enja, jaen, synthetic or file:PATH")
    p.add_argument("--shots", default="0", help="0 or K:PATH")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--tokenizer", default="byte")
    p.add_argument("--max-new", type=int, default=64)
    p.set_defaults(handler=cmd_translate)

    p = sub.add_parser("synth", help="Generate a synthetic bilingual task")
    p.add_argument("--task", choices=["substitution_cipher", "word_reversal", "cipher_plus_reversal"])
    p.add_argument("--config", help="Task spec file (JSON/YAML)")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--n-sft", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("evaluate", help="Corpus BLEU and optional significance test")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--baseline", help="Baseline hypotheses for the significance test")
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--test", default="paired_bootstrap")
    p.add_argument("--tokenizer", choices=["whitespace", "13a"], default="whitespace")
    p.add_argument("--smoothing", choices=["none", "add-one"], default="none")
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("experiment", help="Run or resume an experiment matrix")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", dest="output")
    p.add_argument("--workers", dest="experiment_workers", type=int, help="Parallel units")
    p.set_defaults(handler=cmd_experiment)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, configure logging and run one command.

    Returns:
        Exit code (0 for success, 1 for error, 2 when experiment cells failed).
    """
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.env_file)
        updates: dict[str, Any] = {}
        if args.log_level:
            updates["log_level"] = args.log_level.upper()
        if args.log_json:
            updates["log_json"] = True
        logging_config = config.logging.model_copy(update=updates)
        if args.workers:
            config = config.model_copy(
                update={"runtime": config.runtime.model_copy(update={"workers": args.workers})}
            )
        setup_logging(
            log_level=logging_config.log_level,
            json_format=logging_config.log_json,
            log_file=logging_config.log_file,
        )
        if config.runtime.torch_threads:
            import torch

            torch.set_num_threads(config.runtime.torch_threads)

        logger.debug("Running command", extra={"command": args.command})
        return int(args.handler(args, config))

    except ConfigurationError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return 1
    except ParallelCptError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        # pydantic ValidationError included
        print(f"Invalid input: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\nInterrupted", file=sys.stderr)
        return 0
    except Exception as e:
        import traceback

        print(f"Fatal error: {e}", file=sys.stderr)
        traceback.print_exc(file=sys.stderr)
        return 1


def run() -> None:
    """Entry point wrapper for console_scripts."""
    sys.exit(main())


if __name__ == "__main__":
    run()
