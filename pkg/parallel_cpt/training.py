"""Two-phase training loop, learning-rate schedules and greedy decoding.

Continual pre-training (``phase="cpt"``) trains on packed windows with the
plain causal-LM loss; fine-tuning (``phase="sft"``) trains on prompt-masked
examples. Both phases share :class:`Trainer`: AdamW with decoupled weight
decay, gradient-norm clipping, linear warmup followed by cosine or
inverse-square-root decay, periodic validation and selection of the
minimum-validation-loss checkpoint.

Example:
    >>> cfg = TrainConfig.preset("desk_cpt", epochs=1)
    >>> best = train_phase(model, windows, val_windows, cfg)
    >>> model = best.build_model()
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from typing import Any, Literal, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field, field_validator, model_validator
from torch.optim.lr_scheduler import LambdaLR

from .corpus import ParallelPair, ceil_fraction
from .exceptions import DivergenceError, PromptDirectionError, TokenRangeError, TrainingError
from .logging_config import LoggerAdapter, get_logger
from .model import AdapterSpec, CausalLM, Checkpoint, apply_adapters, count_trainable
from .packing import PackedWindow, Tokenizer, windows_to_arrays
from .sft import (
    LossNormalization,
    PromptTemplate,
    SftExample,
    batch_masked_nll,
    collate_sft,
    render_prompt,
)

logger = get_logger(__name__)

Phase = Literal["cpt", "sft"]
Schedule = Literal["cosine", "inverse_sqrt"]
TrainingExample = Union[PackedWindow, SftExample]

SHOT_SEPARATOR = "\n\n"


# =============================================================================
# Configuration
# =============================================================================


class TrainConfig(BaseModel):
    """Hyperparameters of one training phase.

    Validation runs before the first step, every ``validate_every`` steps
    (or every ``validate_fraction`` of the total), and after the last step.
    """

    phase: Phase
    peak_lr: float = Field(gt=0.0)
    warmup_ratio: float = Field(default=0.01, ge=0.0, lt=1.0)
    schedule: Schedule = "cosine"
    weight_decay: float = Field(default=0.1, ge=0.0)
    grad_clip: float = Field(default=1.0, gt=0.0)
    batch_size: int = Field(default=16, ge=1)
    epochs: int = Field(default=1, ge=0)
    validate_every: int | None = Field(default=None, ge=1)
    validate_fraction: float | None = Field(default=None, gt=0.0, le=1.0)
    adapter: AdapterSpec | None = None
    snapshot_fractions: tuple[float, ...] = ()
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = Field(default=1e-8, gt=0.0)
    loss_normalization: LossNormalization = "tokens"
    seed: int = 0

    model_config = {"frozen": True}

    @field_validator("betas")
    @classmethod
    def validate_betas(cls, v: tuple[float, float]) -> tuple[float, float]:
        if not all(0.0 <= b < 1.0 for b in v):
            raise ValueError(f"betas must lie in [0, 1), got {v}")
        return v

    @field_validator("snapshot_fractions")
    @classmethod
    def validate_snapshot_fractions(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if not all(0.0 < f <= 1.0 for f in v):
            raise ValueError("snapshot fractions must lie in (0, 1]")
        return tuple(sorted(set(v)))

    @model_validator(mode="after")
    def _one_cadence(self) -> TrainConfig:
        if self.validate_every is not None and self.validate_fraction is not None:
            raise ValueError("set validate_every or validate_fraction, not both")
        return self

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> TrainConfig:
        """Build a named preset, replacing any of its fields with ``overrides``."""
        if name not in PRESETS:
            raise ValueError(f"Unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def validation_interval(self, total_steps: int) -> int | None:
        if self.validate_every is not None:
            return self.validate_every
        if self.validate_fraction is not None and total_steps > 0:
            return max(1, round(self.validate_fraction * total_steps))
        return None


_CPT = {"phase": "cpt", "schedule": "cosine", "betas": (0.9, 0.95)}
_SFT = {"phase": "sft", "schedule": "inverse_sqrt", "betas": (0.9, 0.999)}
_LORA_QKV = AdapterSpec(r=16, alpha=32.0, dropout=0.05)
_LORA_ALL = AdapterSpec(r=16, alpha=32.0, dropout=0.05, targets=("q", "k", "v", "o", "ffn_in", "ffn_out"))

PRESETS: dict[str, dict[str, Any]] = {
    "large_cpt": {**_CPT, "peak_lr": 1.5e-4, "batch_size": 256, "epochs": 1, "validate_every": 100},
    "large_sft_full": {**_SFT, "peak_lr": 3e-5, "batch_size": 64, "epochs": 5, "validate_every": 100},
    "large_sft_lora": {
        **_SFT, "peak_lr": 2e-4, "batch_size": 64, "epochs": 5, "validate_every": 100,
        "adapter": _LORA_QKV,
    },
    "large_direct_sft": {
        **_SFT, "peak_lr": 2e-4, "batch_size": 256, "epochs": 1, "validate_fraction": 0.1,
        "adapter": _LORA_ALL,
    },
    "desk_cpt": {**_CPT, "peak_lr": 1.5e-3, "batch_size": 16, "epochs": 1, "validate_fraction": 0.1},
    "desk_sft_full": {**_SFT, "peak_lr": 3e-4, "batch_size": 16, "epochs": 5, "validate_fraction": 0.1},
    "desk_sft_lora": {
        **_SFT, "peak_lr": 2e-3, "batch_size": 16, "epochs": 5, "validate_fraction": 0.1,
        "adapter": _LORA_QKV,
    },
    "desk_direct_sft": {
        **_SFT, "peak_lr": 2e-3, "batch_size": 16, "epochs": 5, "validate_fraction": 0.1,
        "adapter": _LORA_ALL,
    },
}


def lr_multiplier(step: int, total_steps: int, warmup_ratio: float, schedule: Schedule) -> float:
    """Fraction of ``peak_lr`` used at optimizer step ``step`` (0-based).

    Warmup lasts ⌈warmup_ratio·total⌉ steps and rises linearly from 0, so the
    peak is reached exactly at the first post-warmup step. Cosine then
    decays to 0 at ``total_steps``; inverse-sqrt decays as √(warmup/step).
    """
    warmup = ceil_fraction(warmup_ratio, total_steps)
    if step < warmup:
        return step / warmup
    if schedule == "cosine":
        progress = min(1.0, (step - warmup) / max(1, total_steps - warmup))
        return 0.5 * (1.0 + math.cos(math.pi * progress))
    return math.sqrt(max(warmup, 1) / max(step, 1))


# =============================================================================
# Losses
# =============================================================================


def cpt_loss(model: CausalLM, window: PackedWindow) -> torch.Tensor:
    """Mean next-token NLL of one packed window.

    Raises:
        TokenRangeError: If an id is outside the model vocabulary.
    """
    inputs = torch.as_tensor(window.input_ids, dtype=torch.long)
    targets = torch.as_tensor(window.target_ids, dtype=torch.long)
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= model.config.vocab_size):
        bad = int(targets.min()) if int(targets.min()) < 0 else int(targets.max())
        raise TokenRangeError(bad, model.config.vocab_size)
    logits = model(inputs)
    return F.cross_entropy(logits, targets)


def _batch_loss(
    model: CausalLM,
    batch: Sequence[TrainingExample],
    phase: Phase,
    pad_id: int,
    normalization: LossNormalization,
) -> tuple[torch.Tensor, float]:
    """Loss of a batch and the number of scored tokens."""
    if phase == "cpt":
        inputs, targets = windows_to_arrays(batch)  # type: ignore[arg-type]
        logits = model(torch.as_tensor(inputs))
        target_t = torch.as_tensor(targets)
        loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target_t.reshape(-1))
        return loss, float(target_t.numel())
    ids, mask = collate_sft(batch, pad_id)  # type: ignore[arg-type]
    logits = model(ids)
    return batch_masked_nll(logits, ids, mask, normalization), float(mask[:, 1:].sum())


@torch.no_grad()
def validation_loss(
    model: CausalLM,
    val: Sequence[TrainingExample],
    phase: Phase,
    pad_id: int = 0,
    batch_size: int = 64,
) -> float:
    """Per-token loss over the whole validation set."""
    was_training = model.training
    model.eval()
    total, tokens = 0.0, 0.0
    try:
        for start in range(0, len(val), batch_size):
            batch = val[start : start + batch_size]
            loss, count = _batch_loss(model, batch, phase, pad_id, "sum" if phase == "sft" else "tokens")
            total += float(loss) * (count if phase == "cpt" else 1.0)
            tokens += count
    finally:
        model.train(was_training)
    return total / max(tokens, 1.0)


# =============================================================================
# Trainer
# =============================================================================


class Trainer:
    """Runs one phase and keeps the minimum-validation-loss checkpoint.

    Attributes:
        history: One record per validation point (step, lr, train/val loss).
        snapshots: Checkpoints captured at ``cfg.snapshot_fractions``.
    """

    def __init__(
        self,
        model: CausalLM,
        data: Sequence[TrainingExample],
        val: Sequence[TrainingExample],
        cfg: TrainConfig,
        pad_id: int = 0,
    ) -> None:
        if not data:
            raise ValueError("training data must be non-empty")
        if not val:
            raise ValueError("validation data must be non-empty")
        context = model.config.context_len
        for example in (*data, *val):
            length = example.context if isinstance(example, PackedWindow) else len(example)
            if length > context:
                raise TrainingError(
                    f"example of {length} tokens exceeds context length {context}",
                    details={"length": length, "context_len": context},
                )
        self.model = model
        self.data = list(data)
        self.val = list(val)
        self.cfg = cfg
        self.pad_id = pad_id
        self.steps_per_epoch = math.ceil(len(self.data) / cfg.batch_size)
        self.total_steps = self.steps_per_epoch * cfg.epochs
        self.history: list[dict[str, float]] = []
        self.snapshots: list[Checkpoint] = []
        self.log = LoggerAdapter(logger, {"phase": cfg.phase})

    def _validate(self, step: int, lr: float, train_loss: float | None) -> float:
        loss = validation_loss(
            self.model, self.val, self.cfg.phase, self.pad_id, batch_size=self.cfg.batch_size
        )
        record = {"step": step, "lr": lr, "val_loss": loss}
        if train_loss is not None:
            record["train_loss"] = train_loss
        self.history.append(record)
        self.log.info("Validation", extra=record)
        return loss

    def _optimizer(self) -> torch.optim.AdamW:
        decay, no_decay = [], []
        for param in self.model.parameters():
            if param.requires_grad:
                (decay if param.ndim >= 2 else no_decay).append(param)
        groups = [
            {"params": decay, "weight_decay": self.cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ]
        return torch.optim.AdamW(
            groups, lr=self.cfg.peak_lr, betas=self.cfg.betas, eps=self.cfg.eps
        )

    def run(self) -> Checkpoint:
        """Train for ``cfg.epochs`` and return the best checkpoint.

        Raises:
            DivergenceError: If a training loss is NaN or infinite.
        """
        cfg = self.cfg
        interval = cfg.validation_interval(self.total_steps)
        snapshot_steps = {ceil_fraction(f, self.total_steps): f for f in cfg.snapshot_fractions}
        self.log.info(
            "Training started",
            extra={
                "examples": len(self.data),
                "total_steps": self.total_steps,
                "trainable": count_trainable(self.model),
                "peak_lr": cfg.peak_lr,
                "schedule": cfg.schedule,
            },
        )

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            rng = np.random.default_rng(cfg.seed)
            optimizer = self._optimizer()
            scheduler = LambdaLR(
                optimizer,
                lambda s: lr_multiplier(s, self.total_steps, cfg.warmup_ratio, cfg.schedule),
            )

            best = Checkpoint.capture(self.model, 0, self._validate(0, 0.0, None), phase=cfg.phase)
            last_finite = -1
            step = 0
            self.model.train()
            for _ in range(cfg.epochs):
                order = rng.permutation(len(self.data))
                for start in range(0, len(order), cfg.batch_size):
                    batch = [self.data[i] for i in order[start : start + cfg.batch_size]]
                    lr = optimizer.param_groups[0]["lr"]
                    loss, _ = _batch_loss(
                        self.model, batch, cfg.phase, self.pad_id, cfg.loss_normalization
                    )
                    if not torch.isfinite(loss):
                        self.log.error(
                            "Training diverged", extra={"step": step, "last_finite_step": last_finite}
                        )
                        raise DivergenceError(last_finite, step)
                    last_finite = step

                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                    torch.nn.utils.clip_grad_norm_(
                        [p for p in self.model.parameters() if p.requires_grad], cfg.grad_clip
                    )
                    optimizer.step()
                    scheduler.step()
                    step += 1

                    due = interval is not None and step % interval == 0
                    if due or step == self.total_steps or step in snapshot_steps:
                        val_loss = self._validate(step, lr, loss.item())
                        if val_loss < best.validation_loss:
                            best = Checkpoint.capture(self.model, step, val_loss, phase=cfg.phase)
                        if step in snapshot_steps:
                            self.snapshots.append(
                                Checkpoint.capture(
                                    self.model, step, val_loss,
                                    phase=cfg.phase, fraction=snapshot_steps[step],
                                )
                            )

        self.model.eval()
        self.log.info(
            "Selected checkpoint",
            extra={"step": best.step, "val_loss": best.validation_loss, "total_steps": step},
        )
        return best


def train_phase(
    model: CausalLM,
    data: Sequence[TrainingExample],
    val: Sequence[TrainingExample],
    cfg: TrainConfig,
    pad_id: int = 0,
) -> Checkpoint:
    """Train ``model`` (with adapters if ``cfg.adapter`` is set) and return the best checkpoint.

    The model passed in is updated in place unless adapters are requested,
    in which case an adapted copy is trained.
    """
    if cfg.adapter is not None and model.adapter is None:
        model = apply_adapters(model, cfg.adapter, seed=cfg.seed)
    return Trainer(model, data, val, cfg, pad_id=pad_id).run()


# =============================================================================
# Decoding
# =============================================================================


@torch.no_grad()
def greedy_decode(
    model: CausalLM, prompt_ids: Sequence[int], max_new: int, eos_id: int
) -> list[int]:
    """Append the argmax token until eos, ``max_new`` tokens, or a full context.

    Ties go to the lowest token id. Only generated ids are returned; the
    eos that stops decoding is not.

    Raises:
        ValueError: If the prompt is empty or does not leave room in the context.
    """
    context = model.config.context_len
    if not prompt_ids:
        raise ValueError("prompt must be non-empty")
    if len(prompt_ids) >= context:
        raise ValueError(f"prompt of {len(prompt_ids)} tokens leaves no room in context {context}")

    was_training = model.training
    model.eval()
    sequence = [int(i) for i in prompt_ids]
    generated: list[int] = []
    try:
        while len(generated) < max_new and len(sequence) <= context:
            logits = model(torch.tensor(sequence, dtype=torch.long))[-1]
            next_id = int(torch.argmax(logits))
            if next_id == eos_id:
                break
            generated.append(next_id)
            sequence.append(next_id)
    finally:
        model.train(was_training)
    return generated


def few_shot_prompt(
    examples: Sequence[ParallelPair], query: ParallelPair, template: PromptTemplate
) -> str:
    """Rendered example blocks (prompt + target) followed by the query's prompt.

    Blocks are separated by a blank line. With no examples this is exactly
    ``render_prompt(query, template)``.

    Raises:
        PromptDirectionError: If an example or the query has another direction.
    """
    blocks = []
    for example in examples:
        if example.direction != query.direction:
            raise PromptDirectionError(str(query.direction), str(example.direction))
        blocks.append(render_prompt(example, template) + example.target_text + SHOT_SEPARATOR)
    return "".join(blocks) + render_prompt(query, template)


def translate_pairs(
    model: CausalLM,
    tok: Tokenizer,
    pairs: Sequence[ParallelPair],
    template: PromptTemplate,
    shots: Sequence[ParallelPair] = (),
    max_new: int = 64,
) -> list[str]:
    """Greedy translations of every pair's source, decoded to text.

    Prompts are kept whole when they fit the context; decoding then stops
    at eos, ``max_new`` tokens or a full context. Only a prompt of
    ``context_len`` tokens or more is cut, keeping its last
    ``context_len - 1`` tokens. A translation is one line: text after the
    first line break (such as the start of another shot block) is dropped.
    """
    budget = model.config.context_len - 1
    outputs = []
    truncated = 0
    for pair in pairs:
        ids = tok.encode(few_shot_prompt(shots, pair, template))
        if len(ids) > budget:
            ids = ids[-budget:]
            truncated += 1
        text = tok.decode(greedy_decode(model, ids, max_new, tok.eos_id))
        outputs.append(text.split("\n", 1)[0].strip())
    if truncated:
        logger.warning("Left-truncated prompts", extra={"prompts": truncated, "budget": budget})
    return outputs
