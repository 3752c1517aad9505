"""Desk-scale reference causal language model with low-rank adapters.

The model is a pre-norm decoder-only transformer with learned positional
embeddings. Every linear layer carries a role name (``q``, ``k``, ``v``,
``o``, ``ffn_in``, ``ffn_out``) so adapters can be attached by role.

Checkpoint file layout (little-endian)::

    magic "BFCK" | version u16 | header_len u32 | header JSON (UTF-8)
    then every tensor named in the header, as f32, in header order

The header records the model config, the adapter spec (if any), the step,
the validation loss and ``[name, shape]`` for each tensor.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field, model_validator
from torch import nn

from .exceptions import AdapterTargetError, CheckpointFileError, TokenRangeError
from .logging_config import get_logger

logger = get_logger(__name__)

LINEAR_ROLES = ("q", "k", "v", "o", "ffn_in", "ffn_out")
ADAPTER_PRESETS: dict[str, tuple[str, ...]] = {
    "qkv": ("q", "k", "v"),
    "all": LINEAR_ROLES,
}

CHECKPOINT_MAGIC = b"BFCK"
CHECKPOINT_VERSION = 1
_CHECKPOINT_PREFIX = struct.Struct("<4sHI")


class ModelConfig(BaseModel):
    """Shape of the reference model."""

    vocab_size: int = Field(default=259, ge=1)
    context_len: int = Field(default=128, ge=2)
    embed_dim: int = Field(default=64, ge=1)
    n_layers: int = Field(default=2, ge=1)
    n_heads: int = Field(default=4, ge=1)
    ffn_dim: int = Field(default=256, ge=1)
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    seed: int = 0

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def _heads_divide_width(self) -> ModelConfig:
        if self.embed_dim % self.n_heads:
            raise ValueError(
                f"embed_dim ({self.embed_dim}) must be divisible by n_heads ({self.n_heads})"
            )
        return self


class AdapterSpec(BaseModel):
    """Low-rank adapter hyperparameters; the update is scaled by ``alpha / r``."""

    r: int = Field(default=16, ge=1)
    alpha: float = Field(default=32.0, gt=0.0)
    dropout: float = Field(default=0.05, ge=0.0, lt=1.0)
    targets: tuple[str, ...] = ADAPTER_PRESETS["qkv"]

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def _known_targets(self) -> AdapterSpec:
        if not self.targets:
            raise ValueError("adapter targets must be non-empty")
        for role in self.targets:
            if role not in LINEAR_ROLES:
                raise AdapterTargetError(role, list(LINEAR_ROLES))
        return self

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    @classmethod
    def parse(cls, text: str) -> AdapterSpec:
        """Parse ``"r=16,alpha=32,dropout=0.05,targets=qkv"`` (targets: preset or ``q+k+v``)."""
        values: dict[str, Any] = {}
        for item in filter(None, (part.strip() for part in text.split(","))):
            key, _, value = item.partition("=")
            key = key.strip()
            if key == "targets":
                values["targets"] = resolve_targets(value.strip())
            elif key in ("r", "alpha", "dropout"):
                values[key] = value.strip()
            else:
                raise ValueError(f"Unknown adapter option {key!r}")
        return cls(**values)


def resolve_targets(text: str) -> tuple[str, ...]:
    """A preset name (``qkv``, ``all``) or roles joined by ``+``."""
    if text in ADAPTER_PRESETS:
        return ADAPTER_PRESETS[text]
    roles = tuple(role for role in text.split("+") if role)
    for role in roles:
        if role not in LINEAR_ROLES:
            raise AdapterTargetError(role, list(LINEAR_ROLES))
    return roles


# =============================================================================
# Layers
# =============================================================================


class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable rank-``r`` update ``(α/r)·B·A``.

    ``A`` is Kaiming-uniform and ``B`` is zero, so a fresh adapter leaves the
    layer's output unchanged.
    """

    def __init__(self, base: nn.Linear, spec: AdapterSpec) -> None:
        super().__init__()
        self.base = base
        self.r = spec.r
        self.scaling = spec.scaling
        for param in self.base.parameters():
            param.requires_grad_(False)

        factory = {"dtype": base.weight.dtype, "device": base.weight.device}
        self.lora_A = nn.Parameter(torch.empty(spec.r, base.in_features, **factory))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, spec.r, **factory))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        self.dropout = nn.Dropout(spec.dropout) if spec.dropout > 0 else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        update = (self.dropout(x) @ self.lora_A.T) @ self.lora_B.T
        return self.base(x) + update * self.scaling

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * (self.lora_B @ self.lora_A)


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        d = config.embed_dim
        self.n_heads = config.n_heads
        self.head_dim = d // config.n_heads
        self.q: nn.Module = nn.Linear(d, d, bias=False)
        self.k: nn.Module = nn.Linear(d, d, bias=False)
        self.v: nn.Module = nn.Linear(d, d, bias=False)
        self.o: nn.Module = nn.Linear(d, d, bias=False)
        self.attn_dropout = nn.Dropout(config.dropout)
        mask = torch.tril(torch.ones(config.context_len, config.context_len, dtype=torch.bool))
        self.register_buffer("causal_mask", mask, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, width = x.shape

        def heads(t: torch.Tensor) -> torch.Tensor:
            return t.view(batch, length, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~self.causal_mask[:length, :length], float("-inf"))
        weights = self.attn_dropout(F.softmax(scores, dim=-1))
        out = (weights @ v).transpose(1, 2).reshape(batch, length, width)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.ffn_in: nn.Module = nn.Linear(config.embed_dim, config.ffn_dim)
        self.ffn_out: nn.Module = nn.Linear(config.ffn_dim, config.embed_dim)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.dropout(self.ffn_out(F.gelu(self.ffn_in(x))))


class Block(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.ln_attn = nn.LayerNorm(config.embed_dim)
        self.attn = CausalSelfAttention(config)
        self.ln_ffn = nn.LayerNorm(config.embed_dim)
        self.ffn = FeedForward(config)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln_attn(x))
        return x + self.ffn(self.ln_ffn(x))


class CausalLM(nn.Module):
    """Decoder-only transformer returning next-token logits for every position.

    Weights are drawn from N(0, 0.02) under ``config.seed`` without touching
    the global RNG, so a fresh model predicts close to uniformly.
    """

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.adapter: AdapterSpec | None = None
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.token_embedding = nn.Embedding(config.vocab_size, config.embed_dim)
            self.position_embedding = nn.Embedding(config.context_len, config.embed_dim)
            self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
            self.ln_final = nn.LayerNorm(config.embed_dim)
            self.lm_head = nn.Linear(config.embed_dim, config.vocab_size, bias=False)
            self.drop = nn.Dropout(config.dropout)
            self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
        if isinstance(module, nn.Linear) and module.bias is not None:
            nn.init.zeros_(module.bias)

    def forward(self, input_ids: torch.Tensor) -> torch.Tensor:
        """Logits of shape ``(..., L, vocab_size)`` for ids of shape ``(..., L)``.

        Raises:
            TokenRangeError: If an id is outside ``[0, vocab_size)``.
            ValueError: If ``L`` exceeds the context length.
        """
        squeeze = input_ids.ndim == 1
        ids = input_ids.unsqueeze(0) if squeeze else input_ids
        length = ids.shape[-1]
        if length > self.config.context_len:
            raise ValueError(
                f"sequence of {length} tokens exceeds context length {self.config.context_len}"
            )
        if ids.numel():
            low, high = int(ids.min()), int(ids.max())
            if low < 0 or high >= self.config.vocab_size:
                bad = low if low < 0 else high
                raise TokenRangeError(bad, self.config.vocab_size)

        positions = torch.arange(length, device=ids.device)
        x = self.drop(self.token_embedding(ids) + self.position_embedding(positions))
        for block in self.blocks:
            x = block(x)
        logits = self.lm_head(self.ln_final(x))
        return logits.squeeze(0) if squeeze else logits

    def role_layers(self, roles: Iterable[str]) -> list[tuple[nn.Module, str]]:
        """``(parent, attribute)`` for every linear layer with one of ``roles``."""
        wanted = set(roles)
        found = []
        for block in self.blocks:
            for parent in (block.attn, block.ffn):
                for role in LINEAR_ROLES:
                    if role in wanted and hasattr(parent, role):
                        found.append((parent, role))
        return found


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def count_trainable(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def adapter_parameter_count(config: ModelConfig, spec: AdapterSpec) -> int:
    """Closed form Σ r·(d_in + d_out) over adapted layers."""
    d, f = config.embed_dim, config.ffn_dim
    shapes = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "ffn_in": (d, f), "ffn_out": (f, d)}
    per_layer = sum(spec.r * sum(shapes[role]) for role in spec.targets)
    return per_layer * config.n_layers


def apply_adapters(
    model: CausalLM, spec: AdapterSpec, targets: Iterable[str] | None = None, seed: int = 0
) -> CausalLM:
    """Return a copy of ``model`` with every base weight frozen and adapters on ``targets``.

    ``targets`` defaults to ``spec.targets``.

    Raises:
        AdapterTargetError: If a target role is unknown.
        ValueError: If ``targets`` is empty or the model already has adapters.
    """
    if model.adapter is not None:
        raise ValueError("model already carries adapters; merge them first")
    roles = tuple(targets) if targets is not None else spec.targets
    if not roles:
        raise ValueError("adapter targets must be non-empty")
    for role in roles:
        if role not in LINEAR_ROLES:
            raise AdapterTargetError(role, list(LINEAR_ROLES))
    spec = spec.model_copy(update={"targets": roles})

    adapted = copy.deepcopy(model)
    for param in adapted.parameters():
        param.requires_grad_(False)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for parent, role in adapted.role_layers(roles):
            setattr(parent, role, LoRALinear(getattr(parent, role), spec))
    adapted.adapter = spec

    logger.info(
        "Applied adapters",
        extra={
            "r": spec.r,
            "alpha": spec.alpha,
            "targets": list(roles),
            "trainable": count_trainable(adapted),
            "total": count_parameters(adapted),
        },
    )
    return adapted


def merge_adapters(model: CausalLM) -> CausalLM:
    """Return a plain, fully trainable copy with every adapter folded into its base weight."""
    merged = copy.deepcopy(model)
    if merged.adapter is None:
        return merged
    with torch.no_grad():
        for parent, role in merged.role_layers(merged.adapter.targets):
            layer = getattr(parent, role)
            if isinstance(layer, LoRALinear):
                layer.base.weight.copy_(layer.merged_weight())
                setattr(parent, role, layer.base)
    for param in merged.parameters():
        param.requires_grad_(True)
    merged.adapter = None
    return merged


# =============================================================================
# Checkpoints
# =============================================================================


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """An immutable parameter snapshot and the validation loss it reached."""

    config: ModelConfig
    state: dict[str, torch.Tensor]
    step: int
    validation_loss: float
    adapter: AdapterSpec | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not math.isfinite(self.validation_loss):
            raise ValueError(f"validation_loss must be finite, got {self.validation_loss}")

    @classmethod
    def capture(
        cls, model: CausalLM, step: int, validation_loss: float, **metadata: Any
    ) -> Checkpoint:
        state = {name: t.detach().clone() for name, t in model.state_dict().items()}
        return cls(
            config=model.config,
            state=state,
            step=step,
            validation_loss=float(validation_loss),
            adapter=model.adapter,
            metadata=dict(metadata),
        )

    def build_model(self, dtype: torch.dtype | None = None) -> CausalLM:
        """Rebuild a model holding this snapshot's weights."""
        model = CausalLM(self.config)
        if self.adapter is not None:
            model = apply_adapters(model, self.adapter)
        if dtype is not None:
            model = model.to(dtype)
        target_dtype = next(model.parameters()).dtype
        model.load_state_dict({k: v.to(target_dtype) for k, v in self.state.items()})
        return model


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    """Write ``checkpoint`` in the checkpoint file layout (weights as f32)."""
    path = Path(path)
    names = list(checkpoint.state)
    header = {
        "model": checkpoint.config.model_dump(),
        "adapter": checkpoint.adapter.model_dump() if checkpoint.adapter else None,
        "step": checkpoint.step,
        "validation_loss": checkpoint.validation_loss,
        "metadata": checkpoint.metadata,
        "tensors": [[name, list(checkpoint.state[name].shape)] for name in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(_CHECKPOINT_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)))
            f.write(header_bytes)
            for name in names:
                array = checkpoint.state[name].detach().cpu().to(torch.float32).numpy()
                f.write(array.astype("<f4").tobytes())
    except OSError as e:
        raise CheckpointFileError(str(path), str(e)) from e
    logger.debug("Saved checkpoint", extra={"path": str(path), "step": checkpoint.step})


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint file.

    Raises:
        CheckpointFileError: On a bad magic/version, header or body size.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointFileError(str(path), str(e)) from e
    if len(data) < _CHECKPOINT_PREFIX.size:
        raise CheckpointFileError(str(path), "file shorter than header")
    magic, version, header_len = _CHECKPOINT_PREFIX.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFileError(str(path), f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFileError(str(path), f"unsupported version {version}")

    offset = _CHECKPOINT_PREFIX.size
    try:
        header = json.loads(data[offset : offset + header_len].decode("utf-8"))
        config = ModelConfig(**header["model"])
        adapter = AdapterSpec(**header["adapter"]) if header["adapter"] else None
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CheckpointFileError(str(path), f"invalid header: {e}") from e
    offset += header_len

    state: dict[str, torch.Tensor] = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(data):
            raise CheckpointFileError(str(path), f"truncated at tensor {name}")
        array = np.frombuffer(data[offset:end], dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(array.astype(np.float32))
        offset = end
    if offset != len(data):
        raise CheckpointFileError(str(path), "trailing bytes after last tensor")

    return Checkpoint(
        config=config,
        state=state,
        step=int(header["step"]),
        validation_loss=float(header["validation_loss"]),
        adapter=adapter,
        metadata=header.get("metadata") or {},
    )
