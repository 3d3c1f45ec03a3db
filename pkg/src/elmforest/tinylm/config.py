"""Architecture and training-schedule descriptions for one expert."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..corpus import VOCAB_SIZE, DifficultyTier


@dataclass(frozen=True)
class ExpertConfig:
    """Decoder-only model shape.

    ``tier`` marks which difficulty tier the config is assigned to inside a
    plan; it is bookkeeping, not architecture, so it is excluded from
    equality and from checkpoint content hashes.
    """

    hidden_size: int
    intermediate_size: int
    num_heads: int
    num_layers: int
    vocab_size: int = VOCAB_SIZE
    seq_len: int = 128
    tier: DifficultyTier | None = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("hidden_size", "intermediate_size", "num_heads", "num_layers",
                     "vocab_size", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if self.head_dim % 2 != 0:
            raise ValueError(f"head dimension {self.head_dim} must be even for rotary embeddings")
        if self.intermediate_size < self.hidden_size:
            raise ValueError("intermediate_size must be >= hidden_size")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "intermediate_size": self.intermediate_size,
            "num_heads": self.num_heads,
            "num_layers": self.num_layers,
            "vocab_size": self.vocab_size,
            "seq_len": self.seq_len,
        }

    @classmethod
    def from_dict(cls, d: dict, tier: DifficultyTier | None = None) -> "ExpertConfig":
        return cls(tier=tier, **{k: d[k] for k in (
            "hidden_size", "intermediate_size", "num_heads", "num_layers",
            "vocab_size", "seq_len")})

    def with_tier(self, tier: DifficultyTier | None) -> "ExpertConfig":
        return ExpertConfig(tier=tier, **self.to_dict())


@dataclass(frozen=True)
class TrainSchedule:
    """Optimizer-step budget plus warmup/cosine learning-rate shape.

    ``min_lr`` defaults to ``max_lr / 10`` (the annealing target is one
    order of magnitude below peak). ``batch_tokens`` is the number of tokens
    consumed per optimizer step.
    """

    total_steps: int
    warmup_steps: int
    max_lr: float
    min_lr: float | None = None
    batch_tokens: int = 1024
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.min_lr is None:
            object.__setattr__(self, "min_lr", self.max_lr / 10.0)
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ValueError(
                f"warmup_steps {self.warmup_steps} must be < total_steps {self.total_steps}")
        if not 0.0 < self.min_lr <= self.max_lr:
            raise ValueError(f"need 0 < min_lr <= max_lr, got {self.min_lr} / {self.max_lr}")
        if self.batch_tokens < 1:
            raise ValueError("batch_tokens must be positive")

    def batch_size(self, seq_len: int) -> int:
        return max(1, self.batch_tokens // seq_len)

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "warmup_steps": self.warmup_steps,
            "max_lr": self.max_lr,
            "min_lr": self.min_lr,
            "batch_tokens": self.batch_tokens,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "grad_clip": self.grad_clip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        return cls(**d)
