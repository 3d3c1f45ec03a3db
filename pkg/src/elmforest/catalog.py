"""Named model sizes, setups, and schedule defaults.

Reference size names count transformer-layer parameters, embeddings
excluded. The desk-* sizes are small enough to train on a laptop CPU in
minutes while keeping the same 1:2:3 feed-forward workload spread as the
reference setups.
"""

from __future__ import annotations

from .corpus import TIER_ORDER, DifficultyTier
from .tinylm import ExpertConfig, TrainSchedule

MODEL_SIZES: dict[str, ExpertConfig] = {
    "5M": ExpertConfig(hidden_size=272, intermediate_size=1088, num_heads=8, num_layers=4),
    "7.5M": ExpertConfig(hidden_size=272, intermediate_size=1088, num_heads=8, num_layers=6),
    "10M": ExpertConfig(hidden_size=320, intermediate_size=1280, num_heads=10, num_layers=6),
    "12.5M": ExpertConfig(hidden_size=330, intermediate_size=1320, num_heads=11, num_layers=7),
    "15M": ExpertConfig(hidden_size=340, intermediate_size=1360, num_heads=10, num_layers=8),
    "90M": ExpertConfig(hidden_size=768, intermediate_size=2304, num_heads=12, num_layers=12),
    "115M": ExpertConfig(hidden_size=768, intermediate_size=3072, num_heads=12, num_layers=12),
    "135M": ExpertConfig(hidden_size=768, intermediate_size=3840, num_heads=12, num_layers=12),
    "desk-s": ExpertConfig(hidden_size=80, intermediate_size=240, num_heads=2, num_layers=1),
    "desk-m": ExpertConfig(hidden_size=80, intermediate_size=240, num_heads=2, num_layers=2),
    "desk-l": ExpertConfig(hidden_size=80, intermediate_size=240, num_heads=2, num_layers=3),
}

# (small, moderate, large) size names per named setup.
SETUP_SIZES: dict[str, tuple[str, str, str]] = {
    "tiny-spread": ("5M", "10M", "15M"),
    "tiny-close": ("7.5M", "10M", "12.5M"),
    "small-close": ("90M", "115M", "135M"),
    "desk": ("desk-s", "desk-m", "desk-l"),
}

DEFAULT_ITER_M = 400
DEFAULT_GRANULARITY = 100
DEFAULT_TOLERANCE = 0.05

# Reference training knobs per size family. Batch sizes are token counts
# per optimizer step ("262k" / "688k" rows), realized as 2**18 and 672*2**10.
_TINY = {"5M", "7.5M", "10M", "12.5M", "15M"}
_SMALL = {"90M", "115M", "135M"}


def batch_tokens_for(size_name: str) -> int:
    if size_name in _SMALL:
        return 688_128
    if size_name in _TINY:
        return 262_144
    return 2_048


def max_lr_for(size_name: str) -> float:
    return 0.0006 if size_name in _SMALL else 0.005


PRETRAIN_TOTAL_STEPS = 20_000
PRETRAIN_WARMUP_STEPS = 1_000
DOMAIN_TOTAL_STEPS = 600
DOMAIN_WARMUP_STEPS = 50


def pretrain_schedule(size_name: str, total_steps: int = PRETRAIN_TOTAL_STEPS,
                      warmup_steps: int = PRETRAIN_WARMUP_STEPS) -> TrainSchedule:
    """Seed pretraining: warmup then cosine decay by one order of magnitude."""
    return TrainSchedule(total_steps=total_steps, warmup_steps=warmup_steps,
                         max_lr=max_lr_for(size_name),
                         batch_tokens=batch_tokens_for(size_name))


def domain_schedule(size_name: str, total_steps: int = DOMAIN_TOTAL_STEPS,
                    warmup_steps: int = DOMAIN_WARMUP_STEPS) -> TrainSchedule:
    """Per-domain training: peak lr equals the pretraining run's final lr."""
    return TrainSchedule(total_steps=total_steps, warmup_steps=warmup_steps,
                         max_lr=max_lr_for(size_name) / 10.0,
                         batch_tokens=batch_tokens_for(size_name))


def model_config(size_name: str) -> ExpertConfig:
    try:
        return MODEL_SIZES[size_name]
    except KeyError:
        raise KeyError(
            f"unknown model size {size_name!r}; known: {sorted(MODEL_SIZES)}") from None


def setup_configs(setup_name: str) -> dict[DifficultyTier, ExpertConfig]:
    """Tier → reference config map for a named setup (easy=S, difficult=L)."""
    try:
        names = SETUP_SIZES[setup_name]
    except KeyError:
        raise KeyError(
            f"unknown setup {setup_name!r}; known: {sorted(SETUP_SIZES)}") from None
    return {tier: MODEL_SIZES[size] for tier, size in zip(TIER_ORDER, names)}
