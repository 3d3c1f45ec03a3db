"""Byte-level corpus handling.

Each domain is one UTF-8 text file read verbatim as bytes. Tokenization is
the identity map on byte values (vocab 259 = 256 bytes + BOS/EOS/PAD), so
there is nothing to train and round-tripping is exact. Splits are taken as
contiguous blocks with the holdout coming from the corpus tail, which keeps
adjacent context from leaking between train and eval.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import CorpusTooSmall, MissingArtifact, SequenceTooLong, TooFewDomains

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
VOCAB_SIZE = 259

TOKEN_DTYPE = np.int32


class DifficultyTier(str, Enum):
    EASY = "easy"
    MODERATE = "moderate"
    DIFFICULT = "difficult"


# Canonical ordering used for plans, forests and posterior vectors.
TIER_ORDER = (DifficultyTier.EASY, DifficultyTier.MODERATE, DifficultyTier.DIFFICULT)


def tokenize(text: bytes) -> np.ndarray:
    """Map a byte string to token ids (id == byte value)."""
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(TOKEN_DTYPE)


def detokenize(tokens: np.ndarray) -> bytes:
    """Inverse of :func:`tokenize`; special ids (BOS/EOS/PAD) are dropped."""
    arr = np.asarray(tokens)
    return bytes(arr[arr < 256].astype(np.uint8).tobytes())


@dataclass(frozen=True)
class DomainCorpus:
    name: str
    raw_bytes: bytes
    tokens: np.ndarray = field(repr=False)

    @property
    def token_count(self) -> int:
        return int(len(self.tokens))

    @classmethod
    def from_bytes(cls, name: str, raw: bytes) -> "DomainCorpus":
        return cls(name=name, raw_bytes=raw, tokens=tokenize(raw))

    @classmethod
    def from_file(cls, name: str, path: str | Path) -> "DomainCorpus":
        path = Path(path)
        if not path.is_file():
            raise MissingArtifact(f"domain corpus not found: {path}")
        return cls.from_bytes(name, path.read_bytes())

    @classmethod
    def from_tokens(cls, name: str, tokens: np.ndarray) -> "DomainCorpus":
        """Wrap an already-tokenized slice (e.g. one side of a split)."""
        tokens = np.ascontiguousarray(tokens, dtype=TOKEN_DTYPE)
        return cls(name=name, raw_bytes=detokenize(tokens), tokens=tokens)


@dataclass(frozen=True)
class SplitSpec:
    """Parameters of the train/val/test partition.

    The corpus is cut into contiguous blocks of ``block_size`` tokens; the
    trailing ~``holdout_fraction`` of blocks form the holdout, which the rng
    then assigns to val and test (``val_test_ratio`` = fraction going to val).
    """

    holdout_fraction: float = 0.05
    rng_seed: int = 0
    val_test_ratio: float = 0.5
    block_size: int = 128

    def __post_init__(self):
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError(f"holdout_fraction must be in (0,1), got {self.holdout_fraction}")
        if not 0.0 < self.val_test_ratio < 1.0:
            raise ValueError(f"val_test_ratio must be in (0,1), got {self.val_test_ratio}")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")


def split(corpus: DomainCorpus, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic (train, val, test) token partition of a corpus.

    Holdout blocks are anchored at the corpus tail (any partial remainder is
    absorbed into train), so |val| + |test| matches the holdout fraction to
    within one block.
    """
    n = corpus.token_count
    if n < 10.0 / spec.holdout_fraction:
        raise CorpusTooSmall(
            f"corpus {corpus.name!r} has {n} tokens; "
            f"needs at least {10.0 / spec.holdout_fraction:.0f} for holdout_fraction={spec.holdout_fraction}"
        )
    max_blocks = (n - 1) // spec.block_size
    if max_blocks < 1:
        raise CorpusTooSmall(
            f"corpus {corpus.name!r} ({n} tokens) cannot spare one holdout block of {spec.block_size}"
        )

    n_holdout = int(round(spec.holdout_fraction * n / spec.block_size))
    n_holdout = min(max(n_holdout, 1), max_blocks)
    holdout_start = n - n_holdout * spec.block_size
    train = corpus.tokens[:holdout_start]

    rng = np.random.default_rng(spec.rng_seed)
    if n_holdout == 1:
        # Single block: split it at token granularity so both sides exist.
        block = corpus.tokens[holdout_start:]
        cut = int(round(spec.val_test_ratio * len(block)))
        cut = min(max(cut, 1), len(block) - 1)
        return train, block[:cut], block[cut:]

    block_starts = [holdout_start + i * spec.block_size for i in range(n_holdout)]
    order = rng.permutation(n_holdout)
    n_val = min(max(int(round(spec.val_test_ratio * n_holdout)), 1), n_holdout - 1)
    val_idx = sorted(order[:n_val])
    test_idx = sorted(order[n_val:])

    def gather(indices):
        parts = [corpus.tokens[block_starts[i]:block_starts[i] + spec.block_size] for i in indices]
        return np.concatenate(parts)

    return train, gather(val_idx), gather(test_idx)


def batch_iterator(
    tokens: np.ndarray,
    seq_len: int,
    batch_size: int,
    rng_seed: int,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Infinite stream of (input, target) batches with target shifted by one.

    Sampling draws ``batch_size`` random window offsets per step, so the
    stream cycles indefinitely and training length is bounded by iteration
    count rather than epochs. Fully determined by ``rng_seed``.
    """
    n = len(tokens)
    if seq_len >= n:
        raise SequenceTooLong(f"seq_len {seq_len} must be shorter than the corpus ({n} tokens)")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")

    rng = np.random.default_rng(rng_seed)
    tokens = np.ascontiguousarray(tokens, dtype=TOKEN_DTYPE)
    while True:
        offsets = rng.integers(0, n - seq_len, size=batch_size)
        inputs = np.stack([tokens[o:o + seq_len] for o in offsets])
        targets = np.stack([tokens[o + 1:o + seq_len + 1] for o in offsets])
        yield inputs, targets


def classify_difficulty(seed_ppls: dict[str, float]) -> dict[str, DifficultyTier]:
    """Assign Easy/Moderate/Difficult by tertiles of seed perplexity.

    Domains are sorted ascending by perplexity (ties by name) and cut into
    lower/middle/upper tertiles. Order of the input map does not matter.
    """
    if len(seed_ppls) < 3:
        raise TooFewDomains(f"need at least 3 domains, got {len(seed_ppls)}")
    for name, ppl in seed_ppls.items():
        if not np.isfinite(ppl) or ppl <= 1.0:
            raise ValueError(f"perplexity for {name!r} must be finite and > 1, got {ppl}")

    ranked = sorted(seed_ppls, key=lambda name: (seed_ppls[name], name))
    n = len(ranked)
    return {name: TIER_ORDER[rank * 3 // n] for rank, name in enumerate(ranked)}


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    path: str
    tier_override: DifficultyTier | None = None
    kind: str = "trained"
    row: int | None = None

    def load(self) -> DomainCorpus:
        return DomainCorpus.from_file(self.name, self.path)


def load_registry(path: str | Path) -> list[RegistryEntry]:
    """Read the domain registry: a JSON list of domain descriptors.

    Each item is {name, path, tier_override?, kind?, row?}; ``kind`` is
    "trained" (default) or "eval_only", ``row`` pins a trained domain to a
    specific training iteration (1-based). Relative corpus paths are
    resolved against the registry file's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingArtifact(f"domain registry not found: {path}")
    raw = json.loads(path.read_text())
    entries = []
    for item in raw:
        tier = item.get("tier_override")
        kind = item.get("kind", "trained")
        if kind not in ("trained", "eval_only"):
            raise ValueError(f"registry entry {item['name']!r}: unknown kind {kind!r}")
        entries.append(RegistryEntry(
            name=item["name"],
            path=str((path.parent / item["path"]).resolve()),
            tier_override=DifficultyTier(tier) if tier else None,
            kind=kind,
            row=item.get("row"),
        ))
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate domain names in registry {path}")
    return entries


def domain_rows(entries: list[RegistryEntry], row_size: int = 3) -> list[list[RegistryEntry]]:
    """Group trained domains into per-iteration rows of ``row_size``.

    Entries carrying an explicit ``row`` index go to that row; the rest fill
    rows in registry order. Every row must come out exactly ``row_size``
    wide, one domain per tier.
    """
    trained = [e for e in entries if e.kind == "trained"]
    if not trained or len(trained) % row_size != 0:
        raise TooFewDomains(
            f"{len(trained)} trained domains cannot fill rows of {row_size}")
    n_rows = len(trained) // row_size
    rows: list[list[RegistryEntry]] = [[] for _ in range(n_rows)]
    floating = []
    for e in trained:
        if e.row is not None:
            if not 1 <= e.row <= n_rows:
                raise ValueError(f"domain {e.name!r}: row {e.row} outside 1..{n_rows}")
            rows[e.row - 1].append(e)
        else:
            floating.append(e)
    for e in floating:
        target = next((r for r in rows if len(r) < row_size), None)
        if target is None:
            raise ValueError("row assignments overflow the available rows")
        target.append(e)
    for i, r in enumerate(rows):
        if len(r) != row_size:
            raise ValueError(f"iteration row {i + 1} has {len(r)} domains, expected {row_size}")
    return rows
