"""Synthetic byte-domain generators with controllable difficulty.

Domains draw from disjoint byte alphabets so that a model trained on one
domain is near-useless on another, which makes posterior routing sharply
testable. Three profiles span the difficulty axis:

- cyclic: a repeated short pattern with a small substitution rate
  (near-deterministic, lowest entropy)
- markov: a sparse random walk, each symbol followed by one of ``branching``
  successors chosen uniformly (entropy ~= log2(branching) bits/byte)
- uniform: i.i.d. over the alphabet (highest entropy)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import DomainCorpus

PROFILES = ("cyclic", "markov", "uniform")


def alphabet_for(slot: int, size: int = 24) -> bytes:
    """Disjoint byte ranges: slot i owns [i*32, i*32 + size), size <= 32."""
    if not 0 <= slot < 8:
        raise ValueError("slot must be in 0..7")
    if not 1 <= size <= 32:
        raise ValueError("alphabet size must be in 1..32")
    return bytes(range(slot * 32, slot * 32 + size))


def cyclic_bytes(rng: np.random.Generator, n: int, alphabet: bytes,
                 period: int = 17, noise: float = 0.02) -> bytes:
    pattern = rng.choice(np.frombuffer(alphabet, dtype=np.uint8), size=period)
    reps = n // period + 1
    out = np.tile(pattern, reps)[:n]
    mask = rng.random(n) < noise
    out[mask] = rng.choice(np.frombuffer(alphabet, dtype=np.uint8), size=int(mask.sum()))
    return out.tobytes()


def markov_bytes(rng: np.random.Generator, n: int, alphabet: bytes,
                 branching: int = 4) -> bytes:
    symbols = np.frombuffer(alphabet, dtype=np.uint8)
    k = len(symbols)
    if not 1 <= branching <= k:
        raise ValueError(f"branching must be in 1..{k}")
    successors = np.stack([rng.permutation(k)[:branching] for _ in range(k)])
    choices = rng.integers(0, branching, size=n)
    out = np.empty(n, dtype=np.int64)
    state = int(rng.integers(0, k))
    for i in range(n):
        state = int(successors[state, choices[i]])
        out[i] = state
    return symbols[out].tobytes()


def uniform_bytes(rng: np.random.Generator, n: int, alphabet: bytes) -> bytes:
    symbols = np.frombuffer(alphabet, dtype=np.uint8)
    return rng.choice(symbols, size=n).tobytes()


@dataclass(frozen=True)
class DomainSpec:
    name: str
    profile: str
    slot: int
    kind: str = "trained"
    row: int | None = None
    alphabet_size: int = 24
    noise: float = 0.02
    branching: int = 4


def generate_domain(spec: DomainSpec, size_bytes: int, seed: int) -> DomainCorpus:
    rng = np.random.default_rng(seed)
    alphabet = alphabet_for(spec.slot, spec.alphabet_size)
    if spec.profile == "cyclic":
        raw = cyclic_bytes(rng, size_bytes, alphabet, noise=spec.noise)
    elif spec.profile == "markov":
        raw = markov_bytes(rng, size_bytes, alphabet, branching=spec.branching)
    elif spec.profile == "uniform":
        raw = uniform_bytes(rng, size_bytes, alphabet)
    else:
        raise ValueError(f"unknown profile {spec.profile!r}; known: {PROFILES}")
    return DomainCorpus.from_bytes(spec.name, raw)


def demo_specs(rows: int = 1) -> list[DomainSpec]:
    """Per-row trained domains (one per difficulty flavor) plus eval-only ones.

    Rows reuse the same three alphabets with fresh generator draws, so tier
    membership stays stable across iterations while the content changes. Every
    trained profile is structured: on pure-uniform bytes the matched expert has
    nothing to learn beyond the marginal, so the posterior cannot lock onto it.
    """
    specs = []
    for r in range(1, rows + 1):
        specs.append(DomainSpec(name=f"cycles-{r}", profile="cyclic", slot=0, row=r))
        specs.append(DomainSpec(name=f"walks-{r}", profile="markov", slot=1, row=r))
        specs.append(DomainSpec(name=f"bursts-{r}", profile="markov", slot=2,
                                branching=8, row=r))
    specs.append(DomainSpec(name="walks-unseen", profile="markov", slot=3, kind="eval_only"))
    specs.append(DomainSpec(name="cycles-unseen", profile="cyclic", slot=0, kind="eval_only"))
    return specs


def write_demo_corpus(out_dir: str | Path, rows: int = 1, kib_per_domain: int = 200,
                      seed: int = 0) -> Path:
    """Write demo domain files and a registry under ``out_dir``; returns the registry path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, spec in enumerate(demo_specs(rows)):
        corpus = generate_domain(spec, kib_per_domain * 1024, seed=seed * 1000 + i)
        fname = f"{spec.name}.bytes"
        (out_dir / fname).write_bytes(corpus.raw_bytes)
        entry = {"name": spec.name, "path": fname, "kind": spec.kind}
        if spec.row is not None:
            entry["row"] = spec.row
        entries.append(entry)
    registry = out_dir / "registry.json"
    registry.write_text(json.dumps(entries, indent=2) + "\n")
    return registry


if __name__ == "__main__":
    rng = np.random.default_rng(0)
    for profile, gen in (("cyclic", cyclic_bytes), ("markov", markov_bytes),
                         ("uniform", uniform_bytes)):
        data = np.frombuffer(gen(rng, 50_000, alphabet_for(0)), dtype=np.uint8)
        _, counts = np.unique(data, return_counts=True)
        p = counts / counts.sum()
        print(f"{profile}: unigram entropy {-np.sum(p * np.log2(p)):.2f} bits/byte")
