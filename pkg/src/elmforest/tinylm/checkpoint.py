"""Content-addressed expert checkpoints.

A checkpoint is an architecture config, a parameter blob, a step count,
and a lineage trail recording which parent checkpoint each training run
branched from. The file format is a small JSON header followed by the raw
float32 parameter tensors concatenated in canonical order, little-endian.
The checkpoint id is a sha256 over the canonical header fields plus the
blob, so two checkpoints with bitwise-identical content always share an id.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..corpus import DifficultyTier
from ..errors import DimensionMismatch, MissingArtifact
from .config import ExpertConfig
from .model import ModelParams, next_token_logprobs, position_logprobs, tensor_shapes, validate_params

MAGIC = b"ELMF"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LineageEntry:
    """One training run in a checkpoint's ancestry."""

    iteration: int
    domain: str
    parent_id: str

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "domain": self.domain,
                "parent_id": self.parent_id}

    @classmethod
    def from_dict(cls, d: dict) -> "LineageEntry":
        return cls(iteration=d["iteration"], domain=d["domain"], parent_id=d["parent_id"])


def _canonical_header(config: ExpertConfig, step: int,
                      lineage: tuple[LineageEntry, ...]) -> bytes:
    # tier is deliberately excluded: the same bytes must hash identically
    # regardless of which tier a plan later assigns them to.
    doc = {
        "config": config.to_dict(),
        "step": step,
        "lineage": [e.to_dict() for e in lineage],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def _params_blob(config: ExpertConfig, params: ModelParams) -> bytes:
    parts = []
    for name, _ in tensor_shapes(config):
        parts.append(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return b"".join(parts)


@dataclass(frozen=True)
class ExpertCheckpoint:
    config: ExpertConfig
    params: ModelParams = field(repr=False, compare=False)
    step: int
    lineage: tuple[LineageEntry, ...]
    checkpoint_id: str

    @classmethod
    def create(cls, config: ExpertConfig, params: ModelParams, step: int,
               lineage: tuple[LineageEntry, ...] = ()) -> "ExpertCheckpoint":
        validate_params(config, params)
        if step < 0:
            raise ValueError("step must be non-negative")
        lineage = tuple(lineage)
        blob = _params_blob(config, params)
        digest = hashlib.sha256(_canonical_header(config, step, lineage)
                                + b"\x00" + blob).hexdigest()
        frozen = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in params.items()}
        return cls(config=config, params=frozen, step=step, lineage=lineage,
                   checkpoint_id=digest)

    def with_tier(self, tier: DifficultyTier | None) -> "ExpertCheckpoint":
        """Same content, re-annotated with a plan tier. The id is unchanged."""
        return ExpertCheckpoint(config=self.config.with_tier(tier), params=self.params,
                                step=self.step, lineage=self.lineage,
                                checkpoint_id=self.checkpoint_id)

    def short_id(self) -> str:
        return self.checkpoint_id[:12]

    def next_token_logprobs(self, context: np.ndarray) -> np.ndarray:
        return next_token_logprobs(self.config, self.params, context)

    def position_logprobs(self, tokens: np.ndarray) -> np.ndarray:
        return position_logprobs(self.config, self.params, tokens)

    def serialize(self) -> bytes:
        header = {
            "format": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "tier": self.config.tier.value if self.config.tier else None,
            "step": self.step,
            "lineage": [e.to_dict() for e in self.lineage],
            "checkpoint_id": self.checkpoint_id,
        }
        hbytes = json.dumps(header, sort_keys=True).encode()
        blob = _params_blob(self.config, self.params)
        return MAGIC + len(hbytes).to_bytes(4, "little") + hbytes + blob

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.serialize())
        return path


def deserialize_checkpoint(data: bytes) -> ExpertCheckpoint:
    if data[:4] != MAGIC:
        raise DimensionMismatch("not a checkpoint file (bad magic)")
    hlen = int.from_bytes(data[4:8], "little")
    header = json.loads(data[8:8 + hlen].decode())
    tier = DifficultyTier(header["tier"]) if header.get("tier") else None
    config = ExpertConfig.from_dict(header["config"], tier=tier)
    blob = data[8 + hlen:]
    params: ModelParams = {}
    offset = 0
    for name, shape in tensor_shapes(config):
        n = int(np.prod(shape))
        chunk = blob[offset:offset + 4 * n]
        if len(chunk) != 4 * n:
            raise DimensionMismatch(
                f"checkpoint blob truncated at tensor {name}: "
                f"needed {4 * n} bytes, got {len(chunk)}")
        params[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += 4 * n
    if offset != len(blob):
        raise DimensionMismatch(f"checkpoint blob has {len(blob) - offset} trailing bytes")
    lineage = tuple(LineageEntry.from_dict(e) for e in header["lineage"])
    ckpt = ExpertCheckpoint.create(config, params, header["step"], lineage)
    if ckpt.checkpoint_id != header["checkpoint_id"]:
        raise DimensionMismatch(
            f"checkpoint id mismatch: header says {header['checkpoint_id'][:12]}, "
            f"content hashes to {ckpt.checkpoint_id[:12]}")
    return ckpt


def load_checkpoint(path: str | Path) -> ExpertCheckpoint:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifact(f"checkpoint file not found: {path}")
    return deserialize_checkpoint(path.read_bytes())
