"""Branch-train-merge orchestration.

A Forest owns one expert per difficulty tier. Each iteration branches every
tier's expert (from its seed on the first iteration, afterwards from the
previous expert's mid-run branch checkpoint), trains the branches fully
independently on that iteration's domain row, and merges the results back.
Training jobs share no state and always run in a process pool, so the
merged forest is a pure function of (seeds, plan, domain rows, data seeds)
and is bitwise independent of the worker count.

Seed checkpoints are lineage roots: their own pretraining run is not
recorded as a lineage entry, so an expert's lineage length equals the
number of BTM iterations behind it.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .budget import BudgetPlan
from .corpus import TIER_ORDER, DifficultyTier, DomainCorpus, batch_iterator
from .ensemble import DomainPrior
from .errors import (DuplicateTier, IterationFailed, LineageMismatch, MissingArtifact,
                     MissingSeed, MissingTier, MissingTierExpert)
from .tinylm import ExpertCheckpoint, ExpertConfig, TrainSchedule, load_checkpoint
from .tinylm.model import init_params
from .tinylm.train import train

MANIFEST_NAME = "forest.json"
MANIFEST_FORMAT = 1


@dataclass
class IterationRecord:
    """Everything one completed iteration produced, keyed by tier."""

    index: int
    domain_row: dict[DifficultyTier, str]
    final_checkpoints: dict[DifficultyTier, ExpertCheckpoint]
    branch_checkpoints: dict[DifficultyTier, ExpertCheckpoint]
    data_seeds: dict[DifficultyTier, int]

    def __post_init__(self):
        for m in (self.domain_row, self.final_checkpoints, self.data_seeds):
            if sorted(m, key=TIER_ORDER.index) != list(TIER_ORDER):
                raise MissingTier(
                    f"iteration {self.index} record must cover every tier exactly once")


@dataclass
class Forest:
    """The expert set plus the plan and bookkeeping needed to grow it."""

    plan: BudgetPlan
    seeds: dict[DifficultyTier, ExpertCheckpoint]
    prior: DomainPrior
    domain_schedule: TrainSchedule
    branch_ratio: float = 2.0 / 3.0
    data_seed: int = 0
    experts: dict[DifficultyTier, ExpertCheckpoint] = field(default_factory=dict)
    history: list[IterationRecord] = field(default_factory=list)

    @property
    def scenario(self) -> str:
        return self.plan.scenario.value

    @property
    def iteration(self) -> int:
        """Number of completed iterations."""
        return len(self.history)

    def members(self) -> list[tuple[str, ExpertCheckpoint]]:
        """(name, checkpoint) per expert in canonical tier order."""
        return [(t.value, self.experts[t]) for t in TIER_ORDER if t in self.experts]

    def domain_tiers(self) -> dict[str, DifficultyTier]:
        """Trained domain name → tier of the expert that saw it."""
        out: dict[str, DifficultyTier] = {}
        for rec in self.history:
            for tier, name in rec.domain_row.items():
                out[name] = tier
        return out


def make_forest(plan: BudgetPlan, seeds: dict[DifficultyTier, ExpertCheckpoint],
                prior: DomainPrior, domain_schedule: TrainSchedule,
                branch_ratio: float = 2.0 / 3.0, data_seed: int = 0) -> Forest:
    """Fresh forest; validates that every tier has a seed of the planned size."""
    for tier in TIER_ORDER:
        if tier not in seeds:
            raise MissingSeed(f"no seed checkpoint for tier {tier.value}")
        if seeds[tier].config != plan.config_for(tier):
            raise MissingSeed(
                f"seed for tier {tier.value} has config {seeds[tier].config}, "
                f"plan expects {plan.config_for(tier)}")
    if not 0.0 < branch_ratio <= 1.0:
        raise ValueError(f"branch_ratio must be in (0, 1], got {branch_ratio}")
    min_iters = min(plan.iterations_for(t) for t in TIER_ORDER)
    if domain_schedule.warmup_steps >= min_iters:
        raise ValueError(
            f"domain schedule warmup {domain_schedule.warmup_steps} must be shorter "
            f"than the smallest tier budget {min_iters}")
    return Forest(plan=plan, seeds=dict(seeds), prior=prior,
                  domain_schedule=domain_schedule, branch_ratio=branch_ratio,
                  data_seed=data_seed)


def pretrain_seed(config: ExpertConfig, schedule: TrainSchedule,
                  tokens: np.ndarray, init_seed: int, data_seed: int = 0) -> ExpertCheckpoint:
    """Train a seed model from fresh parameters; the result is a lineage root."""
    params = init_params(config, seed=init_seed)
    blank = ExpertCheckpoint.create(config, params, 0, ())
    batches = batch_iterator(tokens, seq_len=config.seq_len,
                             batch_size=schedule.batch_size(config.seq_len),
                             rng_seed=data_seed)
    ckpts = train(blank, batches, schedule)
    final = ckpts[max(ckpts)]
    return ExpertCheckpoint.create(config, final.params, final.step, ())


def branch(forest: Forest, tier: DifficultyTier) -> ExpertCheckpoint:
    """Starting checkpoint for the next iteration's expert of ``tier``.

    First iteration: the tier's seed. Later iterations: the tier-matched
    previous expert's branch-step checkpoint, which skips that run's final
    third to avoid overfitting the previous domain.
    """
    if forest.iteration == 0:
        seed = forest.seeds.get(tier)
        if seed is None:
            raise MissingSeed(f"no seed checkpoint for tier {tier.value}")
        return seed.with_tier(tier)
    record = forest.history[-1]
    ckpt = record.branch_checkpoints.get(tier)
    if ckpt is None:
        raise MissingTierExpert(
            f"iteration {record.index} recorded no branch checkpoint for tier {tier.value}")
    return ckpt


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed from string-able parts, stable across processes."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class TrainJob:
    tier: DifficultyTier
    domain: str
    start: ExpertCheckpoint
    steps: int
    schedule: TrainSchedule
    branch_step: int
    train_tokens: np.ndarray
    data_seed: int
    iteration: int


@dataclass
class TierResult:
    tier: DifficultyTier
    domain: str
    data_seed: int
    final: ExpertCheckpoint
    branch_point: ExpertCheckpoint


def _run_job(job: TrainJob) -> TierResult:
    batches = batch_iterator(job.train_tokens, seq_len=job.start.config.seq_len,
                             batch_size=job.schedule.batch_size(job.start.config.seq_len),
                             rng_seed=job.data_seed)
    ckpts = train(job.start, batches, job.schedule, {job.branch_step},
                  iteration=job.iteration, domain=job.domain)
    return TierResult(tier=job.tier, domain=job.domain, data_seed=job.data_seed,
                      final=ckpts[job.schedule.total_steps],
                      branch_point=ckpts[job.branch_step])


def _build_jobs(forest: Forest, domain_row: dict[DifficultyTier, DomainCorpus]) -> list[TrainJob]:
    if sorted(domain_row, key=TIER_ORDER.index) != list(TIER_ORDER):
        raise MissingTier("domain row must assign exactly one domain per tier")
    iteration = forest.iteration + 1
    jobs = []
    for tier in TIER_ORDER:
        corpus = domain_row[tier]
        steps = forest.plan.iterations_for(tier)
        schedule = replace(forest.domain_schedule, total_steps=steps)
        branch_step = max(1, round(steps * forest.branch_ratio))
        jobs.append(TrainJob(
            tier=tier, domain=corpus.name, start=branch(forest, tier), steps=steps,
            schedule=schedule, branch_step=branch_step, train_tokens=corpus.tokens,
            data_seed=stable_seed(forest.data_seed, iteration, tier.value, corpus.name),
            iteration=iteration))
    return jobs


def train_iteration(forest: Forest, domain_row: dict[DifficultyTier, DomainCorpus],
                    worker_count: int = 1) -> Forest:
    """Run one full BTM iteration and return the merged forest.

    One training job per tier, executed in a process pool of
    ``worker_count`` workers. Sibling jobs always run to completion even
    when one fails, so a failed iteration can be diagnosed per tier; the
    forest is left untouched unless every tier succeeds.
    """
    if worker_count < 1:
        raise ValueError("worker_count must be positive")
    jobs = _build_jobs(forest, domain_row)
    results: dict[DifficultyTier, TierResult] = {}
    failures: dict[str, str] = {}
    with ProcessPoolExecutor(max_workers=worker_count) as pool:
        futures = {job.tier: pool.submit(_run_job, job) for job in jobs}
        for tier in TIER_ORDER:
            try:
                results[tier] = futures[tier].result()
            except Exception as err:  # noqa: BLE001 - collected per tier
                failures[tier.value] = f"{type(err).__name__}: {err}"
    if failures:
        raise IterationFailed(
            f"iteration {forest.iteration + 1} failed for tiers {sorted(failures)}",
            failures=failures)
    return merge(forest, [results[t].final for t in TIER_ORDER],
                 branch_points={t: results[t].branch_point for t in TIER_ORDER},
                 data_seeds={t: results[t].data_seed for t in TIER_ORDER})


def merge(forest: Forest, trained: list[ExpertCheckpoint],
          branch_points: dict[DifficultyTier, ExpertCheckpoint] | None = None,
          data_seeds: dict[DifficultyTier, int] | None = None) -> Forest:
    """Fold one iteration's trained experts into a new forest.

    ``trained`` carries one checkpoint per tier (identified by its config
    tier annotation). Each checkpoint's lineage must point at the branch
    source this forest would have used, otherwise the merge refuses the
    foreign history. Without ``branch_points`` the new record cannot seed a
    further iteration, but evaluation works.
    """
    by_tier: dict[DifficultyTier, ExpertCheckpoint] = {}
    for ckpt in trained:
        tier = ckpt.config.tier
        if tier is None:
            raise MissingTier(f"checkpoint {ckpt.short_id()} carries no tier annotation")
        if tier in by_tier:
            raise DuplicateTier(f"two checkpoints claim tier {tier.value}")
        by_tier[tier] = ckpt
    for tier in TIER_ORDER:
        if tier not in by_tier:
            raise MissingTier(f"merge is missing a checkpoint for tier {tier.value}")

    iteration = forest.iteration + 1
    domain_row: dict[DifficultyTier, str] = {}
    for tier, ckpt in by_tier.items():
        if len(ckpt.lineage) != iteration:
            raise LineageMismatch(
                f"tier {tier.value} checkpoint has {len(ckpt.lineage)} lineage entries; "
                f"iteration {iteration} expects exactly {iteration}")
        expected_parent = branch(forest, tier).checkpoint_id
        tail = ckpt.lineage[-1]
        if tail.parent_id != expected_parent:
            raise LineageMismatch(
                f"tier {tier.value} checkpoint branched from {tail.parent_id[:12]}, "
                f"but this forest's branch source is {expected_parent[:12]}")
        if tail.iteration != iteration:
            raise LineageMismatch(
                f"tier {tier.value} checkpoint was trained as iteration {tail.iteration}, "
                f"expected {iteration}")
        domain_row[tier] = tail.domain

    record = IterationRecord(
        index=iteration,
        domain_row=domain_row,
        final_checkpoints=dict(by_tier),
        branch_checkpoints=dict(branch_points) if branch_points else {},
        data_seeds=dict(data_seeds) if data_seeds else {t: -1 for t in TIER_ORDER})
    return Forest(plan=forest.plan, seeds=forest.seeds, prior=forest.prior,
                  domain_schedule=forest.domain_schedule,
                  branch_ratio=forest.branch_ratio, data_seed=forest.data_seed,
                  experts=dict(by_tier), history=forest.history + [record])


def verify_lineage(forest: Forest) -> None:
    """Assert the lineage chain across the whole history; raises on breakage."""
    for k, rec in enumerate(forest.history):
        for tier in TIER_ORDER:
            final = rec.final_checkpoints[tier]
            if k == 0:
                expected = forest.seeds[tier].checkpoint_id
            else:
                prev = forest.history[k - 1].branch_checkpoints.get(tier)
                if prev is None:
                    raise LineageMismatch(
                        f"iteration {k} recorded no branch checkpoint for {tier.value}")
                expected = prev.checkpoint_id
            if final.lineage[-1].parent_id != expected:
                raise LineageMismatch(
                    f"iteration {rec.index} tier {tier.value}: lineage parent "
                    f"{final.lineage[-1].parent_id[:12]} != branch source {expected[:12]}")
            br = rec.branch_checkpoints.get(tier)
            if br is not None and br.lineage != final.lineage:
                raise LineageMismatch(
                    f"iteration {rec.index} tier {tier.value}: branch checkpoint lineage "
                    "diverges from the final checkpoint")
    for tier, expert in forest.experts.items():
        if forest.history and expert.checkpoint_id != \
                forest.history[-1].final_checkpoints[tier].checkpoint_id:
            raise LineageMismatch(f"expert for {tier.value} is not the last merged result")


def forest_at(forest: Forest, iteration: int, eval_step: int | None = None) -> Forest:
    """View of the forest as of a completed ``iteration`` (1-based).

    ``eval_step`` swaps each expert for the checkpoint recorded at that step
    in the iteration (the branch-step checkpoint, typically), instead of the
    final one.
    """
    if not 1 <= iteration <= forest.iteration:
        raise MissingArtifact(
            f"iteration {iteration} not available; forest has {forest.iteration}")
    record = forest.history[iteration - 1]
    experts: dict[DifficultyTier, ExpertCheckpoint] = {}
    for tier in TIER_ORDER:
        candidates = [record.final_checkpoints[tier]]
        if tier in record.branch_checkpoints:
            candidates.append(record.branch_checkpoints[tier])
        if eval_step is None:
            experts[tier] = candidates[0]
        else:
            match = next((c for c in candidates if c.step == eval_step), None)
            if match is None:
                raise MissingArtifact(
                    f"iteration {iteration} tier {tier.value} has no checkpoint at "
                    f"step {eval_step}; recorded steps: {[c.step for c in candidates]}")
            experts[tier] = match
    return Forest(plan=forest.plan, seeds=forest.seeds, prior=forest.prior,
                  domain_schedule=forest.domain_schedule,
                  branch_ratio=forest.branch_ratio, data_seed=forest.data_seed,
                  experts=experts, history=forest.history[:iteration])


def _ckpt_relpath(ckpt: ExpertCheckpoint) -> str:
    return f"checkpoints/{ckpt.checkpoint_id[:16]}.ckpt"


def save_forest(forest: Forest, out_dir: str | Path) -> Path:
    """Write the manifest and all reachable checkpoints under ``out_dir``.

    Checkpoint files are content-addressed (named by id), so re-saving an
    unchanged forest rewrites nothing and the manifest bytes are a pure
    function of the forest. All paths inside the manifest are relative.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def store(ckpt: ExpertCheckpoint) -> str:
        rel = _ckpt_relpath(ckpt)
        target = out_dir / rel
        if not target.exists():
            ckpt.save(target)
        return rel

    manifest = {
        "format": MANIFEST_FORMAT,
        "plan": forest.plan.to_dict(),
        "prior": forest.prior.to_dict(),
        "domain_schedule": forest.domain_schedule.to_dict(),
        "branch_ratio": forest.branch_ratio,
        "data_seed": forest.data_seed,
        "seeds": {t.value: store(c) for t, c in forest.seeds.items()},
        "experts": {t.value: store(c) for t, c in forest.experts.items()},
        "history": [
            {
                "index": rec.index,
                "domain_row": {t.value: d for t, d in rec.domain_row.items()},
                "data_seeds": {t.value: s for t, s in rec.data_seeds.items()},
                "final": {t.value: store(c) for t, c in rec.final_checkpoints.items()},
                "branch": {t.value: store(c) for t, c in rec.branch_checkpoints.items()},
            }
            for rec in forest.history
        ],
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def load_forest(path: str | Path) -> Forest:
    """Rebuild a forest from a manifest file or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise MissingArtifact(f"forest manifest not found: {path}")
    doc = json.loads(path.read_text())
    base = path.parent

    def fetch(rel: str) -> ExpertCheckpoint:
        return load_checkpoint(base / rel)

    history = []
    for rec in doc["history"]:
        history.append(IterationRecord(
            index=rec["index"],
            domain_row={DifficultyTier(t): d for t, d in rec["domain_row"].items()},
            final_checkpoints={DifficultyTier(t): fetch(p) for t, p in rec["final"].items()},
            branch_checkpoints={DifficultyTier(t): fetch(p) for t, p in rec["branch"].items()},
            data_seeds={DifficultyTier(t): s for t, s in rec["data_seeds"].items()}))
    return Forest(
        plan=BudgetPlan.from_dict(doc["plan"]),
        seeds={DifficultyTier(t): fetch(p) for t, p in doc["seeds"].items()},
        prior=DomainPrior.from_dict(doc["prior"]),
        domain_schedule=TrainSchedule.from_dict(doc["domain_schedule"]),
        branch_ratio=doc["branch_ratio"],
        data_seed=doc["data_seed"],
        experts={DifficultyTier(t): fetch(p) for t, p in doc["experts"].items()},
        history=history)
