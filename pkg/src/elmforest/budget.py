"""Equal-compute budgeting across heterogeneity scenarios.

A setup fixes three reference model sizes (S, M, L by feed-forward
workload) and a moderate-tier iteration count. The workload equalities
``ffn_S * iter_M = ffn_M * iter_S`` and ``ffn_L * iter_M = ffn_M * iter_L``
tie the size spread to an iteration spread so that every scenario built
from the setup spends the same compute per tier: MHeIHo trains the size
spread for iter_M steps each, MHoIHe trains the moderate size for the
iteration spread, and MHoIHo is the homogeneous baseline. Verification
reports how far the rounded iteration counts drift from exact equality.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .corpus import TIER_ORDER, DifficultyTier
from .errors import BudgetViolation, InconsistentScenario, MissingTier, ZeroFfn
from .tinylm import ExpertConfig
from .tinylm.model import ffn_param_count


class Scenario(str, Enum):
    MHOIHO = "MHoIHo"
    MHOIHE = "MHoIHe"
    MHEIHO = "MHeIHo"


def ffn_total(config: ExpertConfig) -> int:
    """Total SwiGLU parameter elements: num_layers * 3 * hidden * intermediate."""
    total = ffn_param_count(config)
    if total <= 0:
        raise ZeroFfn(f"config {config} has non-positive FFN workload")
    return total


@dataclass(frozen=True)
class FfnWorkload:
    config: ExpertConfig
    ffn_total: int

    @classmethod
    def of(cls, config: ExpertConfig) -> "FfnWorkload":
        return cls(config=config, ffn_total=ffn_total(config))


def _round_to_granularity(numer: int, denom: int, granularity: int) -> int:
    # round-half-up of (numer/denom)/granularity in exact integer arithmetic,
    # clamped to at least one granularity multiple.
    multiples = (2 * numer + denom * granularity) // (2 * denom * granularity)
    return max(1, multiples) * granularity


def solve_iterations(ffn_s: int, ffn_m: int, ffn_l: int, iter_m: int,
                     granularity: int = 100) -> tuple[int, int]:
    """Iteration counts for the S and L tiers matching the M-tier budget.

    iter_x = round(iter_m * ffn_x / ffn_m) to the nearest ``granularity``
    multiple (minimum one multiple). Exact in integer arithmetic, so scaling
    all three workloads by a common factor never changes the result.
    """
    for name, value in (("ffn_s", ffn_s), ("ffn_m", ffn_m), ("ffn_l", ffn_l)):
        if value <= 0:
            raise ZeroFfn(f"{name} must be positive, got {value}")
    if iter_m <= 0 or granularity <= 0:
        raise ValueError("iter_m and granularity must be positive")
    iter_s = _round_to_granularity(iter_m * ffn_s, ffn_m, granularity)
    iter_l = _round_to_granularity(iter_m * ffn_l, ffn_m, granularity)
    return iter_s, iter_l


@dataclass(frozen=True)
class TierAssignment:
    config: ExpertConfig
    iterations: int


@dataclass(frozen=True)
class BudgetReport:
    deviation_s: float
    deviation_l: float
    tolerance: float

    @property
    def deviations(self) -> tuple[float, float]:
        return (self.deviation_s, self.deviation_l)

    @property
    def passed(self) -> bool:
        return self.deviation_s <= self.tolerance and self.deviation_l <= self.tolerance


@dataclass(frozen=True)
class BudgetPlan:
    """Scenario plus per-tier training assignments.

    ``reference_configs`` and ``reference_iterations`` record the setup's
    size and iteration spreads (the quantities the workload equalities
    constrain); ``assignments`` is what actually gets trained. For the
    homogeneous baseline both spreads collapse to the moderate entry.
    """

    scenario: Scenario
    assignments: dict[DifficultyTier, TierAssignment]
    reference_configs: dict[DifficultyTier, ExpertConfig]
    reference_iterations: dict[DifficultyTier, int]
    tolerance: float = 0.05

    def __post_init__(self):
        for tier in TIER_ORDER:
            if tier not in self.assignments:
                raise MissingTier(f"plan is missing an assignment for tier {tier.value}")
        configs = [self.assignments[t].config for t in TIER_ORDER]
        iters = [self.assignments[t].iterations for t in TIER_ORDER]
        if any(i < 1 for i in iters):
            raise ValueError("assignment iteration counts must be positive")
        if self.scenario is Scenario.MHOIHO:
            if not (configs[0] == configs[1] == configs[2] and iters[0] == iters[1] == iters[2]):
                raise InconsistentScenario(
                    "MHoIHo requires identical configs and identical iteration counts")
        elif self.scenario is Scenario.MHOIHE:
            if not configs[0] == configs[1] == configs[2]:
                raise InconsistentScenario("MHoIHe requires identical configs across tiers")
        elif self.scenario is Scenario.MHEIHO:
            if not iters[0] == iters[1] == iters[2]:
                raise InconsistentScenario("MHeIHo requires identical iteration counts")

    def iterations_for(self, tier: DifficultyTier) -> int:
        return self.assignments[tier].iterations

    def config_for(self, tier: DifficultyTier) -> ExpertConfig:
        return self.assignments[tier].config

    def size_names(self) -> dict[DifficultyTier, str]:
        from .catalog import MODEL_SIZES
        by_config = {cfg: name for name, cfg in MODEL_SIZES.items()}
        return {t: by_config.get(self.assignments[t].config, "custom") for t in TIER_ORDER}

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.value,
            "tolerance": self.tolerance,
            "assignments": {
                t.value: {"config": a.config.to_dict(), "iterations": a.iterations}
                for t, a in self.assignments.items()},
            "reference_configs": {
                t.value: c.to_dict() for t, c in self.reference_configs.items()},
            "reference_iterations": {
                t.value: i for t, i in self.reference_iterations.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BudgetPlan":
        return cls(
            scenario=Scenario(d["scenario"]),
            assignments={
                DifficultyTier(t): TierAssignment(
                    config=ExpertConfig.from_dict(a["config"], tier=DifficultyTier(t)),
                    iterations=a["iterations"])
                for t, a in d["assignments"].items()},
            reference_configs={
                DifficultyTier(t): ExpertConfig.from_dict(c)
                for t, c in d["reference_configs"].items()},
            reference_iterations={
                DifficultyTier(t): i for t, i in d["reference_iterations"].items()},
            tolerance=d["tolerance"],
        )


def verify_budget(plan: BudgetPlan) -> BudgetReport:
    """Relative drift of the S and L budget products from the M reference.

    deviation_x = |ffn_x * iter_m - ffn_m * iter_x| / (ffn_m * iter_x),
    computed over the plan's reference spreads. Passes when both are within
    ``plan.tolerance``.
    """
    for tier in TIER_ORDER:
        if tier not in plan.reference_configs or tier not in plan.reference_iterations:
            raise MissingTier(f"plan is missing reference entries for tier {tier.value}")
    ffn = {t: ffn_total(plan.reference_configs[t]) for t in TIER_ORDER}
    iters = dict(plan.reference_iterations)
    easy, mod, diff = TIER_ORDER

    def deviation(tier: DifficultyTier) -> float:
        lhs = ffn[tier] * iters[mod]
        rhs = ffn[mod] * iters[tier]
        return abs(lhs - rhs) / rhs

    return BudgetReport(deviation_s=deviation(easy), deviation_l=deviation(diff),
                        tolerance=plan.tolerance)


def make_plan(scenario: Scenario | str, tier_configs: dict[DifficultyTier, ExpertConfig],
              iter_m: int, granularity: int = 100,
              tolerance: float = 0.05) -> BudgetPlan:
    """Build a verified plan from a scenario and per-tier reference configs.

    MHoIHo needs only the moderate config (all tiers train it for iter_m
    steps); the heterogeneous scenarios need all three reference sizes. Any
    extra configs passed for MHoIHo must equal the moderate one. Raises
    :class:`BudgetViolation` if the solved plan fails verification.
    """
    scenario = Scenario(scenario)
    if DifficultyTier.MODERATE not in tier_configs:
        raise MissingTier("tier_configs must include the moderate tier")
    config_m = tier_configs[DifficultyTier.MODERATE]
    for tier, cfg in tier_configs.items():
        if (cfg.vocab_size, cfg.seq_len) != (config_m.vocab_size, config_m.seq_len):
            raise InconsistentScenario(
                f"tier {tier.value} config disagrees on vocab_size/seq_len; "
                "all experts must share a token space")

    if scenario is Scenario.MHOIHO:
        if any(cfg != config_m for cfg in tier_configs.values()):
            raise InconsistentScenario("MHoIHo takes a single config for every tier")
        reference_configs = {t: config_m for t in TIER_ORDER}
        reference_iterations = {t: iter_m for t in TIER_ORDER}
        assignments = {t: TierAssignment(config_m.with_tier(t), iter_m) for t in TIER_ORDER}
    else:
        missing = [t.value for t in TIER_ORDER if t not in tier_configs]
        if missing:
            raise MissingTier(
                f"{scenario.value} needs all three reference sizes; missing {missing}")
        reference_configs = {t: tier_configs[t] for t in TIER_ORDER}
        ffn = {t: ffn_total(tier_configs[t]) for t in TIER_ORDER}
        easy, mod, diff = TIER_ORDER
        iter_s, iter_l = solve_iterations(ffn[easy], ffn[mod], ffn[diff],
                                          iter_m, granularity)
        reference_iterations = {easy: iter_s, mod: iter_m, diff: iter_l}
        if scenario is Scenario.MHOIHE:
            assignments = {t: TierAssignment(config_m.with_tier(t), reference_iterations[t])
                           for t in TIER_ORDER}
        else:
            assignments = {t: TierAssignment(tier_configs[t].with_tier(t), iter_m)
                           for t in TIER_ORDER}

    plan = BudgetPlan(scenario=scenario, assignments=assignments,
                      reference_configs=reference_configs,
                      reference_iterations=reference_iterations,
                      tolerance=tolerance)
    report = verify_budget(plan)
    if not report.passed:
        raise BudgetViolation(
            f"solved plan misses the compute budget: deviations "
            f"{report.deviation_s:.4f}/{report.deviation_l:.4f} exceed tolerance {tolerance}")
    return plan
