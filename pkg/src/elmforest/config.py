"""Experiment configuration: one YAML file drives the whole pipeline.

Overrides stack in order: file values, then environment variables
(``ELMFOREST_SECTION__KEY``, double underscore per nesting level), then
``--set section.key=value`` flags. Every applied override is recorded so
each artifact can carry full provenance. The budget plan is built and
verified at load time, before anything trains.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .budget import BudgetPlan, Scenario, make_plan
from .catalog import MODEL_SIZES
from .corpus import TIER_ORDER, DifficultyTier, SplitSpec
from .ensemble import DomainPrior
from .errors import ConfigInvalid
from .tinylm import ExpertConfig, TrainSchedule

ENV_PREFIX = "ELMFOREST_"

DEFAULTS: dict = {
    "setup": "desk",
    "scenario": "MHoIHo",
    "sizes": None,
    "iter_m": 400,
    "granularity": 100,
    "tolerance": 0.05,
    "branch_ratio": 2.0 / 3.0,
    "registry": "registry.json",
    "out_dir": "runs/default",
    "prior": "uniform",
    "seeds": {"init": 1234, "data": 7},
    "split": {"holdout_fraction": 0.05, "block_size": 128, "rng_seed": 0,
              "val_test_ratio": 0.5},
    "pretrain": {"total_steps": 300, "warmup_steps": 30, "max_lr": 0.005,
                 "min_lr": None, "batch_tokens": 2048},
    "domain": {"warmup_steps": 20, "max_lr": 0.0005, "min_lr": None,
               "batch_tokens": 2048},
    "eval": {"max_tokens": 4096, "classify_tokens": 2048},
}


def _deep_update(base: dict, incoming: dict, path: str = "") -> None:
    for key, value in incoming.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigInvalid(f"unknown config key {here!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _deep_update(base[key], value, here)
        else:
            base[key] = value


def _set_path(doc: dict, dotted: str, raw_value: str) -> None:
    value = yaml.safe_load(raw_value)
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigInvalid(f"override path {dotted!r} does not exist")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigInvalid(f"override path {dotted!r} does not exist")
    node[keys[-1]] = value


def _env_overrides(doc: dict, env: dict) -> list[str]:
    applied = []
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX):].lower().replace("__", ".")
        _set_path(doc, dotted, raw)
        applied.append(f"env:{name}={raw}")
    return applied


def _parse_size(value, where: str) -> ExpertConfig:
    if isinstance(value, str):
        if value not in MODEL_SIZES:
            raise ConfigInvalid(f"{where}: unknown model size name {value!r}")
        return MODEL_SIZES[value]
    if isinstance(value, dict):
        try:
            return ExpertConfig.from_dict({
                "vocab_size": value.get("vocab_size", 259),
                "seq_len": value.get("seq_len", 128),
                **{k: value[k] for k in ("hidden_size", "intermediate_size",
                                         "num_heads", "num_layers")}})
        except (KeyError, ValueError) as err:
            raise ConfigInvalid(f"{where}: bad inline model config: {err}") from err
    raise ConfigInvalid(f"{where}: expected a size name or a config mapping")


@dataclass
class ExperimentConfig:
    setup: str
    scenario: Scenario
    tier_configs: dict[DifficultyTier, ExpertConfig]
    iter_m: int
    granularity: int
    tolerance: float
    branch_ratio: float
    registry_path: Path
    out_dir: Path
    prior: DomainPrior
    init_seed: int
    data_seed: int
    split_spec: SplitSpec
    pretrain_schedule: TrainSchedule
    domain_template: TrainSchedule
    eval_max_tokens: int | None
    classify_tokens: int
    overrides: list[str] = field(default_factory=list)

    def plan(self) -> BudgetPlan:
        return make_plan(self.scenario, self.tier_configs, self.iter_m,
                         granularity=self.granularity, tolerance=self.tolerance)

    def provenance(self) -> dict:
        return {"setup": self.setup, "scenario": self.scenario.value,
                "overrides": list(self.overrides)}


def load_config(path: str | Path, env: dict | None = None,
                set_flags: list[str] | None = None,
                out_dir_flag: str | None = None) -> ExperimentConfig:
    """Parse, override, and validate an experiment config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigInvalid(f"config file not found: {path}")
    try:
        file_doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as err:
        raise ConfigInvalid(f"config does not parse: {err}") from err
    if not isinstance(file_doc, dict):
        raise ConfigInvalid("config root must be a mapping")

    doc = copy.deepcopy(DEFAULTS)
    try:
        _deep_update(doc, file_doc)
    except ConfigInvalid:
        raise
    overrides = _env_overrides(doc, env if env is not None else dict(os.environ))
    for flag in set_flags or []:
        if "=" not in flag:
            raise ConfigInvalid(f"--set expects key.path=value, got {flag!r}")
        dotted, raw_value = flag.split("=", 1)
        _set_path(doc, dotted, raw_value)
        overrides.append(f"flag:{flag}")
    if out_dir_flag:
        doc["out_dir"] = out_dir_flag
        overrides.append(f"flag:--out-dir={out_dir_flag}")

    return _build(doc, config_dir=path.parent, overrides=overrides)


def _build(doc: dict, config_dir: Path, overrides: list[str]) -> ExperimentConfig:
    try:
        scenario = Scenario(doc["scenario"])
    except ValueError:
        raise ConfigInvalid(
            f"scenario must be one of {[s.value for s in Scenario]}, "
            f"got {doc['scenario']!r}") from None

    if doc["sizes"] is not None:
        if not isinstance(doc["sizes"], dict):
            raise ConfigInvalid("sizes must map tier names to model sizes")
        tier_configs = {}
        for key, value in doc["sizes"].items():
            try:
                tier = DifficultyTier(key)
            except ValueError:
                raise ConfigInvalid(
                    f"sizes: unknown tier {key!r} (easy, moderate, difficult)") from None
            tier_configs[tier] = _parse_size(value, f"sizes.{key}")
    else:
        from .catalog import SETUP_SIZES, setup_configs
        if doc["setup"] not in SETUP_SIZES:
            raise ConfigInvalid(
                f"setup {doc['setup']!r} is not in the catalog and no sizes given")
        tier_configs = setup_configs(doc["setup"])
        if scenario is Scenario.MHOIHO:
            tier_configs = {DifficultyTier.MODERATE: tier_configs[DifficultyTier.MODERATE]}

    def schedule_from(section: dict, total_steps: int, where: str) -> TrainSchedule:
        try:
            return TrainSchedule(
                total_steps=total_steps, warmup_steps=section["warmup_steps"],
                max_lr=section["max_lr"], min_lr=section.get("min_lr"),
                batch_tokens=section["batch_tokens"])
        except (ValueError, KeyError) as err:
            raise ConfigInvalid(f"{where} schedule invalid: {err}") from err

    prior_value = doc["prior"]
    if prior_value == "uniform":
        prior = DomainPrior.uniform()
    elif isinstance(prior_value, list):
        try:
            prior = DomainPrior.fixed(prior_value)
        except ValueError as err:
            raise ConfigInvalid(f"prior invalid: {err}") from err
    else:
        raise ConfigInvalid(f"prior must be 'uniform' or a probability list, "
                            f"got {prior_value!r}")

    try:
        split_spec = SplitSpec(**doc["split"])
    except (TypeError, ValueError) as err:
        raise ConfigInvalid(f"split section invalid: {err}") from err

    registry_path = Path(doc["registry"])
    if not registry_path.is_absolute():
        registry_path = (config_dir / registry_path).resolve()

    cfg = ExperimentConfig(
        setup=str(doc["setup"]),
        scenario=scenario,
        tier_configs=tier_configs,
        iter_m=int(doc["iter_m"]),
        granularity=int(doc["granularity"]),
        tolerance=float(doc["tolerance"]),
        branch_ratio=float(doc["branch_ratio"]),
        registry_path=registry_path,
        out_dir=Path(doc["out_dir"]),
        prior=prior,
        init_seed=int(doc["seeds"]["init"]),
        data_seed=int(doc["seeds"]["data"]),
        split_spec=split_spec,
        pretrain_schedule=schedule_from(doc["pretrain"], doc["pretrain"]["total_steps"],
                                        "pretrain"),
        domain_template=schedule_from(doc["domain"], int(doc["iter_m"]), "domain"),
        eval_max_tokens=doc["eval"]["max_tokens"],
        classify_tokens=int(doc["eval"]["classify_tokens"]),
        overrides=overrides,
    )
    cfg.plan()  # validates scenario consistency and the compute budget up front
    return cfg
