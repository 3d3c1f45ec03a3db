"""Command-line pipeline: make-data, pretrain, plan, branch-train, evaluate, report.

Every artifact lands under the config's out_dir (checkpoints are
content-addressed, manifests carry relative paths and no timestamps), so
rerunning a command with identical inputs rewrites identical bytes. An
index.json in out_dir maps artifact names to paths and logs the commands
and overrides that produced them.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import btm, ensemble, synthetic
from .config import ExperimentConfig, load_config
from .corpus import (TIER_ORDER, DifficultyTier, DomainCorpus, RegistryEntry,
                     domain_rows, load_registry, split)
from .errors import ConfigInvalid, ElmForestError, MissingArtifact, MissingTierExpert
from .evalreport import EvalDomain, EvalResult, compare, emit, evaluate_forest
from .tinylm import load_checkpoint

FOREST_DIR = "forest"
SEED_DIR = "seeds"


def _update_index(out_dir: Path, command: str, artifacts: dict[str, str],
                  provenance: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "index.json"
    doc = json.loads(path.read_text()) if path.exists() else {"artifacts": {}, "runs": []}
    doc["artifacts"].update(artifacts)
    doc["runs"].append({"command": command, "artifacts": sorted(artifacts),
                        "provenance": provenance})
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _splits(cfg: ExperimentConfig, entries: list[RegistryEntry]):
    """name → (train, val, test) token arrays for every registry domain."""
    out = {}
    for entry in entries:
        out[entry.name] = split(entry.load(), cfg.split_spec)
    return out


def _seed_label(plan, tier: DifficultyTier) -> str:
    name = plan.size_names()[tier]
    return f"custom-{tier.value}" if name == "custom" else name


def _load_seeds(cfg: ExperimentConfig, plan) -> dict[DifficultyTier, object]:
    seeds = {}
    by_config = {}
    for tier in TIER_ORDER:
        c = plan.config_for(tier)
        if c in by_config:
            seeds[tier] = by_config[c]
            continue
        path = cfg.out_dir / SEED_DIR / f"{_seed_label(plan, tier)}.ckpt"
        if not path.is_file():
            raise MissingArtifact(
                f"seed checkpoint {path} not found; run the pretrain subcommand first")
        ckpt = load_checkpoint(path)
        if ckpt.config != c:
            raise ConfigInvalid(
                f"seed {path} was trained with a different architecture than the plan")
        by_config[c] = ckpt
        seeds[tier] = ckpt
    return seeds


def assign_row_tiers(row: list[RegistryEntry], seed_ppls: dict[str, float]
                     ) -> dict[DifficultyTier, str]:
    """Map one iteration row's domains onto tiers.

    Explicit tier overrides win; the remaining domains fill the remaining
    tiers in ascending seed-perplexity order (easy = lowest).
    """
    assignment: dict[DifficultyTier, str] = {}
    floating = []
    for entry in row:
        if entry.tier_override is not None:
            if entry.tier_override in assignment:
                raise ConfigInvalid(
                    f"two domains pinned to tier {entry.tier_override.value}")
            assignment[entry.tier_override] = entry.name
        else:
            floating.append(entry)
    open_tiers = [t for t in TIER_ORDER if t not in assignment]
    floating.sort(key=lambda e: (seed_ppls[e.name], e.name))
    if len(floating) != len(open_tiers):
        raise ConfigInvalid(
            f"row of {len(row)} domains cannot fill tiers {[t.value for t in open_tiers]}")
    for tier, entry in zip(open_tiers, floating):
        assignment[tier] = entry.name
    return assignment


def _cmd_make_data(args) -> int:
    registry = synthetic.write_demo_corpus(args.out, rows=args.rows,
                                           kib_per_domain=args.kib, seed=args.seed)
    n = len(json.loads(registry.read_text()))
    print(f"wrote {n} domains and registry {registry}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = load_config(args.config, set_flags=args.set, out_dir_flag=args.out_dir)
    plan = cfg.plan()
    entries = load_registry(cfg.registry_path)
    trained_entries = [e for e in entries if e.kind == "trained"]
    domain_rows(trained_entries)  # validates row structure early
    splits = _splits(cfg, trained_entries)
    pretrain_tokens = np.concatenate([splits[e.name][0] for e in trained_entries])

    written = {}
    done_configs = {}
    for tier in TIER_ORDER:
        c = plan.config_for(tier)
        if c in done_configs:
            continue
        label = _seed_label(plan, tier)
        path = cfg.out_dir / SEED_DIR / f"{label}.ckpt"
        if path.is_file():
            existing = load_checkpoint(path)
            if existing.config == c and existing.step == cfg.pretrain_schedule.total_steps:
                print(f"seed {label}: already trained ({existing.short_id()}), skipping")
                done_configs[c] = existing
                continue
            raise ConfigInvalid(
                f"seed {path} exists but does not match the configured architecture "
                f"or step count; move it aside or change out_dir")
        print(f"seed {label}: training {cfg.pretrain_schedule.total_steps} steps "
              f"on {len(pretrain_tokens)} tokens")
        ckpt = btm.pretrain_seed(
            c, cfg.pretrain_schedule, pretrain_tokens,
            init_seed=btm.stable_seed(cfg.init_seed, "pretrain", label),
            data_seed=btm.stable_seed(cfg.data_seed, "pretrain", label))
        ckpt.save(path)
        done_configs[c] = ckpt
        written[f"seed/{label}"] = str(path.relative_to(cfg.out_dir))
        print(f"seed {label}: saved {ckpt.short_id()} to {path}")
    _update_index(cfg.out_dir, "pretrain", written, cfg.provenance())
    return 0


def _cmd_plan(args) -> int:
    cfg = load_config(args.config, set_flags=args.set, out_dir_flag=args.out_dir)
    from .budget import verify_budget
    plan = cfg.plan()
    report = verify_budget(plan)
    doc = {"plan": plan.to_dict(),
           "verification": {"deviation_s_pair": report.deviation_s,
                            "deviation_l_pair": report.deviation_l,
                            "tolerance": report.tolerance, "pass": report.passed},
           "provenance": cfg.provenance()}
    out = cfg.out_dir / "plan.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    for tier in TIER_ORDER:
        a = plan.assignments[tier]
        print(f"{tier.value}: {plan.size_names()[tier]} x {a.iterations} iterations")
    print(f"budget deviations: S-pair {report.deviation_s:.4f}, "
          f"L-pair {report.deviation_l:.4f} (tolerance {report.tolerance})")
    print(f"pass: {report.passed}")
    _update_index(cfg.out_dir, "plan", {"plan": "plan.json"}, cfg.provenance())
    return 0 if report.passed else 1


def _cmd_branch_train(args) -> int:
    cfg = load_config(args.config, set_flags=args.set, out_dir_flag=args.out_dir)
    plan = cfg.plan()
    entries = load_registry(cfg.registry_path)
    trained_entries = [e for e in entries if e.kind == "trained"]
    rows = domain_rows(trained_entries)
    splits = _splits(cfg, trained_entries)

    forest_dir = cfg.out_dir / FOREST_DIR
    if (forest_dir / btm.MANIFEST_NAME).exists():
        forest = btm.load_forest(forest_dir)
    else:
        forest = btm.make_forest(plan, _load_seeds(cfg, plan), cfg.prior,
                                 cfg.domain_template, branch_ratio=cfg.branch_ratio,
                                 data_seed=cfg.data_seed)

    if args.iteration is None and forest.iteration >= len(rows):
        print(f"all {len(rows)} registry rows already trained; nothing to do")
        return 0
    iteration = args.iteration if args.iteration else forest.iteration + 1
    if iteration > len(rows):
        raise ConfigInvalid(
            f"iteration {iteration} requested but the registry only fills {len(rows)} rows")
    if forest.iteration >= iteration:
        print(f"iteration {iteration} already merged; nothing to do")
        return 0
    if forest.iteration != iteration - 1:
        raise MissingTierExpert(
            f"iteration {iteration} needs iteration {iteration - 1} completed first "
            f"(forest has {forest.iteration})")

    row = rows[iteration - 1]
    seed_m = forest.seeds[DifficultyTier.MODERATE]
    ppls = {e.name: ensemble.expert_perplexity(
        seed_m, splits[e.name][1][:cfg.classify_tokens]) for e in row}
    assignment = assign_row_tiers(row, ppls)
    for tier in TIER_ORDER:
        print(f"{tier.value}: domain {assignment[tier]!r} "
              f"(seed ppl {ppls[assignment[tier]]:.1f}), "
              f"{plan.iterations_for(tier)} steps")

    domain_row = {tier: DomainCorpus.from_tokens(name, splits[name][0])
                  for tier, name in assignment.items()}
    forest = btm.train_iteration(forest, domain_row, worker_count=args.workers)
    manifest = btm.save_forest(forest, forest_dir)
    _update_index(cfg.out_dir, "branch-train",
                  {"forest": str(manifest.relative_to(cfg.out_dir))},
                  {**cfg.provenance(), "iteration": iteration, "workers": args.workers})
    print(f"iteration {iteration} merged; manifest {manifest}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = load_config(args.config, set_flags=args.set, out_dir_flag=args.out_dir)
    forest = btm.load_forest(Path(args.forest) if args.forest else cfg.out_dir / FOREST_DIR)
    if args.iteration or args.eval_step:
        forest = btm.forest_at(forest, args.iteration or forest.iteration,
                               eval_step=args.eval_step)

    entries = load_registry(cfg.registry_path)
    cap = cfg.eval_max_tokens
    domains = []
    for entry in entries:
        _, _, test = split(entry.load(), cfg.split_spec)
        domains.append(EvalDomain(name=entry.name, kind=entry.kind,
                                  tokens=test[:cap] if cap else test))

    result, traces = evaluate_forest(forest, domains, setup=cfg.setup,
                                     metadata=cfg.provenance(), collect_traces=True)
    out = Path(args.out) if args.out else cfg.out_dir / "results" / f"{forest.scenario}.json"
    result.save(out)
    artifacts = {f"results/{forest.scenario}": _relpath_or_abs(out, cfg.out_dir)}
    print(f"evaluated {len(domains)} domains at iteration {forest.iteration}; wrote {out}")

    if args.traces:
        from .figures import render_posterior_trace
        trace_dir = cfg.out_dir / "traces"
        trace_dir.mkdir(parents=True, exist_ok=True)
        names = [n for n, _ in forest.members()]
        for domain, trace in traces.items():
            (trace_dir / f"{domain}.csv").write_text(ensemble.trace_to_csv(trace, names))
            render_posterior_trace(trace, names, trace_dir / f"{domain}.png",
                                   title=f"posterior weights on {domain}")
        artifacts["traces"] = "traces"
        print(f"wrote posterior traces for {len(traces)} domains to {trace_dir}")
    _update_index(cfg.out_dir, "evaluate", artifacts,
                  {**cfg.provenance(), "iteration": forest.iteration,
                   "eval_step": args.eval_step})
    for name in sorted(result.perplexities):
        print(f"  {name} [{result.domain_kinds[name]}]: {result.perplexities[name]:.2f}")
    return 0


def _relpath_or_abs(path: Path, root: Path) -> str:
    try:
        return str(path.resolve().relative_to(root.resolve()))
    except ValueError:
        return str(path)


def _cmd_report(args) -> int:
    results = [EvalResult.load(p) for p in args.inputs]
    report = compare(results, tie_threshold=args.tie_threshold)
    suffix = {"markdown": "md", "csv": "csv", "json": "json"}[args.format]
    if args.out:
        out = Path(args.out)
    elif args.config:
        cfg = load_config(args.config, set_flags=args.set, out_dir_flag=args.out_dir)
        out = cfg.out_dir / f"report.{suffix}"
    else:
        raise ConfigInvalid("report needs --out or --config to place its output")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(emit(report, args.format))
    print(f"wrote {args.format} report for {len(results)} scenarios to {out}")

    if not args.no_figures:
        from .figures import render_perplexity_bars
        fig_path = out.parent / "figures" / "perplexity.png"
        render_perplexity_bars(report, fig_path)
        print(f"wrote figure {fig_path}")
    for v in report.domains:
        mark = " (tie)" if v.tied else ""
        print(f"  {v.name}: best {', '.join(v.best)}{mark}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elmforest",
        description="Branch-train-merge expert forests with Bayesian domain routing.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="experiment config file (YAML)")
        p.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--out-dir", default=None, help="override the output directory")

    p = sub.add_parser("make-data", help="generate synthetic demo domains + registry")
    p.add_argument("--out", required=True, help="directory for domain files")
    p.add_argument("--rows", type=int, default=3, help="training iterations to cover")
    p.add_argument("--kib", type=int, default=200, help="KiB per domain")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_make_data)

    p = sub.add_parser("pretrain", help="train one seed model per planned size")
    common(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("plan", help="build and verify the compute-budget plan")
    common(p)
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("branch-train", help="run one branch-train-merge iteration")
    common(p)
    p.add_argument("--iteration", type=int, default=None,
                   help="iteration to run (default: next)")
    p.add_argument("--workers", type=int, default=1, help="parallel training jobs")
    p.set_defaults(func=_cmd_branch_train)

    p = sub.add_parser("evaluate", help="ensemble perplexity on every registry domain")
    common(p)
    p.add_argument("--forest", default=None, help="forest manifest or its directory")
    p.add_argument("--iteration", type=int, default=None,
                   help="evaluate the forest as of this iteration")
    p.add_argument("--eval-step", type=int, default=None,
                   help="use the checkpoint recorded at this step instead of the final one")
    p.add_argument("--out", default=None, help="results JSON path")
    p.add_argument("--traces", action="store_true",
                   help="write posterior trace CSVs and plots per domain")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="compare scenario results and render tables")
    common(p, config_required=False)
    p.add_argument("--inputs", nargs="+", required=True, help="results JSON files")
    p.add_argument("--format", choices=("markdown", "csv", "json"), default="markdown")
    p.add_argument("--tie-threshold", type=float, default=0.05)
    p.add_argument("--out", default=None, help="report output path")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ElmForestError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
