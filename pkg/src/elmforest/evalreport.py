"""Forest evaluation and scenario comparison reports.

One EvalResult holds a forest's ensemble perplexity per evaluation domain;
compare() lines up the results of several scenarios over the same domain
set and marks per-domain winners, treating perplexities within a small
absolute threshold as shared wins (mirroring two-decimal reporting where
equal prints are bolded together). Reports serialize losslessly to JSON and
CSV and render to a markdown table with winners bolded.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .ensemble import perplexity, sequence_nll
from .errors import DomainSetMismatch, EmptyEval

if TYPE_CHECKING:
    from .btm import Forest

TIE_THRESHOLD = 0.05
KINDS = ("trained", "eval_only")


@dataclass(frozen=True)
class EvalDomain:
    name: str
    kind: str
    tokens: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"domain kind must be one of {KINDS}, got {self.kind!r}")


@dataclass
class EvalResult:
    setup: str
    scenario: str
    perplexities: dict[str, float]
    domain_kinds: dict[str, str]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.perplexities) != set(self.domain_kinds):
            raise DomainSetMismatch("perplexity and kind maps cover different domains")
        for name, ppl in self.perplexities.items():
            if not np.isfinite(ppl) or ppl < 1.0:
                raise ValueError(f"domain {name!r}: perplexity {ppl} (must be finite, >= 1)")

    def to_dict(self) -> dict:
        return {"setup": self.setup, "scenario": self.scenario,
                "perplexities": dict(sorted(self.perplexities.items())),
                "domain_kinds": dict(sorted(self.domain_kinds.items())),
                "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        return cls(setup=d["setup"], scenario=d["scenario"],
                   perplexities=dict(d["perplexities"]),
                   domain_kinds=dict(d["domain_kinds"]),
                   metadata=d.get("metadata", {}))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EvalResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


def evaluate_forest(forest: "Forest", domains: list[EvalDomain], setup: str = "",
                    metadata: dict | None = None,
                    collect_traces: bool = False):
    """Ensemble perplexity per domain; pure in the forest.

    Each domain's token sequence is treated as one document: the posterior
    starts from the prior at its first token. Returns the EvalResult, plus
    a name → posterior-trace map when ``collect_traces`` is set.
    """
    if not domains:
        raise EmptyEval("no evaluation domains given")
    ppls: dict[str, float] = {}
    kinds: dict[str, str] = {}
    traces: dict[str, np.ndarray] = {}
    for dom in domains:
        if dom.name in ppls:
            raise DomainSetMismatch(f"domain {dom.name!r} appears twice")
        if collect_traces:
            ev = sequence_nll(forest, dom.tokens)
            ppls[dom.name] = float(np.exp(ev.total_nll / len(dom.tokens)))
            traces[dom.name] = ev.posterior_trace
        else:
            ppls[dom.name] = perplexity(forest, dom.tokens)
        kinds[dom.name] = dom.kind

    meta = {
        "scenario": forest.scenario,
        "iteration": forest.iteration,
        "expert_steps": {t.value: c.step for t, c in sorted(
            forest.experts.items(), key=lambda kv: kv[0].value)},
        "expert_checkpoints": {t.value: c.checkpoint_id for t, c in sorted(
            forest.experts.items(), key=lambda kv: kv[0].value)},
        "data_seed": forest.data_seed,
    }
    meta.update(metadata or {})
    result = EvalResult(setup=setup, scenario=forest.scenario, perplexities=ppls,
                        domain_kinds=kinds, metadata=meta)
    return (result, traces) if collect_traces else result


@dataclass
class DomainVerdict:
    name: str
    kind: str
    perplexities: dict[str, float]
    best: tuple[str, ...]
    margin: float
    tied: bool


@dataclass
class ComparisonReport:
    setup: str
    scenarios: list[str]
    domains: list[DomainVerdict]
    win_share: dict[str, dict[str, float]]
    win_counts: dict[str, dict[str, int]]
    tie_threshold: float

    def to_dict(self) -> dict:
        return {
            "setup": self.setup,
            "scenarios": list(self.scenarios),
            "tie_threshold": self.tie_threshold,
            "domains": [
                {"name": v.name, "kind": v.kind,
                 "perplexities": {s: v.perplexities[s] for s in self.scenarios},
                 "best": list(v.best), "margin": v.margin, "tied": v.tied}
                for v in self.domains],
            "win_share": self.win_share,
            "win_counts": self.win_counts,
        }


def _verdict(name: str, kind: str, ppls: dict[str, float],
             threshold: float) -> DomainVerdict:
    best_val = min(ppls.values())
    best = tuple(s for s, p in ppls.items() if p - best_val <= threshold)
    ordered = sorted(ppls.values())
    margin = (ordered[1] - ordered[0]) if len(ordered) > 1 else 0.0
    return DomainVerdict(name=name, kind=kind, perplexities=dict(ppls),
                         best=best, margin=margin, tied=len(best) > 1)


def _tally(scenarios: list[str], domains: list[DomainVerdict]):
    share = {s: {k: 0.0 for k in KINDS} for s in scenarios}
    counts = {s: {k: 0 for k in KINDS} for s in scenarios}
    for v in domains:
        for s in v.best:
            share[s][v.kind] += 1.0 / len(v.best)
            counts[s][v.kind] += 1
    return share, counts


def compare(results: list[EvalResult], tie_threshold: float = TIE_THRESHOLD) -> ComparisonReport:
    """Per-domain winners across scenarios sharing a setup and domain set.

    Fractional win shares split ties evenly (so shares sum to the domain
    count); integer win counts credit every tied scenario.
    """
    if len(results) < 2:
        raise DomainSetMismatch("need at least two results to compare")
    scenarios = [r.scenario for r in results]
    if len(set(scenarios)) != len(scenarios):
        raise DomainSetMismatch(f"duplicate scenarios in comparison: {scenarios}")
    first = results[0]
    domain_names = sorted(first.perplexities)
    for r in results[1:]:
        if r.setup != first.setup:
            raise DomainSetMismatch(
                f"results mix setups {first.setup!r} and {r.setup!r}")
        if sorted(r.perplexities) != domain_names or r.domain_kinds != first.domain_kinds:
            raise DomainSetMismatch(
                f"scenario {r.scenario} evaluated a different domain set")

    ordered = ([n for n in domain_names if first.domain_kinds[n] == "trained"]
               + [n for n in domain_names if first.domain_kinds[n] == "eval_only"])
    scenarios_sorted = sorted(scenarios)
    by_scenario = {r.scenario: r for r in results}
    verdicts = [
        _verdict(name, first.domain_kinds[name],
                 {s: by_scenario[s].perplexities[name] for s in scenarios_sorted},
                 tie_threshold)
        for name in ordered]
    share, counts = _tally(scenarios_sorted, verdicts)
    return ComparisonReport(setup=first.setup, scenarios=scenarios_sorted,
                            domains=verdicts, win_share=share, win_counts=counts,
                            tie_threshold=tie_threshold)


def report_from_dict(d: dict) -> ComparisonReport:
    verdicts = [DomainVerdict(name=v["name"], kind=v["kind"],
                              perplexities=dict(v["perplexities"]),
                              best=tuple(v["best"]), margin=v["margin"], tied=v["tied"])
                for v in d["domains"]]
    return ComparisonReport(setup=d["setup"], scenarios=list(d["scenarios"]),
                            domains=verdicts, win_share=d["win_share"],
                            win_counts=d["win_counts"], tie_threshold=d["tie_threshold"])


def _emit_json(report: ComparisonReport) -> bytes:
    return (json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n").encode()


def _emit_csv(report: ComparisonReport) -> bytes:
    buf = io.StringIO()
    buf.write(f"# setup={report.setup} tie_threshold={report.tie_threshold!r}\n")
    buf.write("domain,kind," + ",".join(report.scenarios) + ",best,margin,tied\n")
    for v in report.domains:
        ppls = ",".join(repr(v.perplexities[s]) for s in report.scenarios)
        buf.write(f"{v.name},{v.kind},{ppls},{';'.join(v.best)},{v.margin!r},{v.tied}\n")
    return buf.getvalue().encode()


def report_from_csv(data: bytes) -> ComparisonReport:
    lines = data.decode().splitlines()
    head = lines[0].lstrip("# ").split()
    setup = head[0].split("=", 1)[1]
    threshold = float(head[1].split("=", 1)[1])
    columns = lines[1].split(",")
    scenarios = columns[2:-3]
    verdicts = []
    for line in lines[2:]:
        cells = line.split(",")
        name, kind = cells[0], cells[1]
        ppls = {s: float(c) for s, c in zip(scenarios, cells[2:2 + len(scenarios)])}
        best, margin, tied = cells[-3], cells[-2], cells[-1]
        verdicts.append(DomainVerdict(name=name, kind=kind, perplexities=ppls,
                                      best=tuple(best.split(";")), margin=float(margin),
                                      tied=tied == "True"))
    share, counts = _tally(sorted(scenarios), verdicts)
    return ComparisonReport(setup=setup, scenarios=sorted(scenarios), domains=verdicts,
                            win_share=share, win_counts=counts, tie_threshold=threshold)


def _emit_markdown(report: ComparisonReport) -> bytes:
    buf = io.StringIO()
    buf.write(f"# Scenario comparison: {report.setup}\n")
    header = "| Domain | " + " | ".join(report.scenarios) + " |\n"
    rule = "|---" * (1 + len(report.scenarios)) + "|\n"
    for kind, title in (("trained", "Trained domains"),
                        ("eval_only", "Evaluation-only domains")):
        rows = [v for v in report.domains if v.kind == kind]
        if not rows:
            continue
        buf.write(f"\n## {title}\n\n")
        buf.write(header)
        buf.write(rule)
        for v in rows:
            cells = []
            for s in report.scenarios:
                text = f"{v.perplexities[s]:.2f}"
                cells.append(f"**{text}**" if s in v.best else text)
            buf.write(f"| {v.name} | " + " | ".join(cells) + " |\n")
    buf.write("\n## Wins per scenario\n\n")
    buf.write("| Scenario | Trained | Eval-only |\n|---|---|---|\n")
    for s in report.scenarios:
        buf.write(f"| {s} | {report.win_share[s]['trained']:g} "
                  f"| {report.win_share[s]['eval_only']:g} |\n")
    return buf.getvalue().encode()


def emit(report: ComparisonReport, format: str) -> bytes:
    """Render the report; json and csv are lossless, markdown is for humans."""
    if format == "json":
        return _emit_json(report)
    if format == "csv":
        return _emit_csv(report)
    if format == "markdown":
        return _emit_markdown(report)
    raise ValueError(f"unknown report format {format!r} (json, csv, markdown)")
