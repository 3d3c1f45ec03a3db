"""Figure rendering for reports and evaluation diagnostics.

Renders to files only (Agg backend), never to a display. Two plots cover
the artifacts people actually look at: per-domain perplexity bars across
scenarios, and posterior-weight traces showing routing behavior.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

from .evalreport import ComparisonReport  # noqa: E402


def render_perplexity_bars(report: ComparisonReport, path: str | Path) -> Path:
    """Grouped perplexity bars, one group per domain, one bar per scenario."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [v.name for v in report.domains]
    kinds = [v.kind for v in report.domains]
    n_dom, n_scen = len(names), len(report.scenarios)
    x = np.arange(n_dom)
    width = 0.8 / max(n_scen, 1)

    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * n_dom), 4.2))
    for j, scenario in enumerate(report.scenarios):
        vals = [v.perplexities[scenario] for v in report.domains]
        ax.bar(x + (j - (n_scen - 1) / 2) * width, vals, width, label=scenario)
    if "trained" in kinds and "eval_only" in kinds:
        boundary = kinds.index("eval_only")
        ax.axvline(boundary - 0.5, color="gray", linestyle=":", linewidth=1)
        ax.text(boundary - 0.5, ax.get_ylim()[1], " eval-only →",
                va="top", ha="left", fontsize=8, color="gray")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("ensemble perplexity")
    ax.set_yscale("log")
    ax.set_title(f"{report.setup}: perplexity by scenario")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_posterior_trace(trace: np.ndarray, expert_names: list[str],
                           path: str | Path, title: str = "") -> Path:
    """Posterior weight per expert against token position."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for i, name in enumerate(expert_names):
        ax.plot(trace[:, i], label=name, linewidth=1.2)
    ax.set_xlabel("token position")
    ax.set_ylabel("posterior weight")
    ax.set_ylim(-0.02, 1.02)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
