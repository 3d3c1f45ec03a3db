"""Shared fixtures and the acceptance summary hook."""

import numpy as np
import pytest

from elmforest.corpus import DomainCorpus, tokenize
from elmforest.tinylm import ExpertConfig, TrainSchedule, init_params

ACCEPTANCE_LABELS = {
    1: "budget arithmetic reproduction",
    2: "ensemble oracle equivalence",
    3: "posterior invariants",
    4: "gradient correctness",
    5: "schedule correctness",
    6: "desk-scale routing behavior",
    7: "heterogeneity direction check",
    8: "determinism across worker counts",
    9: "lineage integrity over 3 iterations",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            num = int(name.split("_")[2])
            verdict = "PASS" if status == "passed" else "FAIL"
            outcomes[num] = verdict
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_LABELS):
        label = ACCEPTANCE_LABELS[num]
        verdict = outcomes.get(num, "NOT RUN")
        terminalreporter.write_line(f"criterion {num} ({label}): {verdict}")


@pytest.fixture(scope="session")
def tiny_config() -> ExpertConfig:
    return ExpertConfig(hidden_size=16, intermediate_size=48, num_heads=2,
                        num_layers=1, seq_len=32)


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=11)


@pytest.fixture
def tiny_schedule() -> TrainSchedule:
    return TrainSchedule(total_steps=6, warmup_steps=2, max_lr=1e-3,
                         batch_tokens=64)


def make_text_corpus(name: str, text: bytes) -> DomainCorpus:
    return DomainCorpus(name=name, raw_bytes=text, tokens=tokenize(text))


@pytest.fixture(scope="session")
def repetitive_corpus() -> DomainCorpus:
    pattern = b"the quick brown fox jumps over the lazy dog. "
    return make_text_corpus("fox", pattern * 200)


@pytest.fixture(scope="session")
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
