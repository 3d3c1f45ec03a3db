"""Domain-posterior ensembling of expert next-token distributions.

The ensemble predicts with a mixture over experts whose weights are the
Bayes posterior over domains given the observed prefix: each expert i
carries a cumulative log-likelihood log p(x_<t | D_i), the posterior is
softmax(cum_loglik + log_prior), and the mixture is a log-sum-exp over
experts per vocabulary entry. The posterior used to predict x_t is computed
from strictly preceding tokens; the observed token updates the state only
after the prediction. Everything stays in log space (float64) with
max-subtraction; linear-space probabilities appear only in test oracles.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .corpus import BOS_ID
from .errors import DimensionMismatch, EmptyEval, UnnormalizedExpert

if TYPE_CHECKING:
    from .btm import Forest

NORMALIZATION_TOL = 1e-6


def logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    """Stable log(sum(exp(a))) with max subtraction; handles -inf entries."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    # log(0) = -inf is the intended result when every entry is -inf.
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if axis is None else np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class DomainPrior:
    """Prior over ensemble members: uniform or a fixed probability vector."""

    kind: str
    values: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "fixed"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "fixed":
            if not self.values:
                raise ValueError("fixed prior needs a probability vector")
            vec = np.asarray(self.values, dtype=np.float64)
            if np.any(vec < 0.0):
                raise ValueError("fixed prior values must be nonnegative")
            if abs(float(vec.sum()) - 1.0) > 1e-9:
                raise ValueError(f"fixed prior sums to {vec.sum()!r}, expected 1")
        elif self.values is not None:
            raise ValueError("uniform prior takes no values")

    @classmethod
    def uniform(cls) -> "DomainPrior":
        return cls(kind="uniform")

    @classmethod
    def fixed(cls, values) -> "DomainPrior":
        return cls(kind="fixed", values=tuple(float(v) for v in values))

    def log_values(self, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError("need at least one ensemble member")
        if self.kind == "uniform":
            return np.full(n, -np.log(n), dtype=np.float64)
        if len(self.values) != n:
            raise DimensionMismatch(
                f"fixed prior has {len(self.values)} entries for {n} experts")
        with np.errstate(divide="ignore"):
            return np.log(np.asarray(self.values, dtype=np.float64))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "values": list(self.values) if self.values else None}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainPrior":
        if d["kind"] == "fixed":
            return cls.fixed(d["values"])
        return cls.uniform()


@dataclass(frozen=True)
class PosteriorState:
    """Per-expert cumulative prefix log-likelihoods plus the log prior."""

    cum_loglik: np.ndarray
    log_prior: np.ndarray
    t: int = 0


def init_posterior(n: int, prior: DomainPrior) -> PosteriorState:
    log_prior = prior.log_values(n)
    return PosteriorState(cum_loglik=np.zeros(n, dtype=np.float64),
                          log_prior=log_prior, t=0)


def log_posterior_weights(state: PosteriorState) -> np.ndarray:
    z = state.cum_loglik + state.log_prior
    return z - logsumexp(z)


def posterior_weights(state: PosteriorState) -> np.ndarray:
    """Posterior probability per expert given the accumulated prefix."""
    return np.exp(log_posterior_weights(state))


def step(state: PosteriorState, per_expert_logprobs: np.ndarray,
         observed_token: int) -> tuple[np.ndarray, PosteriorState]:
    """One autoregressive step of the mixture.

    ``per_expert_logprobs`` is (n, vocab), each row a normalized log
    distribution from one expert conditioned on the current prefix. Returns
    the ensemble log distribution (mixed under the CURRENT posterior, which
    excludes the token now being observed) and the advanced state.
    """
    lp = np.asarray(per_expert_logprobs, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] != state.cum_loglik.shape[0]:
        raise DimensionMismatch(
            f"expected ({state.cum_loglik.shape[0]}, vocab) log-prob matrix, got {lp.shape}")
    row_mass = logsumexp(lp, axis=1)
    worst = float(np.max(np.abs(row_mass)))
    if worst > NORMALIZATION_TOL:
        raise UnnormalizedExpert(
            f"expert distribution off by {worst:.3e} in log mass (tolerance {NORMALIZATION_TOL})")
    vocab = lp.shape[1]
    if not 0 <= observed_token < vocab:
        raise ValueError(f"observed token {observed_token} outside vocab {vocab}")

    log_w = log_posterior_weights(state)
    mixture = logsumexp(log_w[:, None] + lp, axis=0)
    new_state = PosteriorState(cum_loglik=state.cum_loglik + lp[:, observed_token],
                               log_prior=state.log_prior, t=state.t + 1)
    return mixture, new_state


@dataclass(frozen=True)
class SequenceEval:
    total_nll: float
    per_token_nll: np.ndarray
    posterior_trace: np.ndarray  # (tokens, experts), weights before each step


def _expert_logprob_rows(expert, tokens: np.ndarray) -> np.ndarray:
    """Log p(token_j | preceding tokens) rows for one expert, (T, vocab).

    The sequence is consumed in BOS-prefixed windows of ``seq_len - 1``
    tokens: row j of the output conditions on the window content up to (and
    excluding) token j. Within-window contexts are exact; context does not
    carry across window boundaries.
    """
    window = expert.config.seq_len - 1
    rows = []
    for start in range(0, len(tokens), window):
        chunk = tokens[start:start + window]
        inp = np.concatenate([[BOS_ID], chunk]).astype(np.int64)
        lp = expert.position_logprobs(inp)
        rows.append(lp[:len(chunk)])
    return np.concatenate(rows, axis=0)


def sequence_nll(forest: "Forest", tokens: np.ndarray) -> SequenceEval:
    """Ensemble negative log-likelihood of a token sequence.

    The first token is predicted from a BOS-only context with the posterior
    equal to the prior; the posterior trace records the weights in force
    before each prediction.
    """
    tokens = np.asarray(tokens).ravel()
    if tokens.size == 0:
        raise EmptyEval("cannot evaluate an empty token sequence")
    members = forest.members()
    if not members:
        raise EmptyEval("forest has no experts to evaluate")
    all_rows = np.stack([_expert_logprob_rows(e, tokens) for _, e in members])

    state = init_posterior(len(members), forest.prior)
    T = len(tokens)
    nll = np.empty(T, dtype=np.float64)
    trace = np.empty((T, len(members)), dtype=np.float64)
    for t in range(T):
        trace[t] = posterior_weights(state)
        mixture, state = step(state, all_rows[:, t, :], int(tokens[t]))
        nll[t] = -mixture[int(tokens[t])]
    return SequenceEval(total_nll=float(nll.sum()), per_token_nll=nll,
                        posterior_trace=trace)


def perplexity(forest: "Forest", eval_tokens: np.ndarray) -> float:
    """exp(mean per-token ensemble NLL) over the sequence."""
    eval_tokens = np.asarray(eval_tokens).ravel()
    if eval_tokens.size == 0:
        raise EmptyEval("cannot take perplexity of an empty sequence")
    result = sequence_nll(forest, eval_tokens)
    return float(np.exp(result.total_nll / eval_tokens.size))


def expert_perplexity(expert, eval_tokens: np.ndarray) -> float:
    """Solo perplexity of one expert, same windowing as the ensemble path."""
    eval_tokens = np.asarray(eval_tokens).ravel()
    if eval_tokens.size == 0:
        raise EmptyEval("cannot take perplexity of an empty sequence")
    rows = _expert_logprob_rows(expert, eval_tokens)
    picked = rows[np.arange(eval_tokens.size), eval_tokens.astype(np.int64)]
    return float(np.exp(-picked.mean()))


def trace_to_csv(trace: np.ndarray, expert_names: list[str]) -> str:
    """Posterior trace as CSV: one row per position, one column per expert."""
    if trace.ndim != 2 or trace.shape[1] != len(expert_names):
        raise DimensionMismatch(
            f"trace shape {trace.shape} does not match {len(expert_names)} expert names")
    buf = io.StringIO()
    buf.write("t," + ",".join(expert_names) + "\n")
    for t, row in enumerate(trace):
        buf.write(f"{t}," + ",".join(f"{w:.10g}" for w in row) + "\n")
    return buf.getvalue()
