"""Ensemble math against the probability-space reference, plus invariants."""

import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from elmforest.ensemble import (
    DomainPrior,
    PosteriorState,
    expert_perplexity,
    init_posterior,
    log_posterior_weights,
    logsumexp,
    perplexity,
    posterior_weights,
    sequence_nll,
    step,
    trace_to_csv,
)
from elmforest.errors import DimensionMismatch, EmptyEval, UnnormalizedExpert
from elmforest.tinylm import ExpertCheckpoint, ExpertConfig, init_params

from oracles import DuckForest, TableExpert, linear_mixture_eval, random_case, random_table_expert


class TestLogsumexp:
    @given(arrays(np.float64, st.integers(1, 40),
                  elements=st.floats(-100, 100)))
    def test_matches_direct_sum(self, values):
        want = math.log(np.exp(values).sum())
        assert logsumexp(values) == pytest.approx(want, rel=1e-12)

    def test_large_magnitudes_do_not_overflow(self):
        assert logsumexp(np.array([1000.0, 1000.0])) == pytest.approx(
            1000.0 + math.log(2.0), rel=1e-14)
        assert logsumexp(np.array([-1e9, -1e9 + 1.0])) == pytest.approx(
            -1e9 + math.log(1 + math.e), rel=1e-12)

    def test_all_negative_infinity(self):
        assert logsumexp(np.array([-np.inf, -np.inf])) == -np.inf


class TestDomainPrior:
    def test_uniform_log_values(self):
        np.testing.assert_allclose(DomainPrior.uniform().log_values(4),
                                   np.log(0.25), atol=1e-15)

    def test_fixed_round_trip(self):
        p = DomainPrior.fixed([0.2, 0.3, 0.5])
        assert DomainPrior.from_dict(p.to_dict()) == p

    def test_fixed_length_checked(self):
        with pytest.raises(DimensionMismatch):
            DomainPrior.fixed([0.5, 0.5]).log_values(3)

    def test_validation(self):
        with pytest.raises(ValueError):
            DomainPrior.fixed([0.5, 0.6])
        with pytest.raises(ValueError):
            DomainPrior.fixed([1.5, -0.5])
        with pytest.raises(ValueError):
            DomainPrior(kind="magic")
        with pytest.raises(ValueError):
            DomainPrior(kind="uniform", values=(0.5, 0.5))


def random_state(rng, n):
    return PosteriorState(cum_loglik=rng.normal(0, 5, size=n),
                          log_prior=DomainPrior.uniform().log_values(n),
                          t=int(rng.integers(0, 50)))


class TestPosteriorInvariants:
    @given(seed=st.integers(0, 10**6), n=st.integers(1, 6))
    @settings(max_examples=200, deadline=None)
    def test_normalization(self, seed, n):
        state = random_state(np.random.default_rng(seed), n)
        assert posterior_weights(state).sum() == pytest.approx(1.0, abs=1e-9)

    def test_prior_recovered_before_any_evidence(self):
        state = init_posterior(3, DomainPrior.uniform())
        np.testing.assert_allclose(posterior_weights(state), 1 / 3, atol=1e-15)
        fixed = DomainPrior.fixed([0.2, 0.3, 0.5])
        state = init_posterior(3, fixed)
        np.testing.assert_allclose(posterior_weights(state), [0.2, 0.3, 0.5],
                                   atol=1e-12)
        assert state.t == 0

    @given(seed=st.integers(0, 10**6), shift=st.floats(-1e6, 1e6))
    @settings(max_examples=100, deadline=None)
    def test_shift_invariance(self, seed, shift):
        state = random_state(np.random.default_rng(seed), 4)
        shifted = PosteriorState(cum_loglik=state.cum_loglik + shift,
                                 log_prior=state.log_prior, t=state.t)
        np.testing.assert_allclose(posterior_weights(shifted),
                                   posterior_weights(state), atol=1e-9)

    @given(seed=st.integers(0, 10**6))
    @settings(max_examples=100, deadline=None)
    def test_mixture_within_convex_bounds(self, seed):
        rng = np.random.default_rng(seed)
        n, vocab = 3, 6
        state = random_state(rng, n)
        raw = rng.gamma(1.0, 1.0, size=(n, vocab)) + 1e-4
        rows = np.log(raw / raw.sum(axis=1, keepdims=True))
        mixture, _ = step(state, rows, observed_token=0)
        lo = rows.min(axis=0) - 1e-9
        hi = rows.max(axis=0) + 1e-9
        assert np.all(mixture >= lo) and np.all(mixture <= hi)

    @given(seed=st.integers(0, 10**6), hot=st.integers(0, 2))
    @settings(max_examples=60, deadline=None)
    def test_one_hot_prior_collapses_to_single_expert(self, seed, hot):
        rng = np.random.default_rng(seed)
        vec = [0.0, 0.0, 0.0]
        vec[hot] = 1.0
        state = init_posterior(3, DomainPrior.fixed(vec))
        for _ in range(4):
            raw = rng.gamma(1.0, 1.0, size=(3, 5)) + 1e-4
            rows = np.log(raw / raw.sum(axis=1, keepdims=True))
            mixture, state = step(state, rows, observed_token=int(rng.integers(5)))
            np.testing.assert_allclose(mixture, rows[hot], atol=1e-12)
            np.testing.assert_allclose(posterior_weights(state), vec, atol=1e-12)

    @given(seed=st.integers(0, 10**6), n=st.integers(2, 6),
           margin=st.floats(0.0, 30.0))
    @settings(max_examples=150, deadline=None)
    def test_concentration_bound(self, seed, n, margin):
        # A lead of m nats over every rival caps the rivals' mass:
        # w_lead >= 1 / (1 + (n - 1) * exp(-m)) under a uniform prior.
        rng = np.random.default_rng(seed)
        lead = float(rng.normal(0, 5))
        cum = np.full(n, lead)
        others = np.arange(1, n)
        cum[others] = lead - margin - rng.random(n - 1) * 3.0
        state = PosteriorState(cum_loglik=cum,
                               log_prior=DomainPrior.uniform().log_values(n))
        bound = 1.0 / (1.0 + (n - 1) * math.exp(-margin))
        assert posterior_weights(state)[0] >= bound - 1e-12

    def test_step_updates_evidence_with_observed_token(self):
        rng = np.random.default_rng(0)
        state = init_posterior(2, DomainPrior.uniform())
        raw = rng.gamma(1.0, 1.0, size=(2, 4)) + 1e-4
        rows = np.log(raw / raw.sum(axis=1, keepdims=True))
        _, after = step(state, rows, observed_token=3)
        np.testing.assert_allclose(after.cum_loglik,
                                   state.cum_loglik + rows[:, 3], atol=1e-15)
        assert after.t == state.t + 1

    def test_prediction_ignores_current_token(self):
        # The mixture for x_t must use weights from tokens strictly before t,
        # so the prediction cannot depend on which token is then observed.
        rng = np.random.default_rng(1)
        state = init_posterior(2, DomainPrior.uniform())
        raw = rng.gamma(1.0, 1.0, size=(2, 4)) + 1e-4
        rows = np.log(raw / raw.sum(axis=1, keepdims=True))
        mix_a, _ = step(state, rows, observed_token=0)
        mix_b, _ = step(state, rows, observed_token=3)
        np.testing.assert_array_equal(mix_a, mix_b)

    def test_log_weights_match_linear_weights(self):
        state = random_state(np.random.default_rng(5), 4)
        np.testing.assert_allclose(np.exp(log_posterior_weights(state)),
                                   posterior_weights(state), atol=1e-12)

    def test_unnormalized_rows_rejected(self):
        state = init_posterior(2, DomainPrior.uniform())
        rows = np.log(np.full((2, 4), 0.3))
        with pytest.raises(UnnormalizedExpert):
            step(state, rows, observed_token=0)


class TestOracleEquivalence:
    def test_thousand_randomized_cases(self):
        rng = np.random.default_rng(99)
        for _ in range(1000):
            experts, prior, tokens = random_case(rng)
            forest = DuckForest(experts, DomainPrior.fixed(prior))
            got = sequence_nll(forest, tokens)
            want_nll, want_per_token, want_trace = linear_mixture_eval(
                experts, prior, tokens)
            assert got.total_nll == pytest.approx(want_nll, rel=1e-9)
            np.testing.assert_allclose(got.per_token_nll, want_per_token,
                                       rtol=1e-9)
            np.testing.assert_allclose(got.posterior_trace, want_trace,
                                       rtol=1e-9, atol=1e-12)

    @given(seed=st.integers(0, 10**9))
    @settings(max_examples=150, deadline=None)
    def test_oracle_property(self, seed):
        rng = np.random.default_rng(seed)
        experts, prior, tokens = random_case(rng)
        forest = DuckForest(experts, DomainPrior.fixed(prior))
        got = sequence_nll(forest, tokens)
        want_nll, _, want_trace = linear_mixture_eval(experts, prior, tokens)
        assert got.total_nll == pytest.approx(want_nll, rel=1e-9)
        np.testing.assert_allclose(got.posterior_trace, want_trace, rtol=1e-9,
                                   atol=1e-12)

    def test_real_experts_match_oracle(self):
        config = ExpertConfig(hidden_size=8, intermediate_size=24, num_heads=2,
                              num_layers=1, seq_len=6)
        rng = np.random.default_rng(3)
        experts = [
            ExpertCheckpoint.create(config, init_params(config, seed=s), 0, ())
            for s in (1, 2)
        ]
        prior = np.array([0.5, 0.5])
        tokens = rng.integers(0, 256, size=12)
        forest = DuckForest(experts, DomainPrior.uniform())
        got = sequence_nll(forest, tokens)
        want_nll, want_per_token, _ = linear_mixture_eval(experts, prior, tokens)
        assert got.total_nll == pytest.approx(want_nll, rel=1e-6)
        np.testing.assert_allclose(got.per_token_nll, want_per_token, rtol=1e-6,
                                   atol=1e-8)


class TestSequenceEval:
    def uniform_forest(self, vocab=5, window=3, n=2):
        table = np.full((window + 1, vocab + 1, vocab), 1.0 / vocab)
        experts = [TableExpert(table) for _ in range(n)]
        return DuckForest(experts, DomainPrior.uniform())

    def test_uniform_experts_score_log_vocab(self):
        forest = self.uniform_forest(vocab=5)
        tokens = np.array([0, 1, 2, 3, 4, 0, 1])
        result = sequence_nll(forest, tokens)
        np.testing.assert_allclose(result.per_token_nll, math.log(5),
                                   atol=1e-12)
        assert perplexity(forest, tokens) == pytest.approx(5.0, abs=1e-6)

    def test_prefix_consistency(self):
        rng = np.random.default_rng(11)
        experts, prior, tokens = random_case(rng, max_len=8)
        while len(tokens) < 4:
            experts, prior, tokens = random_case(rng, max_len=8)
        forest = DuckForest(experts, DomainPrior.fixed(prior))
        full = sequence_nll(forest, tokens)
        head = sequence_nll(forest, tokens[:3])
        np.testing.assert_allclose(head.per_token_nll, full.per_token_nll[:3],
                                   atol=1e-12)

    def test_trace_shape_and_first_row(self):
        forest = self.uniform_forest(n=3)
        tokens = np.array([1, 2, 3, 0])
        result = sequence_nll(forest, tokens)
        assert result.posterior_trace.shape == (4, 3)
        np.testing.assert_allclose(result.posterior_trace[0], 1 / 3, atol=1e-15)
        np.testing.assert_allclose(result.posterior_trace.sum(axis=1), 1.0,
                                   atol=1e-9)

    def test_empty_sequence_rejected(self):
        with pytest.raises(EmptyEval):
            sequence_nll(self.uniform_forest(), np.array([], dtype=int))

    def test_empty_forest_rejected(self):
        with pytest.raises(EmptyEval):
            sequence_nll(DuckForest([], DomainPrior.uniform()), np.array([1]))


class TestExpertPerplexity:
    def test_uniform_table_scores_vocab(self):
        vocab = 6
        table = np.full((4, vocab + 1, vocab), 1.0 / vocab)
        ppl = expert_perplexity(TableExpert(table), np.array([0, 1, 2, 3, 4]))
        assert ppl == pytest.approx(vocab, abs=1e-9)

    def test_matches_own_rows(self):
        rng = np.random.default_rng(8)
        expert = random_table_expert(rng, vocab=5, window=3)
        tokens = rng.integers(0, 5, size=7)
        _, per_token, _ = linear_mixture_eval([expert], np.array([1.0]), tokens)
        want = math.exp(per_token.mean())
        assert expert_perplexity(expert, tokens) == pytest.approx(want, rel=1e-12)

    def test_empty_rejected(self):
        expert = random_table_expert(np.random.default_rng(0), 4, 2)
        with pytest.raises(EmptyEval):
            expert_perplexity(expert, np.array([], dtype=int))


class TestTraceCsv:
    def test_round_trip_through_csv_reader(self):
        rng = np.random.default_rng(2)
        trace = rng.dirichlet([1.0, 1.0, 1.0], size=5)
        text = trace_to_csv(trace, ["alpha", "beta", "gamma"])
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == ["t", "alpha", "beta", "gamma"]
        assert [row[0] for row in rows[1:]] == ["0", "1", "2", "3", "4"]
        parsed = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
        np.testing.assert_allclose(parsed, trace, atol=1e-9)

    def test_name_count_checked(self):
        with pytest.raises(DimensionMismatch):
            trace_to_csv(np.ones((2, 3)) / 3, ["a", "b"])
