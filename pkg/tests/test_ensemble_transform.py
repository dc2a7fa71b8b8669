"""Deterministic transform, random resampling, and the mean identities."""

import numpy as np
import pytest

from otpf.ensemble_transform import Ensemble, et_transform, mean_identity_check, ot_resample
from otpf.experiments import deterministic_quantile_samples, scalar_transform_analysis
from otpf.transport import MarginalPair, TransitionMatrix, cost_matrix, solve_transport, transition_from_coupling


def uniform(m):
    return np.full(m, 1.0 / m)


def random_transition(rng, m):
    p = rng.random((m, m)) + 0.05
    return TransitionMatrix(p / p.sum(axis=0))


class TestEnsemble:
    def test_uniform_weight_vector(self):
        ens = Ensemble(np.zeros((2, 4)))
        np.testing.assert_allclose(ens.weight_vector, uniform(4))

    def test_scalar_promotion(self):
        ens = Ensemble(np.array([1.0, 2.0, 3.0]))
        assert ens.states.shape == (1, 3)
        assert ens.dim == 1 and ens.size == 3

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            Ensemble(np.array([[np.inf, 0.0]]))

    def test_bad_weights_rejected(self):
        with pytest.raises(ValueError):
            Ensemble(np.zeros((1, 2)), weights=np.array([0.6, 0.6]))


class TestEtTransform:
    def test_identity(self):
        rng = np.random.default_rng(0)
        prior = Ensemble(rng.standard_normal((3, 6)))
        out = et_transform(prior, TransitionMatrix(np.eye(6)))
        np.testing.assert_array_equal(out.states, prior.states)

    def test_worked_example(self):
        prior = Ensemble(np.array([[0.0, 1.0]]))
        transition = TransitionMatrix(np.array([[1.0, 0.5], [0.0, 0.5]]))
        out = et_transform(prior, transition)
        np.testing.assert_allclose(out.states, [[0.0, 0.5]])
        # uniform mean of the output equals the weighted prior mean
        assert out.states.mean() == pytest.approx(0.25)
        assert mean_identity_check(prior, out, np.array([0.75, 0.25])) < 1e-14

    def test_rank_one_collapse(self):
        rng = np.random.default_rng(1)
        prior = Ensemble(rng.standard_normal((2, 5)))
        w = rng.random(5)
        w /= w.sum()
        transition = TransitionMatrix(np.tile(w[:, None], (1, 5)))
        out = et_transform(prior, transition)
        target = prior.states @ w
        np.testing.assert_allclose(out.states, target[:, None] * np.ones((1, 5)))

    def test_dimension_mismatch(self):
        prior = Ensemble(np.zeros((1, 3)))
        with pytest.raises(ValueError):
            et_transform(prior, TransitionMatrix(np.eye(2)))

    def test_weights_carried_through(self):
        w = np.array([0.7, 0.3])
        prior = Ensemble(np.array([[0.0, 1.0]]), weights=w)
        out = et_transform(prior, TransitionMatrix(np.eye(2)))
        np.testing.assert_array_equal(out.weights, w)


class TestMeanIdentity:
    def test_identity_transition_zero_residual(self):
        rng = np.random.default_rng(2)
        prior = Ensemble(rng.standard_normal((3, 8)))
        out = et_transform(prior, TransitionMatrix(np.eye(8)))
        assert mean_identity_check(prior, out, uniform(8)) == 0.0

    @pytest.mark.parametrize("m", [2, 5, 13, 27, 50])
    def test_transport_transform_preserves_mean(self, m):
        rng = np.random.default_rng(m)
        for _ in range(20):
            states = rng.standard_normal((rng.integers(1, 4), m))
            w = rng.random(m) + 1e-6
            w /= w.sum()
            prior = Ensemble(states)
            coupling = solve_transport(cost_matrix(prior), MarginalPair(w, uniform(m)))
            transition = transition_from_coupling(coupling, uniform(m))
            posterior = et_transform(prior, transition)
            assert mean_identity_check(prior, posterior, w) < 1e-10

    def test_gaussian_experiment_m40(self):
        samples = deterministic_quantile_samples(40, "gaussian", mean=1.0, variance=2.0)
        posterior, _, weights = scalar_transform_analysis(samples)
        prior = Ensemble(samples)
        assert mean_identity_check(prior, posterior, weights) < 1e-10

    def test_generalized_identity_with_weighted_prior(self):
        # non-uniform prior weights: sum_j w_j^f x_j^a == sum_i w_i^a x_i^f
        rng = np.random.default_rng(9)
        for m in (3, 8, 20):
            states = rng.standard_normal((2, m))
            w_f = rng.random(m) + 0.05
            w_f /= w_f.sum()
            w_a = rng.random(m) + 0.05
            w_a /= w_a.sum()
            prior = Ensemble(states, weights=w_f)
            coupling = solve_transport(cost_matrix(prior), MarginalPair(w_a, w_f))
            transition = transition_from_coupling(coupling, w_f)
            posterior = et_transform(prior, transition)
            np.testing.assert_array_equal(posterior.weights, w_f)
            assert mean_identity_check(prior, posterior, w_a) < 1e-10

    def test_convex_hull_containment(self):
        rng = np.random.default_rng(3)
        for m in (2, 10, 50):
            prior = Ensemble(rng.standard_normal((3, m)))
            transition = random_transition(rng, m)
            out = et_transform(prior, transition)
            lo = prior.states.min(axis=1, keepdims=True) - 1e-12
            hi = prior.states.max(axis=1, keepdims=True) + 1e-12
            assert np.all(out.states >= lo) and np.all(out.states <= hi)

    @pytest.mark.parametrize("m", [10, 40, 100])
    def test_scalar_transform_is_monotone(self, m):
        samples = deterministic_quantile_samples(m, "gaussian", mean=1.0, variance=2.0)
        posterior, _, _ = scalar_transform_analysis(samples)
        assert np.all(np.diff(posterior.states[0]) >= -1e-12)


class TestOtResample:
    def test_identity_transition_returns_prior(self):
        rng_state = np.random.default_rng(4)
        prior = Ensemble(rng_state.standard_normal((2, 7)))
        for seed in (0, 1, 99):
            out = ot_resample(prior, TransitionMatrix(np.eye(7)), np.random.default_rng(seed))
            np.testing.assert_array_equal(out.states, prior.states)

    def test_unit_vector_column(self):
        prior = Ensemble(np.array([[10.0, 20.0, 30.0]]))
        p = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        for seed in range(5):
            out = ot_resample(prior, TransitionMatrix(p), np.random.default_rng(seed))
            np.testing.assert_array_equal(out.states, [[10.0, 10.0, 30.0]])

    def test_members_are_copies_of_prior(self):
        rng = np.random.default_rng(5)
        prior = Ensemble(rng.standard_normal((3, 6)))
        out = ot_resample(prior, random_transition(rng, 6), rng)
        for j in range(6):
            assert any(
                np.array_equal(out.states[:, j], prior.states[:, i]) for i in range(6)
            )

    def test_categorical_frequency(self):
        # column 2 of the worked example draws member 2 with probability 1/2
        prior = Ensemble(np.array([[0.0, 1.0]]))
        transition = TransitionMatrix(np.array([[1.0, 0.5], [0.0, 0.5]]))
        rng = np.random.default_rng(12345)
        n = 100_000
        hits = 0
        for _ in range(n):
            out = ot_resample(prior, transition, rng)
            hits += out.states[0, 1] == 1.0
        assert hits / n == pytest.approx(0.5, abs=0.01)

    def test_seeded_reproducibility(self):
        rng_state = np.random.default_rng(6)
        prior = Ensemble(rng_state.standard_normal((2, 9)))
        transition = random_transition(rng_state, 9)
        a = ot_resample(prior, transition, np.random.default_rng(7))
        b = ot_resample(prior, transition, np.random.default_rng(7))
        np.testing.assert_array_equal(a.states, b.states)

    def test_bad_columns_rejected(self):
        prior = Ensemble(np.zeros((1, 2)))
        with pytest.raises(ValueError):
            ot_resample(
                prior,
                TransitionMatrix(np.array([[0.9, 0.5], [0.0, 0.5]])),
                np.random.default_rng(0),
            )

    def test_resampling_unbiasedness(self):
        # mean of the resampled ensemble estimates sum_i w_i x_i over seeds
        prior = Ensemble(np.array([[0.0, 1.0, 4.0]]))
        w = np.array([0.5, 0.3, 0.2])
        coupling = solve_transport(
            cost_matrix(prior), MarginalPair(w, np.full(3, 1 / 3))
        )
        transition = transition_from_coupling(coupling, np.full(3, 1 / 3))
        target = float(prior.states[0] @ w)
        rng = np.random.default_rng(8)
        reps = 10_000
        means = np.empty(reps)
        for r in range(reps):
            means[r] = ot_resample(prior, transition, rng).states.mean()
        se = means.std(ddof=1) / np.sqrt(reps)
        assert abs(means.mean() - target) < 3 * se
