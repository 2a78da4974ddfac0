import math

import numpy as np
import pytest
from scipy import integrate

from boomlab.approximator import MlpSpec, adam_step, init_optimizer, init_params
from boomlab.policy import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    SURROGATE_STD_FLOOR,
    ActionDistribution,
    AlignmentConfig,
    AlignmentMetric,
    PolicyNetwork,
    WeightMode,
    alignment_loss,
    alignment_weights,
    bootstrapped_policy_loss,
    entropy,
    gaussian_kl_diag,
    init_policy,
    log_prob,
    log_prob_grad,
    max_q_loss,
    policy_forward,
    policy_update,
    reverse_kl_surrogate_loss,
    sample_action,
    soft_q_weights,
    surrogate_from_candidates,
    weighted_nll,
)
from boomlab.world_model import q_value, rollout_latents

from .conftest import assert_grad_close, numerical_grad, random_batch, randomized_model


@pytest.fixture
def tiny_policy():
    return init_policy(latent_dim=4, action_dim=2, hidden_dims=(6,), seed=1)


def _unit_gaussian(dim: int, squashed: bool = False) -> ActionDistribution:
    return ActionDistribution(np.zeros((1, dim)), np.zeros((1, dim)), squashed)


class TestActionDistribution:
    """Gaussian (optionally squashed) action distributions"""

    def test_log_prob_at_mean(self):
        assert log_prob(_unit_gaussian(2), np.zeros((1, 2)))[0] == pytest.approx(
            -math.log(2.0 * math.pi), abs=1e-6
        )

    def test_squashed_change_of_variables(self):
        rng = np.random.default_rng(42)
        mean = rng.normal(size=(5, 3))
        log_std = rng.uniform(-1.0, 0.5, size=(5, 3))
        actions = rng.uniform(-0.95, 0.95, size=(5, 3))

        squashed = log_prob(ActionDistribution(mean, log_std, True), actions)
        pre_squash = log_prob(ActionDistribution(mean, log_std, False), np.arctanh(actions))
        np.testing.assert_allclose(
            squashed, pre_squash - np.sum(np.log(1.0 - actions**2), axis=-1)
        )

    def test_squashed_density_normalized(self):
        dist = ActionDistribution(np.array([[0.3]]), np.array([[-0.5]]), True)
        total, _ = integrate.quad(
            lambda action: math.exp(log_prob(dist, np.array([[action]]))[0]), -1.0, 1.0
        )
        assert total == pytest.approx(1.0, abs=1e-5)

    @pytest.mark.parametrize("squashed", [False, True])
    def test_log_prob_gradient(self, squashed):
        rng = np.random.default_rng(42)
        mean = rng.normal(scale=0.5, size=(4, 2))
        log_std = rng.uniform(-1.0, 0.5, size=(4, 2))
        actions = rng.uniform(-0.9, 0.9, size=(4, 2))

        grad_mean, grad_log_std = log_prob_grad(
            ActionDistribution(mean, log_std, squashed), actions
        )
        assert_grad_close(
            grad_mean,
            numerical_grad(
                lambda point: float(
                    np.sum(log_prob(ActionDistribution(point, log_std, squashed), actions))
                ),
                mean,
            ),
        )
        assert_grad_close(
            grad_log_std,
            numerical_grad(
                lambda point: float(
                    np.sum(log_prob(ActionDistribution(mean, point, squashed), actions))
                ),
                log_std,
            ),
        )

    def test_entropy(self):
        expected = 0.5 * (1.0 + math.log(2.0 * math.pi))
        assert entropy(_unit_gaussian(1))[0] == pytest.approx(expected)
        dist = ActionDistribution(np.zeros((1, 2)), np.full((1, 2), math.log(2.0)))
        assert entropy(dist)[0] == pytest.approx(
            2.0 * math.log(2.0) + (1.0 + math.log(2.0 * math.pi))
        )

    def test_sample_moments(self):
        count = 100_000
        dist = ActionDistribution(
            np.tile([1.0, -1.0], (count, 1)), np.tile([0.0, math.log(2.0)], (count, 1)), False
        )
        samples = sample_action(dist, 42)
        np.testing.assert_allclose(samples.mean(axis=0), [1.0, -1.0], atol=0.03)
        np.testing.assert_allclose(samples.std(axis=0), [1.0, 2.0], atol=0.03)

    def test_squashed_samples_inside_bounds(self):
        dist = ActionDistribution(np.full((1000, 2), 30.0), np.full((1000, 2), LOG_STD_MAX))
        samples = sample_action(dist, 0)
        assert np.all(np.abs(samples) < 1.0)

    def test_sample_determinism(self):
        dist = ActionDistribution(np.zeros((10, 2)), np.zeros((10, 2)))
        np.testing.assert_array_equal(sample_action(dist, 3), sample_action(dist, 3))


class TestPolicyNetwork:
    """Latent to action distribution mapping"""

    def test_shapes(self, tiny_policy):
        dist = policy_forward(tiny_policy, np.zeros((7, 4)))
        assert dist.mean.shape == dist.log_std.shape == (7, 2)
        assert tiny_policy.sample(np.zeros((7, 4)), 0).shape == (7, 2)

    def test_log_std_saturation(self, tiny_policy):
        params = tiny_policy.params.copy()
        params.tensor("weight1")[...] = 0.0
        params.tensor("bias1")[...] = [0.0, 0.0, 100.0, -100.0]

        dist = tiny_policy.with_params(params).forward(np.ones((1, 4)))
        np.testing.assert_array_equal(dist.log_std, [[LOG_STD_MAX, LOG_STD_MIN]])

    def test_log_std_range(self, tiny_policy):
        latents = np.random.default_rng(42).normal(scale=10.0, size=(50, 4))
        log_std = policy_forward(tiny_policy, latents).log_std
        assert np.all((log_std >= LOG_STD_MIN) & (log_std <= LOG_STD_MAX))

    def test_output_dimension_mismatch(self):
        spec = MlpSpec(4, (6,), 3)
        with pytest.raises(ValueError):
            PolicyNetwork(spec, init_params(spec, 0), action_dim=2)


class TestAlignmentWeights:
    """Soft Q-weights over planner actions"""

    def test_two_values(self):
        weights = soft_q_weights(np.array([math.log(2.0), 0.0]), 1.0)
        np.testing.assert_allclose(weights, [2 / 3, 1 / 3])

    def test_shift_invariance(self):
        q_values = np.random.default_rng(42).normal(size=10)
        np.testing.assert_allclose(
            soft_q_weights(q_values, 0.5), soft_q_weights(q_values + 1000.0, 0.5)
        )

    def test_large_values_stay_finite(self):
        weights = soft_q_weights(np.array([1e4, 0.0, -1e4]), 0.1)
        np.testing.assert_allclose(weights, [1.0, 0.0, 0.0])

    def test_high_temperature_is_uniform(self):
        np.testing.assert_allclose(soft_q_weights(np.array([1.0, 2.0, 3.0]), 1e9), 1 / 3)

    def test_low_temperature_is_argmax(self):
        weights = soft_q_weights(np.array([0.3, 1.2, -0.5, 1.199]), 1e-6)
        np.testing.assert_array_equal(weights, [0.0, 1.0, 0.0, 0.0])

    def test_low_temperature_splits_ties(self):
        weights = soft_q_weights(np.array([1.0, 0.2, 1.0, -3.0]), 1e-6)
        np.testing.assert_allclose(weights, [0.5, 0.0, 0.5, 0.0])

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_invalid_temperature(self, tau):
        with pytest.raises(ValueError):
            soft_q_weights(np.zeros(3), tau)

    def test_non_finite_values(self):
        with pytest.raises(ValueError):
            soft_q_weights(np.array([0.0, math.nan]), 1.0)

    def test_uniform_mode(self):
        cfg = AlignmentConfig(weight_mode=WeightMode.UNIFORM)
        np.testing.assert_array_equal(alignment_weights(np.array([5.0, 0.0, -5.0, 1.0]), cfg), 0.25)

    def test_default_coefficient(self):
        assert AlignmentConfig().effective_lambda(6) == pytest.approx(0.006)
        assert AlignmentConfig(lambda_align=0.5).effective_lambda(6) == 0.5

    @pytest.mark.parametrize(
        "kwargs", [{"tau": 0.0}, {"lambda_align": -1.0}, {"entropy_coeff": -1e-4}]
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            AlignmentConfig(**kwargs)


class TestAlignmentLoss:
    """Forward KL (weighted likelihood) and reverse KL surrogate alignment"""

    def test_single_weight_is_negative_log_likelihood(self):
        rng = np.random.default_rng(42)
        dist = ActionDistribution(rng.normal(size=(3, 2)), rng.uniform(-1.0, 0.0, size=(3, 2)))
        actions = rng.uniform(-0.9, 0.9, size=(3, 2))
        loss, _, _ = weighted_nll(dist, actions, np.array([0.0, 1.0, 0.0]))
        assert loss == pytest.approx(-log_prob(dist, actions)[1])

    def test_alignment_gradient(self, tiny_policy):
        rng = np.random.default_rng(42)
        latents = rng.normal(size=(5, 4))
        actions = rng.uniform(-0.9, 0.9, size=(5, 2))
        q_values = rng.normal(size=5)
        cfg = AlignmentConfig()

        _, grad = alignment_loss(tiny_policy, latents, actions, q_values, cfg)
        numeric = numerical_grad(
            lambda values: alignment_loss(
                tiny_policy.with_params(tiny_policy.params.with_values(values)),
                latents,
                actions,
                q_values,
                cfg,
            )[0],
            tiny_policy.params.values,
        )
        assert_grad_close(grad, numeric)

    def test_alignment_training_lowers_loss(self, tiny_policy):
        rng = np.random.default_rng(42)
        latents = rng.normal(size=(16, 4))
        actions = np.clip(0.5 * latents[:, :2], -0.9, 0.9)
        q_values = rng.normal(size=16)
        cfg = AlignmentConfig()

        policy = tiny_policy
        opt_state = init_optimizer(policy.params, 1e-2, 20.0)
        initial, _ = alignment_loss(policy, latents, actions, q_values, cfg)
        for _ in range(200):
            _, grad = alignment_loss(policy, latents, actions, q_values, cfg)
            params, opt_state = adam_step(opt_state, policy.params, grad)
            policy = policy.with_params(params)

        final, _ = alignment_loss(policy, latents, actions, q_values, cfg)
        assert final < initial

    def test_frozen_batch_likelihood_keeps_decreasing(self, tiny_model_spec, tiny_policy):
        model = randomized_model(tiny_model_spec, seed=4)
        batch = random_batch(tiny_model_spec, batch_size=4, horizon=1, seed=4)
        cfg = AlignmentConfig(lambda_align=1e4, entropy_coeff=0.0)

        policy = tiny_policy
        opt_state = init_optimizer(policy.params, 1e-4, 1e12)
        history = []
        for _ in range(500):
            policy, opt_state, metrics = policy_update(policy, opt_state, model, batch, cfg, 0)
            history.append(metrics["alignment_loss"])

        history = np.asarray(history)
        assert np.all(np.diff(history) <= 1e-9 * np.abs(history[:-1]))
        assert history[-1] < history[0]

    def test_surrogate_statistics(self):
        actions = np.array([[-0.5, 0.2], [0.5, 0.2]])
        mean, std = surrogate_from_candidates(actions, np.array([0.5, 0.5]))
        np.testing.assert_allclose(mean, [0.0, 0.2])
        np.testing.assert_allclose(std, [0.5, SURROGATE_STD_FLOOR])

    def test_gaussian_kl(self):
        assert gaussian_kl_diag(
            np.array([0.0]), np.array([0.0]), np.array([1.0]), np.array([1.0])
        ) == pytest.approx(0.5)
        assert gaussian_kl_diag(
            np.array([0.3, -0.2]), np.log([0.5, 2.0]), np.array([0.3, -0.2]), np.array([0.5, 2.0])
        ) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("squashed", [False, True])
    def test_reverse_kl_gradient(self, squashed):
        policy = init_policy(4, 2, (6,), seed=2, squashed=squashed)
        rng = np.random.default_rng(42)
        latents = rng.normal(size=(5, 4))
        surrogate_mean = rng.uniform(-0.5, 0.5, size=(5, 2))
        surrogate_std = rng.uniform(0.2, 0.6, size=(5, 2))
        weights = rng.dirichlet(np.ones(5))

        _, grad = reverse_kl_surrogate_loss(policy, latents, surrogate_mean, surrogate_std, weights)
        numeric = numerical_grad(
            lambda values: reverse_kl_surrogate_loss(
                policy.with_params(policy.params.with_values(values)),
                latents,
                surrogate_mean,
                surrogate_std,
                weights,
            )[0],
            policy.params.values,
        )
        assert_grad_close(grad, numeric)


def _policy_configs():
    return [
        AlignmentConfig(lambda_align=1.0),
        AlignmentConfig(lambda_align=1.0, weight_mode=WeightMode.UNIFORM),
        AlignmentConfig(lambda_align=1.0, metric=AlignmentMetric.REVERSE_KL_SURROGATE),
    ]


class TestBootstrappedPolicyLoss:
    """Max-Q objective with alignment regularization"""

    @pytest.mark.parametrize("cfg", _policy_configs())
    def test_matches_finite_differences(self, tiny_model_spec, tiny_policy, cfg):
        model = randomized_model(tiny_model_spec, seed=3)
        batch = random_batch(tiny_model_spec, seed=3)

        _, grad, _ = bootstrapped_policy_loss(tiny_policy, model, batch, cfg, 5, q_scale=2.0)
        numeric = numerical_grad(
            lambda values: bootstrapped_policy_loss(
                tiny_policy.with_params(tiny_policy.params.with_values(values)),
                model,
                batch,
                cfg,
                5,
                q_scale=2.0,
            )[0],
            tiny_policy.params.values,
        )
        assert_grad_close(grad, numeric)

    def test_max_q_gradient(self, tiny_model_spec, tiny_policy):
        model = randomized_model(tiny_model_spec, seed=3)
        batch = random_batch(tiny_model_spec, seed=3)
        cfg = AlignmentConfig()

        _, grad, _ = max_q_loss(tiny_policy, model, batch, cfg, 5)
        numeric = numerical_grad(
            lambda values: max_q_loss(
                tiny_policy.with_params(tiny_policy.params.with_values(values)),
                model,
                batch,
                cfg,
                5,
            )[0],
            tiny_policy.params.values,
        )
        assert_grad_close(grad, numeric)

    def test_zero_coefficient_is_max_q(self, tiny_model_spec, tiny_policy):
        model = randomized_model(tiny_model_spec)
        batch = random_batch(tiny_model_spec)
        cfg = AlignmentConfig(lambda_align=0.0)

        loss, grad, terms = bootstrapped_policy_loss(tiny_policy, model, batch, cfg, 0)
        max_q, max_q_grad, _ = max_q_loss(tiny_policy, model, batch, cfg, 0)
        assert loss == pytest.approx(max_q)
        np.testing.assert_allclose(grad, max_q_grad)

    def test_terms(self, tiny_model_spec, tiny_policy):
        model = randomized_model(tiny_model_spec)
        batch = random_batch(tiny_model_spec)
        cfg = AlignmentConfig(lambda_align=0.3, entropy_coeff=0.01)

        loss, _, terms = bootstrapped_policy_loss(tiny_policy, model, batch, cfg, 0)
        assert loss == pytest.approx(
            terms["max_q"] + 0.3 * terms["alignment_loss"] - 0.01 * terms["entropy"]
        )
        assert terms["policy_loss"] == loss
        assert terms["max_q"] == pytest.approx(-terms["q_mean"])

    def test_hand_evaluation(self, tiny_model_spec, tiny_policy):
        model = randomized_model(tiny_model_spec, seed=5)
        batch = random_batch(tiny_model_spec, batch_size=2, horizon=0, seed=5)
        cfg = AlignmentConfig(lambda_align=0.3, tau=0.5, entropy_coeff=0.01)
        q_scale = 2.0

        loss, _, _ = bootstrapped_policy_loss(tiny_policy, model, batch, cfg, 7, q_scale=q_scale)

        latents = rollout_latents(model, batch).reshape(2, 4)
        stored = batch.actions.reshape(2, 2)
        dist = policy_forward(tiny_policy, latents)
        noise = np.random.default_rng(7).standard_normal((2, 2))
        sampled = np.tanh(dist.mean + dist.std * noise)
        q_sampled = q_value(model, latents, sampled)
        q_stored = q_value(model, latents, stored)

        normalizer = sum(math.exp(q / 0.5) for q in q_stored)
        expected_q, expected_nll, expected_entropy = 0.0, 0.0, 0.0
        for row in range(2):
            weight = math.exp(q_stored[row] / 0.5) / normalizer
            expected_q += q_sampled[row] / 2
            for dim in range(2):
                mean, log_std = dist.mean[row, dim], dist.log_std[row, dim]
                action = stored[row, dim]
                normalized = (math.atanh(action) - mean) / math.exp(log_std)
                nll = (
                    0.5 * normalized**2
                    + log_std
                    + 0.5 * math.log(2.0 * math.pi)
                    + math.log(1.0 - action**2)
                )
                expected_nll += weight * nll
                expected_entropy += (log_std + 0.5 * (1.0 + math.log(2.0 * math.pi))) / 2

        expected = -expected_q / q_scale + 0.3 * expected_nll - 0.01 * expected_entropy
        assert loss == pytest.approx(expected, rel=1e-9)

    def test_uses_every_rolled_latent(self, tiny_model_spec, tiny_policy):
        model = randomized_model(tiny_model_spec)
        batch = random_batch(tiny_model_spec, batch_size=2, horizon=3)
        cfg = AlignmentConfig(lambda_align=1.0, weight_mode=WeightMode.UNIFORM, entropy_coeff=0.0)

        _, _, terms = bootstrapped_policy_loss(tiny_policy, model, batch, cfg, 0)
        latents = rollout_latents(model, batch).reshape(-1, 4)
        dist = policy_forward(tiny_policy, latents)
        expected = -np.mean(log_prob(dist, batch.actions.reshape(-1, 2)))
        assert terms["alignment_loss"] == pytest.approx(expected)


class TestPolicyUpdate:
    """Optimizer step of the policy"""

    def test_update(self, tiny_model_spec, tiny_policy):
        model = randomized_model(tiny_model_spec)
        before = model.params.copy()
        batch = random_batch(tiny_model_spec)
        opt_state = init_optimizer(tiny_policy.params, 3e-4, 20.0)

        policy, new_state, metrics = policy_update(
            tiny_policy, opt_state, model, batch, AlignmentConfig(), 0
        )

        assert new_state.step_count == 1
        assert not np.array_equal(policy.params.values, tiny_policy.params.values)
        for name, params in model.params.online().items():
            np.testing.assert_array_equal(params.values, before.online()[name].values)
        assert metrics["grad_norm_policy"] <= 20.0 + 1e-9
        assert set(metrics) >= {"policy_loss", "max_q", "alignment_loss", "entropy", "q_mean"}
