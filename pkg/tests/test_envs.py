import numpy as np
import pytest

from boomlab.envs import (
    DEFAULT_EPISODE_LIMIT,
    EpisodeDoneError,
    PendulumSwingup,
    PointMassReach,
    UnknownEnvironmentError,
    available_environments,
    make_env,
)


class TestRegistry:
    """Environments by name"""

    def test_available(self):
        assert available_environments() == ("pendulum", "pointmass")

    @pytest.mark.parametrize(
        "name, env_class", [("pointmass", PointMassReach), ("pendulum", PendulumSwingup)]
    )
    def test_make(self, name, env_class):
        env = make_env(name, episode_limit=10)
        assert isinstance(env, env_class)
        assert env.episode_limit == 10

    def test_unknown(self):
        with pytest.raises(UnknownEnvironmentError):
            make_env("humanoid")


@pytest.mark.parametrize("name", ["pointmass", "pendulum"])
class TestEpisodes:
    """Episode life cycle, common to every environment"""

    def test_reset_determinism(self, name):
        env = make_env(name)
        np.testing.assert_array_equal(env.reset(3), env.reset(3))
        assert env.reset(3).shape == (env.observation_dim,)
        assert env.state.step_count == 0

    def test_step_before_reset(self, name):
        with pytest.raises(EpisodeDoneError):
            make_env(name).step(np.zeros(make_env(name).action_dim))

    def test_time_limit(self, name):
        env = make_env(name)
        env.reset(0)
        results = [env.step(np.zeros(env.action_dim)) for _ in range(DEFAULT_EPISODE_LIMIT)]
        assert [result.done for result in results] == [False] * (DEFAULT_EPISODE_LIMIT - 1) + [True]
        with pytest.raises(EpisodeDoneError):
            env.step(np.zeros(env.action_dim))

    def test_rewards_bounded(self, name):
        env = make_env(name)
        rng = np.random.default_rng(42)
        for episode in range(20):
            env.reset(episode)
            for _ in range(DEFAULT_EPISODE_LIMIT):
                result = env.step(rng.uniform(-1.0, 1.0, size=env.action_dim))
                assert 0.0 <= result.reward <= 1.0
                assert np.all(np.isfinite(result.observation))

    def test_deterministic_dynamics(self, name):
        actions = np.random.default_rng(42).uniform(-1.0, 1.0, size=(50, make_env(name).action_dim))
        trajectories = []
        for _ in range(2):
            env = make_env(name)
            env.reset(5)
            trajectories.append([env.step(action).observation for action in actions])
        np.testing.assert_array_equal(trajectories[0], trajectories[1])

    def test_actions_clipped(self, name):
        first, second = make_env(name), make_env(name)
        first.reset(1)
        second.reset(1)
        np.testing.assert_array_equal(
            first.step(np.full(first.action_dim, 5.0)).observation,
            second.step(np.ones(second.action_dim)).observation,
        )


class TestPointMass:
    """Planar reaching task"""

    def test_at_goal(self):
        env = PointMassReach()
        env.reset(0)
        env.state.values = np.zeros(4)
        result = env.step(np.zeros(2))
        assert result.reward == 1.0
        np.testing.assert_array_equal(result.observation, np.zeros(4))

    def test_rest_is_fixed_point(self):
        env = PointMassReach()
        observation = env.reset(0)
        first = env.step(np.zeros(2))
        second = env.step(np.zeros(2))
        np.testing.assert_array_equal(first.observation, observation)
        assert first.reward == second.reward

    def test_initial_state_ranges(self):
        env = PointMassReach()
        for seed in range(20):
            observation = env.reset(seed)
            assert np.all(np.abs(observation[:2]) <= 1.0)
            np.testing.assert_array_equal(observation[2:], 0.0)


class TestPendulum:
    """Swing-up task"""

    def test_upright(self):
        env = PendulumSwingup()
        env.reset(0)
        env.state.values = np.zeros(2)
        result = env.step(np.zeros(1))
        assert result.reward == 1.0
        np.testing.assert_array_equal(result.observation, [1.0, 0.0, 0.0])

    def test_observation_on_unit_circle(self):
        env = PendulumSwingup()
        observation = env.reset(0)
        assert observation[0] ** 2 + observation[1] ** 2 == pytest.approx(1.0)
        assert observation[0] < -0.99

    def test_energy_conserved(self):
        env = PendulumSwingup(damping=0.0)
        env.reset(0)
        env.state.values = np.array([2.6, 0.0])
        initial = env.energy(env.state.values)
        for _ in range(DEFAULT_EPISODE_LIMIT):
            env.step(np.zeros(1))
        assert env.energy(env.state.values) == pytest.approx(initial, abs=1e-3)
