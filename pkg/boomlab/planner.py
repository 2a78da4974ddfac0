import dataclasses
import json
import logging
import typing

import numpy as np

from .np_utils import SeedLike, make_rng, softmax
from .policy import PolicyNetwork, surrogate_from_candidates
from .world_model import WorldModel, latent_step, predicted_reward, q_value

_logger = logging.getLogger(__package__)


@dataclasses.dataclass(frozen=True)
class PlanConfig:  # pylint: disable=too-many-instance-attributes
    horizon: int = 3
    iterations: int = 6
    population: int = 512
    num_elites: int = 64
    policy_prior_samples: int = 24
    std_min: float = 0.05
    std_max: float = 2.0
    temperature: float = 1.0
    train_mode_noise: bool = True
    discount_returns: bool = False
    gamma: float = 0.99
    # more iterations are run for high-dimensional action spaces
    high_dim_iterations: int = 8
    high_dim_threshold: int = 20

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"planning horizon must be at least 1 : {self.horizon}")
        if not 0 < self.num_elites <= self.population:
            raise ValueError(
                f"elites count ({self.num_elites}) must lie in [1, {self.population}]"
            )
        if not 0 <= self.policy_prior_samples < self.population:
            raise ValueError(
                f"policy prior samples ({self.policy_prior_samples}) must lie in "
                f"[0, {self.population})"
            )
        if not 0.0 < self.std_min <= self.std_max:
            raise ValueError(f"planner std bounds are unordered : {self.std_min}, {self.std_max}")
        if self.temperature <= 0.0:
            raise ValueError(f"planner temperature must be positive : {self.temperature}")

    def iterations_for(self, action_dim: int) -> int:
        if action_dim > self.high_dim_threshold:
            return self.high_dim_iterations
        return self.iterations


@dataclasses.dataclass
class TrajectoryDistribution:
    """Per-timestep factorized Gaussian over action sequences, both arrays being (H, action_dim)"""

    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def default(cls, horizon: int, action_dim: int, std_max: float) -> "TrajectoryDistribution":
        return cls(np.zeros((horizon, action_dim)), np.full((horizon, action_dim), std_max))

    @property
    def horizon(self) -> int:
        return self.mu.shape[0]

    @property
    def action_dim(self) -> int:
        return self.mu.shape[1]

    def shifted(self, std_max: float) -> "TrajectoryDistribution":
        """Receding horizon warm start : drop the first step, append `(0, std_max)` at the tail"""
        return TrajectoryDistribution(
            np.concatenate([self.mu[1:], np.zeros((1, self.action_dim))]),
            np.concatenate([self.sigma[1:], np.full((1, self.action_dim), std_max)]),
        )


@dataclasses.dataclass
class PlanResult:  # pylint: disable=too-many-instance-attributes
    action: np.ndarray
    final_dist: TrajectoryDistribution
    candidate_returns: np.ndarray
    elite_weights: np.ndarray
    elite_returns: np.ndarray
    # value-weighted statistics of the elites first actions
    surrogate_mean: np.ndarray
    surrogate_std: np.ndarray
    best_elite_returns: typing.List[float] = dataclasses.field(default_factory=list)

    def as_trace(self) -> dict:
        return {
            "action": self.action.tolist(),
            "mu": self.final_dist.mu.tolist(),
            "sigma": self.final_dist.sigma.tolist(),
            "candidate_returns": self.candidate_returns.tolist(),
            "elite_weights": self.elite_weights.tolist(),
            "best_elite_returns": self.best_elite_returns,
        }


class PlanningModel(typing.Protocol):
    """Latent model the planner scores trajectories with"""

    action_dim: int

    def step(self, latents: np.ndarray, actions: np.ndarray) -> np.ndarray: ...

    def reward(self, latents: np.ndarray, actions: np.ndarray) -> np.ndarray: ...

    def terminal_value(self, latents: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...

    def prior_action(self, latents: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


class WorldModelPlanningView:
    """
    `PlanningModel` backed by the learned world model, terminal values and prior trajectories
    coming from the policy.
    """

    def __init__(self, model: WorldModel, policy: PolicyNetwork):
        self.model = model
        self.policy = policy
        self.action_dim = model.spec.action_dim

    def step(self, latents, actions):
        return latent_step(self.model, latents, actions)

    def reward(self, latents, actions):
        return predicted_reward(self.model, latents, actions)

    def terminal_value(self, latents, rng):
        return q_value(self.model, latents, self.policy.sample(latents, rng))

    def prior_action(self, latents, rng):
        return self.policy.sample(latents, rng)


def rollout_return(
    model: PlanningModel,
    z0: np.ndarray,
    actions: np.ndarray,
    cfg: PlanConfig,
    seed: SeedLike = None,
) -> np.ndarray:
    """
    Predicted return of action sequences from latent `z0` : rewards along the latent rollout plus
    the terminal value, discounted only when `cfg.discount_returns` is set.
    `actions` is either one (H, action_dim) sequence or a (N, H, action_dim) batch.
    """
    rng = make_rng(seed)
    actions = np.clip(np.asarray(actions, dtype=np.float64), -1.0, 1.0)
    is_single = actions.ndim == 2
    if is_single:
        actions = actions[None]

    latents = np.repeat(np.atleast_2d(z0), actions.shape[0], axis=0)
    returns = np.zeros(actions.shape[0])
    discount = 1.0
    for t in range(actions.shape[1]):
        returns += discount * model.reward(latents, actions[:, t])
        latents = model.step(latents, actions[:, t])
        if cfg.discount_returns:
            discount *= cfg.gamma
    returns += discount * model.terminal_value(latents, rng)

    return returns[0] if is_single else returns


def softmax_weights(returns: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return softmax(np.asarray(returns, dtype=np.float64), temperature=temperature)


@dataclasses.dataclass
class IterationStats:
    candidate_returns: np.ndarray
    elite_indices: np.ndarray
    elite_weights: np.ndarray
    elite_first_actions: np.ndarray

    @property
    def elite_returns(self) -> np.ndarray:
        return self.candidate_returns[self.elite_indices]


def mppi_update(
    candidates: np.ndarray, returns: np.ndarray, cfg: PlanConfig
) -> typing.Tuple[TrajectoryDistribution, np.ndarray, np.ndarray]:
    """
    Weighted statistics of the `cfg.num_elites` best candidates, weights being the softmax of
    their returns. Ties keep candidate order.

    :returns tuple: new distribution, elite indices (best first) and elite weights
    """
    elite_indices = np.argsort(-returns, kind="stable")[: cfg.num_elites]
    weights = softmax_weights(returns[elite_indices], cfg.temperature)
    elites = candidates[elite_indices]

    mu = np.tensordot(weights, elites, axes=1)
    sigma = np.sqrt(np.tensordot(weights, (elites - mu) ** 2, axes=1))
    dist = TrajectoryDistribution(
        np.clip(mu, -1.0, 1.0), np.clip(sigma, cfg.std_min, cfg.std_max)
    )
    return dist, elite_indices, weights


def _prior_trajectories(
    model: PlanningModel, z0: np.ndarray, count: int, horizon: int, rng: np.random.Generator
) -> np.ndarray:
    latents = np.repeat(np.atleast_2d(z0), count, axis=0)
    actions = []
    for _ in range(horizon):
        step_actions = np.clip(model.prior_action(latents, rng), -1.0, 1.0)
        actions.append(step_actions)
        latents = model.step(latents, step_actions)
    return np.stack(actions, axis=1)


def mppi_iterate(
    model: PlanningModel,
    z0: np.ndarray,
    dist: TrajectoryDistribution,
    cfg: PlanConfig,
    seed: SeedLike,
) -> typing.Tuple[TrajectoryDistribution, IterationStats]:
    """
    One planning round : `policy_prior_samples` trajectories from the policy prior plus the rest
    of the population drawn from `dist`, all scored by `rollout_return` in a fixed order.
    """
    rng = make_rng(seed)
    num_sampled = cfg.population - cfg.policy_prior_samples
    sampled = np.clip(
        dist.mu + dist.sigma * rng.standard_normal((num_sampled, dist.horizon, dist.action_dim)),
        -1.0,
        1.0,
    )
    if cfg.policy_prior_samples > 0:
        prior = _prior_trajectories(model, z0, cfg.policy_prior_samples, dist.horizon, rng)
        candidates = np.concatenate([prior, sampled])
    else:
        candidates = sampled

    returns = rollout_return(model, z0, candidates, cfg, rng)
    new_dist, elite_indices, weights = mppi_update(candidates, returns, cfg)
    return new_dist, IterationStats(
        candidate_returns=returns,
        elite_indices=elite_indices,
        elite_weights=weights,
        elite_first_actions=candidates[elite_indices, 0],
    )


def plan(  # pylint: disable=too-many-arguments
    model: PlanningModel,
    z0: np.ndarray,
    warm_start: typing.Optional[TrajectoryDistribution],
    cfg: PlanConfig,
    seed: SeedLike,
    train_mode: bool = False,
) -> PlanResult:
    """
    Run MPPI iterations from `warm_start` (or the default distribution).
    Evaluation mode executes the first mean action, while training mode samples around it
    (when `cfg.train_mode_noise` is set).
    """
    rng = make_rng(seed)
    dist = warm_start
    if dist is None:
        dist = TrajectoryDistribution.default(cfg.horizon, model.action_dim, cfg.std_max)

    best_elite_returns = []
    stats: typing.Optional[IterationStats] = None
    for _ in range(cfg.iterations_for(dist.action_dim)):
        dist, stats = mppi_iterate(model, z0, dist, cfg, rng)
        best_elite_returns.append(float(stats.elite_returns[0]))
    assert stats is not None

    action = dist.mu[0].copy()
    if train_mode and cfg.train_mode_noise:
        action = np.clip(action + dist.sigma[0] * rng.standard_normal(dist.action_dim), -1.0, 1.0)

    surrogate_mean, surrogate_std = surrogate_from_candidates(
        stats.elite_first_actions, stats.elite_weights
    )
    return PlanResult(
        action=action,
        final_dist=dist,
        candidate_returns=stats.candidate_returns,
        elite_weights=stats.elite_weights,
        elite_returns=stats.elite_returns,
        surrogate_mean=surrogate_mean,
        surrogate_std=surrogate_std,
        best_elite_returns=best_elite_returns,
    )


def write_plan_trace(stream: typing.TextIO, env_step: int, result: PlanResult) -> None:
    """Append `result` as one JSON line (debugging aid)"""
    stream.write(json.dumps({"env_step": env_step, **result.as_trace()}) + "\n")
