import dataclasses
import enum
import logging
import typing

import numpy as np

from .approximator import (
    Activation,
    DivergenceError,
    ForwardCache,
    MlpSpec,
    OptimizerState,
    ParamSet,
    adam_step,
    backward,
    clip_global_norm,
    forward_with_cache,
    global_norm,
    init_params,
)
from .np_utils import LOG_2PI, SeedLike, make_rng, softmax
from .replay import SequenceBatch
from .world_model import WorldModel, q_value, q_value_and_action_grad, rollout_latents

_logger = logging.getLogger(__package__)

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0

# squashed actions are pulled inside (-1, 1) by this much before `arctanh`
SQUASH_EPSILON = 1e-6
SURROGATE_STD_FLOOR = 1e-6


class WeightMode(enum.Enum):
    SOFT_Q = "soft_q"
    UNIFORM = "uniform"


class AlignmentMetric(enum.Enum):
    FORWARD_KL = "forward_kl"
    REVERSE_KL_SURROGATE = "reverse_kl_surrogate"


@dataclasses.dataclass(frozen=True)
class AlignmentConfig:
    # `None` stands for `action_dim / 1000`
    lambda_align: typing.Optional[float] = None
    tau: float = 1.0
    entropy_coeff: float = 1e-4
    weight_mode: WeightMode = WeightMode.SOFT_Q
    metric: AlignmentMetric = AlignmentMetric.FORWARD_KL

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError(f"soft Q-weights temperature must be positive : {self.tau}")
        if self.lambda_align is not None and self.lambda_align < 0.0:
            raise ValueError(f"alignment coefficient must be non-negative : {self.lambda_align}")
        if self.entropy_coeff < 0.0:
            raise ValueError(f"entropy coefficient must be non-negative : {self.entropy_coeff}")

    def effective_lambda(self, action_dim: int) -> float:
        if self.lambda_align is None:
            return action_dim / 1000.0
        return self.lambda_align


@dataclasses.dataclass
class ActionDistribution:
    """Diagonal Gaussian over pre-squash actions, optionally followed by `tanh`"""

    mean: np.ndarray
    log_std: np.ndarray
    squashed: bool = True

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def action_dim(self) -> int:
        return self.mean.shape[-1]


@dataclasses.dataclass
class PolicyNetwork:
    """
    Network mapping latent states to `(mean, raw log std)`. Raw log std goes through a smooth
    `tanh` rescaling into `[log_std_min, log_std_max]`.
    """

    spec: MlpSpec
    params: ParamSet
    action_dim: int
    log_std_min: float = LOG_STD_MIN
    log_std_max: float = LOG_STD_MAX
    squashed: bool = True

    def __post_init__(self):
        if self.spec.output_dim != 2 * self.action_dim:
            raise ValueError(
                f"policy network outputs {self.spec.output_dim} values, "
                f"{2 * self.action_dim} expected"
            )
        if not self.log_std_min < self.log_std_max:
            raise ValueError(f"empty log std range : [{self.log_std_min}, {self.log_std_max}]")

    def forward(self, latents: np.ndarray) -> ActionDistribution:
        return policy_forward(self, latents)

    def sample(self, latents: np.ndarray, rng: SeedLike) -> np.ndarray:
        return sample_action(policy_forward(self, latents), rng)

    def with_params(self, params: ParamSet) -> "PolicyNetwork":
        return dataclasses.replace(self, params=params)

    def as_dict(self) -> dict:
        return {
            "spec": self.spec.as_dict(),
            "action_dim": self.action_dim,
            "log_std_min": self.log_std_min,
            "log_std_max": self.log_std_max,
            "squashed": self.squashed,
        }


def init_policy(  # pylint: disable=too-many-arguments
    latent_dim: int,
    action_dim: int,
    hidden_dims: typing.Sequence[int] = (128, 128),
    seed: SeedLike = 0,
    activation: Activation = Activation.MISH,
    layer_norm: bool = True,
    squashed: bool = True,
) -> PolicyNetwork:
    spec = MlpSpec(latent_dim, tuple(hidden_dims), 2 * action_dim, activation, layer_norm)
    return PolicyNetwork(spec, init_params(spec, seed), action_dim, squashed=squashed)


@dataclasses.dataclass
class _PolicyCache:
    network: ForwardCache
    tanh_raw_log_std: np.ndarray


def _forward_with_cache(
    policy: PolicyNetwork, latents: np.ndarray
) -> typing.Tuple[ActionDistribution, _PolicyCache]:
    outputs, cache = forward_with_cache(policy.spec, policy.params, latents)
    mean = outputs[..., : policy.action_dim]
    tanh_raw = np.tanh(outputs[..., policy.action_dim :])
    half_range = 0.5 * (policy.log_std_max - policy.log_std_min)
    log_std = policy.log_std_min + half_range * (tanh_raw + 1.0)
    return ActionDistribution(mean, log_std, policy.squashed), _PolicyCache(cache, tanh_raw)


def _backward(
    policy: PolicyNetwork,
    cache: _PolicyCache,
    grad_mean: np.ndarray,
    grad_log_std: np.ndarray,
) -> np.ndarray:
    grad_raw = (
        grad_log_std
        * 0.5
        * (policy.log_std_max - policy.log_std_min)
        * (1.0 - cache.tanh_raw_log_std**2)
    )
    grad, _ = backward(
        policy.spec, policy.params, cache.network, np.concatenate([grad_mean, grad_raw], axis=-1)
    )
    return grad


def policy_forward(policy: PolicyNetwork, latents: np.ndarray) -> ActionDistribution:
    dist, _ = _forward_with_cache(policy, latents)
    return dist


def _pre_squash(
    dist: ActionDistribution, actions: np.ndarray
) -> typing.Tuple[np.ndarray, typing.Optional[np.ndarray]]:
    actions = np.asarray(actions, dtype=np.float64)
    if not dist.squashed:
        return actions, None

    clipped = np.clip(actions, -1.0 + SQUASH_EPSILON, 1.0 - SQUASH_EPSILON)
    return np.arctanh(clipped), clipped


def log_prob(dist: ActionDistribution, actions: np.ndarray) -> np.ndarray:
    """
    Exact log density of `actions` (one per row), including the `tanh` change of variables
    when distribution is squashed.
    """
    pre_squash, clipped = _pre_squash(dist, actions)
    normalized = (pre_squash - dist.mean) / dist.std
    value = (
        -0.5 * np.sum(normalized**2, axis=-1)
        - np.sum(dist.log_std, axis=-1)
        - 0.5 * dist.action_dim * LOG_2PI
    )
    if clipped is not None:
        value = value - np.sum(np.log(1.0 - clipped**2), axis=-1)
    return value


def log_prob_grad(
    dist: ActionDistribution, actions: np.ndarray
) -> typing.Tuple[np.ndarray, np.ndarray]:
    """
    :returns tuple: gradient of `log_prob` with respect to `dist.mean` and `dist.log_std`
    """
    pre_squash, _ = _pre_squash(dist, actions)
    normalized = (pre_squash - dist.mean) / dist.std
    return normalized / dist.std, normalized**2 - 1.0


def entropy(dist: ActionDistribution) -> np.ndarray:
    """Closed-form entropy of the pre-squash Gaussian"""
    return np.sum(dist.log_std, axis=-1) + 0.5 * dist.action_dim * (1.0 + LOG_2PI)


def _reparameterize(dist: ActionDistribution, noise: np.ndarray) -> np.ndarray:
    pre_squash = dist.mean + dist.std * noise
    if not dist.squashed:
        return pre_squash

    # keeps samples strictly inside (-1, 1) even when `tanh` saturates
    return np.clip(np.tanh(pre_squash), -1.0 + SQUASH_EPSILON, 1.0 - SQUASH_EPSILON)


def sample_action(dist: ActionDistribution, seed: SeedLike) -> np.ndarray:
    """Reparameterized draw `squash(mean + std * eps)` with `eps ~ N(0, I)`"""
    rng = make_rng(seed)
    return _reparameterize(dist, rng.standard_normal(np.shape(dist.mean)))


def soft_q_weights(q_values: np.ndarray, tau: float) -> np.ndarray:
    """`w_i = exp(q_i / tau) / sum_j exp(q_j / tau)`, computed with max-subtraction"""
    if tau <= 0.0:
        raise ValueError(f"soft Q-weights temperature must be positive : {tau}")
    q_values = np.asarray(q_values, dtype=np.float64)
    if not np.all(np.isfinite(q_values)):
        raise ValueError("soft Q-weights require finite Q-values")

    return softmax(q_values, temperature=tau)


def alignment_weights(q_values: np.ndarray, cfg: AlignmentConfig) -> np.ndarray:
    if cfg.weight_mode is WeightMode.UNIFORM:
        return np.full(np.shape(q_values)[0], 1.0 / np.shape(q_values)[0])
    return soft_q_weights(q_values, cfg.tau)


def weighted_nll(
    dist: ActionDistribution, actions: np.ndarray, weights: np.ndarray
) -> typing.Tuple[float, np.ndarray, np.ndarray]:
    """
    Likelihood-free forward KL alignment : `sum_i w_i * -log pi(a_i | z_i)`.

    :returns tuple: loss, and its gradient with respect to `dist.mean` and `dist.log_std`
    """
    nll = -log_prob(dist, actions)
    grad_mean, grad_log_std = log_prob_grad(dist, actions)
    return (
        float(np.sum(weights * nll)),
        -weights[:, None] * grad_mean,
        -weights[:, None] * grad_log_std,
    )


def alignment_loss(
    policy: PolicyNetwork,
    latents: np.ndarray,
    actions: np.ndarray,
    q_values: np.ndarray,
    cfg: AlignmentConfig,
) -> typing.Tuple[float, np.ndarray]:
    """
    Soft Q-weighted negative log-likelihood of (planner) `actions` taken at `latents`.

    :returns tuple: loss, and its gradient with respect to policy parameters
    """
    dist, cache = _forward_with_cache(policy, np.atleast_2d(latents))
    loss, grad_mean, grad_log_std = weighted_nll(
        dist, np.atleast_2d(actions), alignment_weights(q_values, cfg)
    )
    return loss, _backward(policy, cache, grad_mean, grad_log_std)


def surrogate_from_candidates(
    actions: np.ndarray, weights: np.ndarray
) -> typing.Tuple[np.ndarray, np.ndarray]:
    """
    Weighted mean and standard deviation of candidate actions (one per row).
    Standard deviation is floored at `SURROGATE_STD_FLOOR`.
    """
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64)
    mean = weights @ actions
    std = np.sqrt(weights @ (actions - mean) ** 2)
    return mean, np.maximum(std, SURROGATE_STD_FLOOR)


def gaussian_kl_diag(
    mean: np.ndarray, log_std: np.ndarray, other_mean: np.ndarray, other_std: np.ndarray
) -> np.ndarray:
    """`KL(N(mean, exp(log_std)^2) || N(other_mean, other_std^2))`, summed over the last axis"""
    variance_ratio = np.exp(2.0 * log_std) / other_std**2
    return np.sum(
        np.log(other_std)
        - log_std
        + 0.5 * (variance_ratio + ((mean - other_mean) / other_std) ** 2)
        - 0.5,
        axis=-1,
    )


def reverse_kl_terms(
    dist: ActionDistribution,
    surrogate_mean: np.ndarray,
    surrogate_std: np.ndarray,
    weights: np.ndarray,
) -> typing.Tuple[float, np.ndarray, np.ndarray]:
    """
    `sum_i w_i KL(pi(z_i) || N(mu_i, sigma_i^2))` against Gaussian surrogates of the planner.
    A squashed policy is compared in pre-squash space, surrogate means going through `arctanh`.

    :returns tuple: loss, and its gradient with respect to `dist.mean` and `dist.log_std`
    """
    target_mean, _ = _pre_squash(dist, surrogate_mean)
    target_std = np.maximum(np.asarray(surrogate_std, dtype=np.float64), SURROGATE_STD_FLOOR)

    kl = gaussian_kl_diag(dist.mean, dist.log_std, target_mean, target_std)
    grad_mean = (dist.mean - target_mean) / target_std**2
    grad_log_std = np.exp(2.0 * dist.log_std) / target_std**2 - 1.0
    return (
        float(np.sum(weights * kl)),
        weights[:, None] * grad_mean,
        weights[:, None] * grad_log_std,
    )


def reverse_kl_surrogate_loss(
    policy: PolicyNetwork,
    latents: np.ndarray,
    surrogate_mean: np.ndarray,
    surrogate_std: np.ndarray,
    weights: typing.Optional[np.ndarray] = None,
) -> typing.Tuple[float, np.ndarray]:
    """
    Reverse KL ablation of the alignment term. Surrogates are the value-weighted planner
    statistics (see `surrogate_from_candidates`), one per latent. Uniform weights by default.

    :returns tuple: loss, and its gradient with respect to policy parameters
    """
    latents = np.atleast_2d(latents)
    if weights is None:
        weights = np.full(latents.shape[0], 1.0 / latents.shape[0])

    dist, cache = _forward_with_cache(policy, latents)
    loss, grad_mean, grad_log_std = reverse_kl_terms(
        dist, np.atleast_2d(surrogate_mean), np.atleast_2d(surrogate_std), weights
    )
    return loss, _backward(policy, cache, grad_mean, grad_log_std)


def _policy_objective(  # pylint: disable=too-many-arguments,too-many-locals
    policy: PolicyNetwork,
    model: WorldModel,
    batch: SequenceBatch,
    cfg: AlignmentConfig,
    seed: SeedLike,
    q_scale: float,
    with_alignment: bool,
) -> typing.Tuple[float, np.ndarray, typing.Dict[str, float]]:
    latents = rollout_latents(model, batch).reshape(-1, model.spec.latent_dim)
    num_latents = latents.shape[0]
    dist, cache = _forward_with_cache(policy, latents)

    rng = make_rng(seed)
    noise = rng.standard_normal(dist.mean.shape)
    actions = _reparameterize(dist, noise)

    # max-Q term, differentiated through the reparameterized sample (model stays frozen)
    q_values, grad_actions = q_value_and_action_grad(
        model, latents, actions, np.full(num_latents, -1.0 / (num_latents * q_scale))
    )
    q_term = -float(np.mean(q_values)) / q_scale
    grad_pre_squash = grad_actions * (1.0 - actions**2) if dist.squashed else grad_actions
    grad_mean = grad_pre_squash
    grad_log_std = grad_pre_squash * dist.std * noise - cfg.entropy_coeff / num_latents
    policy_entropy = float(np.mean(entropy(dist)))

    objective = q_term
    alignment = 0.0
    if with_alignment:
        stored_actions = batch.actions.reshape(num_latents, -1)
        weights = alignment_weights(q_value(model, latents, stored_actions), cfg)
        if cfg.metric is AlignmentMetric.FORWARD_KL:
            alignment, align_mean, align_log_std = weighted_nll(dist, stored_actions, weights)
        else:
            alignment, align_mean, align_log_std = reverse_kl_terms(
                dist,
                batch.planner_mean.reshape(num_latents, -1),
                batch.planner_std.reshape(num_latents, -1),
                weights,
            )

        coefficient = cfg.effective_lambda(policy.action_dim)
        objective = q_term + coefficient * alignment
        grad_mean = grad_mean + coefficient * align_mean
        grad_log_std = grad_log_std + coefficient * align_log_std

    loss = objective - cfg.entropy_coeff * policy_entropy
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite policy loss : {loss}")

    terms = {
        "policy_loss": float(loss),
        "max_q": q_term,
        "alignment_loss": alignment,
        "entropy": policy_entropy,
        "q_mean": float(np.mean(q_values)),
    }
    return float(loss), _backward(policy, cache, grad_mean, grad_log_std), terms


def max_q_loss(  # pylint: disable=too-many-arguments
    policy: PolicyNetwork,
    model: WorldModel,
    batch: SequenceBatch,
    cfg: AlignmentConfig,
    seed: SeedLike,
    q_scale: float = 1.0,
) -> typing.Tuple[float, np.ndarray, typing.Dict[str, float]]:
    """`-mean Q(z, a ~ pi(z)) / q_scale - alpha * entropy`, without any alignment term"""
    return _policy_objective(policy, model, batch, cfg, seed, q_scale, with_alignment=False)


def bootstrapped_policy_loss(  # pylint: disable=too-many-arguments
    policy: PolicyNetwork,
    model: WorldModel,
    batch: SequenceBatch,
    cfg: AlignmentConfig,
    seed: SeedLike,
    q_scale: float = 1.0,
) -> typing.Tuple[float, np.ndarray, typing.Dict[str, float]]:
    """
    Policy objective evaluated on every latent rolled (through the frozen world model) from
    the batch :

        (-mean Q(z, a ~ pi(z)) / q_scale + lambda * L_align) - alpha * entropy(pi)

    `L_align` being the soft Q-weighted NLL of stored planner actions (or the reverse KL
    surrogate ablation). `q_scale` is a constant divisor of the max-Q term (see
    `trainer.normalize_loss`).

    :returns tuple: loss, gradient with respect to policy parameters, and loss terms
    :raises DivergenceError: when loss isn't finite
    """
    return _policy_objective(policy, model, batch, cfg, seed, q_scale, with_alignment=True)


def policy_update(  # pylint: disable=too-many-arguments
    policy: PolicyNetwork,
    opt_state: OptimizerState,
    model: WorldModel,
    batch: SequenceBatch,
    cfg: AlignmentConfig,
    seed: SeedLike,
    q_scale: float = 1.0,
    loss_scale: float = 1.0,
) -> typing.Tuple[PolicyNetwork, OptimizerState, typing.Dict[str, float]]:
    """One clipped Adam step on `bootstrapped_policy_loss / loss_scale`, world model untouched"""
    _, grad, terms = bootstrapped_policy_loss(policy, model, batch, cfg, seed, q_scale)
    grad = grad / loss_scale
    params, opt_state = adam_step(opt_state, policy.params, grad)

    metrics = {
        **terms,
        "grad_norm_policy": global_norm(clip_global_norm(grad, opt_state.clip_norm)),
        "grad_norm_policy_raw": global_norm(grad),
    }
    _logger.debug("policy update : %s", metrics)
    return policy.with_params(params), opt_state, metrics
