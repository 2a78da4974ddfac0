import dataclasses
import enum
import logging
import typing

import numpy as np

from .approximator import (
    Activation,
    DimensionMismatchError,
    DivergenceError,
    ForwardCache,
    LayoutMismatchError,
    MlpSpec,
    OptimizerState,
    ParamSet,
    adam_step,
    backward,
    clip_global_norm,
    ema_update,
    forward,
    forward_with_cache,
    global_norm,
    init_optimizer,
    init_params,
    zero_output_layer,
)
from .np_utils import SeedLike, log_softmax, make_rng, softmax, symexp, symexp_derivative, symlog
from .replay import SequenceBatch

_logger = logging.getLogger(__package__)

# number of target heads sampled (without replacement) for each TD target
TD_TARGET_HEADS = 2


class ActionSampler(typing.Protocol):  # pylint: disable=too-few-public-methods
    """Anything able to draw actions for a batch of latent states (i.e. the policy network)"""

    def sample(self, latents: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


class BinTransform(enum.Enum):
    LINEAR = "linear"
    SYMLOG = "symlog"


@dataclasses.dataclass(frozen=True)
class BinSpec:
    """
    Discretization used for reward and value regression.
    `v_min` and `v_max` are bounds in *transformed* space, bins being uniform there.
    """

    num_bins: int = 101
    v_min: float = -10.0
    v_max: float = 10.0
    transform: BinTransform = BinTransform.SYMLOG

    def __post_init__(self):
        if self.num_bins < 2:
            raise ValueError(f"at least two bins are required : {self.num_bins}")
        if not self.v_min < self.v_max:
            raise ValueError(f"bins range is empty : [{self.v_min}, {self.v_max}]")

    @property
    def bin_width(self) -> float:
        return (self.v_max - self.v_min) / (self.num_bins - 1)

    def centers(self) -> np.ndarray:
        return self.v_min + self.bin_width * np.arange(self.num_bins)

    def to_transformed(self, values: np.ndarray) -> np.ndarray:
        if self.transform is BinTransform.SYMLOG:
            return symlog(values)
        return values

    def from_transformed(self, values: np.ndarray) -> np.ndarray:
        if self.transform is BinTransform.SYMLOG:
            return symexp(values)
        return values

    def from_transformed_derivative(self, values: np.ndarray) -> np.ndarray:
        if self.transform is BinTransform.SYMLOG:
            return symexp_derivative(values)
        return np.ones_like(values)

    def as_dict(self) -> dict:
        return {
            "num_bins": self.num_bins,
            "v_min": self.v_min,
            "v_max": self.v_max,
            "transform": self.transform.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BinSpec":
        return cls(**{**data, "transform": BinTransform(data["transform"])})


def two_hot_encode(spec: BinSpec, values) -> np.ndarray:
    """
    Spread each (clipped, transformed) value over its two adjacent bins, so that the expected bin
    center equals it. Works element-wise : output gets one more trailing axis of `num_bins`.
    """
    transformed = np.clip(
        spec.to_transformed(np.asarray(values, dtype=np.float64)), spec.v_min, spec.v_max
    )
    position = (transformed - spec.v_min) / spec.bin_width
    lower = np.clip(np.floor(position).astype(np.int64), 0, spec.num_bins - 1)
    upper = np.minimum(lower + 1, spec.num_bins - 1)
    upper_weight = (position - lower)[..., None]

    probs = np.zeros(transformed.shape + (spec.num_bins,))
    np.put_along_axis(probs, lower[..., None], 1.0 - upper_weight, axis=-1)
    # `lower == upper` on the last bin, where `upper_weight` is zero
    np.put_along_axis(
        probs,
        upper[..., None],
        np.take_along_axis(probs, upper[..., None], axis=-1) + upper_weight,
        axis=-1,
    )
    return probs


def bins_decode(spec: BinSpec, logits: np.ndarray) -> np.ndarray:
    """Expected bin center under `softmax(logits)`, mapped back through the inverse transform"""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != spec.num_bins:
        raise DimensionMismatchError(f"expected {spec.num_bins} logits, got {logits.shape[-1]}")

    return spec.from_transformed(softmax(logits) @ spec.centers())


def bins_decode_grad(spec: BinSpec, logits: np.ndarray) -> typing.Tuple[np.ndarray, np.ndarray]:
    """
    :returns tuple: decoded values, and their gradient with respect to `logits`
    """
    probs = softmax(logits)
    centers = spec.centers()
    transformed = probs @ centers
    grad_transformed = probs * (centers - transformed[..., None])
    values = spec.from_transformed(transformed)
    return values, grad_transformed * spec.from_transformed_derivative(transformed)[..., None]


def soft_cross_entropy(
    logits: np.ndarray, target_probs: np.ndarray
) -> typing.Tuple[np.ndarray, np.ndarray]:
    """
    :returns tuple: per-row cross-entropy, and its gradient with respect to `logits`
    """
    log_probs = log_softmax(logits, axis=-1)
    return -np.sum(target_probs * log_probs, axis=-1), np.exp(log_probs) - target_probs


@dataclasses.dataclass(frozen=True)
class WorldModelSpec:  # pylint: disable=too-many-instance-attributes
    obs_dim: int
    action_dim: int
    latent_dim: int = 64
    encoder_dims: typing.Tuple[int, ...] = (128,)
    mlp_dims: typing.Tuple[int, ...] = (128, 128)
    num_q: int = 5
    q_dropout: float = 0.01
    bins: BinSpec = dataclasses.field(default_factory=BinSpec)
    activation: Activation = Activation.MISH
    layer_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_dims", tuple(self.encoder_dims))
        object.__setattr__(self, "mlp_dims", tuple(self.mlp_dims))
        if self.num_q < TD_TARGET_HEADS:
            raise ValueError(f"at least {TD_TARGET_HEADS} Q heads are required : {self.num_q}")

    @property
    def head_input_dim(self) -> int:
        return self.latent_dim + self.action_dim

    def encoder_spec(self) -> MlpSpec:
        return MlpSpec(
            self.obs_dim, self.encoder_dims, self.latent_dim, self.activation, self.layer_norm
        )

    def dynamics_spec(self) -> MlpSpec:
        return MlpSpec(
            self.head_input_dim, self.mlp_dims, self.latent_dim, self.activation, self.layer_norm
        )

    def reward_spec(self) -> MlpSpec:
        return MlpSpec(
            self.head_input_dim, self.mlp_dims, self.bins.num_bins, self.activation, self.layer_norm
        )

    def q_spec(self) -> MlpSpec:
        return MlpSpec(
            self.head_input_dim,
            self.mlp_dims,
            self.bins.num_bins,
            self.activation,
            self.layer_norm,
            self.q_dropout,
        )

    def as_dict(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "latent_dim": self.latent_dim,
            "encoder_dims": list(self.encoder_dims),
            "mlp_dims": list(self.mlp_dims),
            "num_q": self.num_q,
            "q_dropout": self.q_dropout,
            "bins": self.bins.as_dict(),
            "activation": self.activation.value,
            "layer_norm": self.layer_norm,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WorldModelSpec":
        return cls(
            **{
                **data,
                "encoder_dims": tuple(data["encoder_dims"]),
                "mlp_dims": tuple(data["mlp_dims"]),
                "bins": BinSpec.from_dict(data["bins"]),
                "activation": Activation(data["activation"]),
            }
        )


@dataclasses.dataclass
class WorldModelParams:
    encoder: ParamSet
    dynamics: ParamSet
    reward_head: ParamSet
    q_ensemble: typing.List[ParamSet]
    q_target_ensemble: typing.List[ParamSet]

    def __post_init__(self):
        if len(self.q_ensemble) != len(self.q_target_ensemble):
            raise LayoutMismatchError(
                f"Q ensemble ({len(self.q_ensemble)}) and target ensemble "
                f"({len(self.q_target_ensemble)}) sizes differ"
            )

    def online(self) -> typing.Dict[str, ParamSet]:
        """Every gradient-trained network, by name"""
        networks = {
            "encoder": self.encoder,
            "dynamics": self.dynamics,
            "reward_head": self.reward_head,
        }
        networks.update({f"q{index}": params for index, params in enumerate(self.q_ensemble)})
        return networks

    def with_online(self, networks: typing.Mapping[str, ParamSet]) -> "WorldModelParams":
        return WorldModelParams(
            encoder=networks["encoder"],
            dynamics=networks["dynamics"],
            reward_head=networks["reward_head"],
            q_ensemble=[networks[f"q{index}"] for index in range(len(self.q_ensemble))],
            q_target_ensemble=list(self.q_target_ensemble),
        )

    def copy(self) -> "WorldModelParams":
        return WorldModelParams(
            encoder=self.encoder.copy(),
            dynamics=self.dynamics.copy(),
            reward_head=self.reward_head.copy(),
            q_ensemble=[params.copy() for params in self.q_ensemble],
            q_target_ensemble=[params.copy() for params in self.q_target_ensemble],
        )


@dataclasses.dataclass
class WorldModel:
    spec: WorldModelSpec
    params: WorldModelParams


def init_world_model(spec: WorldModelSpec, seed: SeedLike = 0) -> WorldModel:
    """
    Randomly initialize every network. Reward and Q heads start with a zeroed output layer
    (uniform bin logits), and target heads start as copies of online ones.
    """
    rng = make_rng(seed)
    q_ensemble = [
        zero_output_layer(spec.q_spec(), init_params(spec.q_spec(), rng)) for _ in range(spec.num_q)
    ]
    params = WorldModelParams(
        encoder=init_params(spec.encoder_spec(), rng),
        dynamics=init_params(spec.dynamics_spec(), rng),
        reward_head=zero_output_layer(spec.reward_spec(), init_params(spec.reward_spec(), rng)),
        q_ensemble=q_ensemble,
        q_target_ensemble=[params.copy() for params in q_ensemble],
    )
    return WorldModel(spec, params)


def _head_inputs(latents: np.ndarray, actions: np.ndarray) -> np.ndarray:
    latents = np.asarray(latents, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if latents.ndim == 1 and actions.ndim == 1:
        return np.concatenate([latents, actions])

    return np.concatenate([np.atleast_2d(latents), np.atleast_2d(actions)], axis=1)


def encode(model: WorldModel, observations: np.ndarray) -> np.ndarray:
    return forward(model.spec.encoder_spec(), model.params.encoder, observations)


def latent_step(model: WorldModel, latents: np.ndarray, actions: np.ndarray) -> np.ndarray:
    inputs = _head_inputs(latents, actions)
    return forward(model.spec.dynamics_spec(), model.params.dynamics, inputs)


def predicted_reward(model: WorldModel, latents: np.ndarray, actions: np.ndarray) -> np.ndarray:
    inputs = _head_inputs(latents, actions)
    logits = forward(model.spec.reward_spec(), model.params.reward_head, inputs)
    return bins_decode(model.spec.bins, logits)


def q_value(
    model: WorldModel,
    latents: np.ndarray,
    actions: np.ndarray,
    use_target: bool = False,
) -> np.ndarray:
    """Mean of the decoded values over the (online or target) ensemble, without dropout"""
    inputs = _head_inputs(latents, actions)
    heads = model.params.q_target_ensemble if use_target else model.params.q_ensemble
    decoded = [
        bins_decode(model.spec.bins, forward(model.spec.q_spec(), head, inputs)) for head in heads
    ]
    return np.mean(decoded, axis=0)


def q_value_and_action_grad(
    model: WorldModel, latents: np.ndarray, actions: np.ndarray, grad_values: np.ndarray
) -> typing.Tuple[np.ndarray, np.ndarray]:
    """
    Ensemble-mean Q of a batch, along with the vector-Jacobian product of `grad_values` (one
    weight per row) with respect to the actions. Model parameters receive no gradient.
    """
    spec = model.spec
    inputs = _head_inputs(latents, actions)
    num_heads = len(model.params.q_ensemble)

    values = np.zeros(inputs.shape[0])
    grad_actions = np.zeros((inputs.shape[0], spec.action_dim))
    for head in model.params.q_ensemble:
        logits, cache = forward_with_cache(spec.q_spec(), head, inputs)
        head_values, grad_logits = bins_decode_grad(spec.bins, logits)
        values += head_values / num_heads

        _, grad_inputs = backward(
            spec.q_spec(), head, cache, grad_logits * (grad_values / num_heads)[:, None]
        )
        grad_actions += grad_inputs[:, spec.latent_dim :]

    return values, grad_actions


def td_target(
    model: WorldModel,
    rewards: np.ndarray,
    next_latents: np.ndarray,
    policy: ActionSampler,
    gamma: float,
    seed: SeedLike,
) -> np.ndarray:
    """
    `r + gamma * min(Q_i, Q_j)(z', a')` with `a' ~ policy(z')` and `(i, j)` two distinct target
    heads drawn uniformly. Plain numpy values : no gradient ever flows through targets.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"discount factor must lie in [0, 1) : {gamma}")

    rng = make_rng(seed)
    next_latents = np.atleast_2d(next_latents)
    next_actions = policy.sample(next_latents, rng)
    heads = np.sort(rng.choice(model.spec.num_q, size=TD_TARGET_HEADS, replace=False))

    inputs = _head_inputs(next_latents, next_actions)
    bootstrap = np.min(
        [
            bins_decode(
                model.spec.bins,
                forward(model.spec.q_spec(), model.params.q_target_ensemble[head], inputs),
            )
            for head in heads
        ],
        axis=0,
    )
    return np.asarray(rewards, dtype=np.float64) + gamma * bootstrap


@dataclasses.dataclass(frozen=True)
class ModelLossConfig:
    gamma: float = 0.99
    dynamics_coef: float = 20.0
    reward_coef: float = 0.1
    value_coef: float = 0.1


@dataclasses.dataclass
class ModelTargets:
    """Stop-gradient quantities of the model loss : encoded next observations and TD targets"""

    next_latents: np.ndarray
    td_targets: np.ndarray


def model_targets(
    model: WorldModel,
    batch: SequenceBatch,
    policy: ActionSampler,
    loss_cfg: ModelLossConfig,
    seed: SeedLike,
) -> ModelTargets:
    batch_size, num_steps = batch.rewards.shape
    next_observations = batch.observations[:, 1:].reshape(batch_size * num_steps, -1)
    next_latents = encode(model, next_observations)
    td_targets = td_target(
        model, batch.rewards.reshape(-1), next_latents, policy, loss_cfg.gamma, seed
    )
    return ModelTargets(
        next_latents=next_latents.reshape(batch_size, num_steps, -1),
        td_targets=td_targets.reshape(batch_size, num_steps),
    )


@dataclasses.dataclass
class _RolloutStep:
    dynamics_cache: ForwardCache
    reward_cache: ForwardCache
    q_caches: typing.List[ForwardCache]
    error: np.ndarray
    grad_reward_logits: np.ndarray
    grad_q_logits: typing.List[np.ndarray]


def model_loss(  # pylint: disable=too-many-locals
    model: WorldModel,
    batch: SequenceBatch,
    policy: ActionSampler,
    loss_cfg: ModelLossConfig,
    seed: SeedLike,
    targets: typing.Optional[ModelTargets] = None,
) -> typing.Tuple[float, typing.Dict[str, np.ndarray], typing.Dict[str, float]]:
    """
    Discounted multi-step TD loss of the world model over a batch of sequences :

        mean_b sum_t gamma^t (c_f ||f(z_t, a_t) - sg(h(s_{t+1}))||^2
                              + c_r CE(R(z_t, a_t), r_t) + c_q mean_k CE(Q_k(z_t, a_t), q_t))

    latents being rolled through dynamics from `z_0 = h(s_0)`.
    `targets` may be given to evaluate the loss against frozen stop-gradient quantities ;
    otherwise they are computed first, from the same random stream as dropout masks.

    :returns tuple: loss, gradient per online network (named as in `WorldModelParams.online`)
                    and loss terms
    :raises DivergenceError: when loss isn't finite
    """
    spec = model.spec
    params = model.params
    rng = make_rng(seed)
    if targets is None:
        targets = model_targets(model, batch, policy, loss_cfg, rng)

    batch_size, num_steps = batch.rewards.shape
    num_heads = len(params.q_ensemble)
    reward_probs = two_hot_encode(spec.bins, batch.rewards)
    value_probs = two_hot_encode(spec.bins, targets.td_targets)

    latents, encoder_cache = forward_with_cache(
        spec.encoder_spec(), params.encoder, batch.observations[:, 0]
    )
    terms = {"consistency": 0.0, "reward_ce": 0.0, "value_ce": 0.0}
    loss = 0.0
    steps = []
    for t in range(num_steps):
        discount = loss_cfg.gamma**t
        inputs = _head_inputs(latents, batch.actions[:, t])

        predictions, dynamics_cache = forward_with_cache(
            spec.dynamics_spec(), params.dynamics, inputs
        )
        error = predictions - targets.next_latents[:, t]
        consistency = float(np.mean(np.sum(error**2, axis=1)))

        reward_logits, reward_cache = forward_with_cache(
            spec.reward_spec(), params.reward_head, inputs
        )
        reward_ce, grad_reward_logits = soft_cross_entropy(reward_logits, reward_probs[:, t])

        q_caches = []
        grad_q_logits = []
        value_ce = 0.0
        for head in params.q_ensemble:
            q_logits, q_cache = forward_with_cache(
                spec.q_spec(), head, inputs, deterministic=False, rng=rng
            )
            head_ce, grad_logits = soft_cross_entropy(q_logits, value_probs[:, t])
            value_ce += float(np.mean(head_ce)) / num_heads
            q_caches.append(q_cache)
            grad_q_logits.append(grad_logits)

        terms["consistency"] += discount * consistency
        terms["reward_ce"] += discount * float(np.mean(reward_ce))
        terms["value_ce"] += discount * value_ce
        loss += discount * (
            loss_cfg.dynamics_coef * consistency
            + loss_cfg.reward_coef * float(np.mean(reward_ce))
            + loss_cfg.value_coef * value_ce
        )

        steps.append(
            _RolloutStep(
                dynamics_cache, reward_cache, q_caches, error, grad_reward_logits, grad_q_logits
            )
        )
        latents = predictions

    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite world model loss : {loss} ({terms})")

    grads = {name: np.zeros(len(network)) for name, network in params.online().items()}
    grad_latents = np.zeros((batch_size, spec.latent_dim))
    for t in reversed(range(num_steps)):
        step = steps[t]
        discount = loss_cfg.gamma**t

        grad_predictions = (
            grad_latents + discount * loss_cfg.dynamics_coef * 2.0 * step.error / batch_size
        )
        grad, grad_inputs = backward(
            spec.dynamics_spec(), params.dynamics, step.dynamics_cache, grad_predictions
        )
        grads["dynamics"] += grad

        grad, head_grad_inputs = backward(
            spec.reward_spec(),
            params.reward_head,
            step.reward_cache,
            discount * loss_cfg.reward_coef * step.grad_reward_logits / batch_size,
        )
        grads["reward_head"] += grad
        grad_inputs = grad_inputs + head_grad_inputs

        for index, head in enumerate(params.q_ensemble):
            grad, head_grad_inputs = backward(
                spec.q_spec(),
                head,
                step.q_caches[index],
                discount
                * loss_cfg.value_coef
                * step.grad_q_logits[index]
                / (batch_size * num_heads),
            )
            grads[f"q{index}"] += grad
            grad_inputs = grad_inputs + head_grad_inputs

        grad_latents = grad_inputs[:, : spec.latent_dim]

    grad, _ = backward(spec.encoder_spec(), params.encoder, encoder_cache, grad_latents)
    grads["encoder"] += grad

    terms["loss"] = float(loss)
    return float(loss), grads, terms


def rollout_latents(model: WorldModel, batch: SequenceBatch) -> np.ndarray:
    """
    Latents `z_0 = h(s_0)`, `z_{t+1} = f(z_t, a_t)` for every step of every sequence.

    :returns np.ndarray: array of shape (batch_size, num_steps, latent_dim)
    """
    latents = encode(model, batch.observations[:, 0])
    rolled = [latents]
    for t in range(batch.num_steps - 1):
        latents = latent_step(model, latents, batch.actions[:, t])
        rolled.append(latents)

    return np.stack(rolled, axis=1)


def init_model_optimizers(
    model: WorldModel, learning_rate: float, encoder_learning_rate: float, clip_norm: float
) -> typing.Dict[str, OptimizerState]:
    return {
        name: init_optimizer(
            params, encoder_learning_rate if name == "encoder" else learning_rate, clip_norm
        )
        for name, params in model.params.online().items()
    }


def model_update(  # pylint: disable=too-many-arguments
    model: WorldModel,
    opt_states: typing.Mapping[str, OptimizerState],
    batch: SequenceBatch,
    policy: ActionSampler,
    loss_cfg: ModelLossConfig,
    seed: SeedLike,
    loss_scale: float = 1.0,
    target_rate: float = 0.5,
) -> typing.Tuple[WorldModel, typing.Dict[str, OptimizerState], typing.Dict[str, float]]:
    """
    One clipped Adam step per online network on `loss / loss_scale`, followed by an exponential
    moving average of target Q heads towards their (updated) online counterparts.
    Neither `model` nor `opt_states` are modified in place.
    """
    loss, grads, terms = model_loss(model, batch, policy, loss_cfg, seed)

    networks = {}
    new_states = {}
    raw_norm = 0.0
    clipped_norm = 0.0
    for name, params in model.params.online().items():
        grad = grads[name] / loss_scale
        raw_norm = max(raw_norm, global_norm(grad))
        clipped_norm = max(
            clipped_norm, global_norm(clip_global_norm(grad, opt_states[name].clip_norm))
        )
        networks[name], new_states[name] = adam_step(opt_states[name], params, grad)

    new_params = model.params.with_online(networks)
    new_params.q_target_ensemble = [
        ema_update(target, online, target_rate)
        for target, online in zip(model.params.q_target_ensemble, new_params.q_ensemble)
    ]

    metrics = {
        "model_loss": loss,
        "model_loss_normalized": loss / loss_scale,
        "consistency": terms["consistency"],
        "reward_ce": terms["reward_ce"],
        "value_ce": terms["value_ce"],
        "grad_norm_model": clipped_norm,
        "grad_norm_model_raw": raw_norm,
    }
    _logger.debug("world model update : %s", metrics)
    return WorldModel(model.spec, new_params), new_states, metrics
