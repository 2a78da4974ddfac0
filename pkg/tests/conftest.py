import typing

import numpy as np
import pytest

from boomlab.approximator import Activation, MlpSpec, init_params
from boomlab.replay import SequenceBatch
from boomlab.world_model import BinSpec, BinTransform, WorldModel, WorldModelSpec, init_world_model

FD_STEP = 1e-6


def numerical_grad(
    fn: typing.Callable[[np.ndarray], float], point: np.ndarray, step: float = FD_STEP
) -> np.ndarray:
    """Central finite differences of scalar `fn` around `point`"""
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    for index in np.ndindex(point.shape):
        shifted = point.copy()
        shifted[index] += step
        upper = fn(shifted)
        shifted[index] -= 2.0 * step
        lower = fn(shifted)
        grad[index] = (upper - lower) / (2.0 * step)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4) -> None:
    """Relative error with respect to the gradient scale, so near-zero components don't dominate"""
    scale = max(float(np.max(np.abs(numeric))), 1e-3)
    error = float(np.max(np.abs(np.asarray(analytic) - numeric))) / scale
    assert error <= rtol, f"max relative gradient error {error:.3g} over {rtol:.3g}"


@pytest.fixture
def tiny_mlp_spec() -> MlpSpec:
    return MlpSpec(3, (5, 4), 2, Activation.MISH, layer_norm=True)


@pytest.fixture
def tiny_model_spec() -> WorldModelSpec:
    return WorldModelSpec(
        obs_dim=3,
        action_dim=2,
        latent_dim=4,
        encoder_dims=(6,),
        mlp_dims=(6,),
        num_q=2,
        q_dropout=0.0,
        bins=BinSpec(num_bins=11, v_min=-3.0, v_max=3.0, transform=BinTransform.SYMLOG),
    )


def random_batch(
    spec: WorldModelSpec, batch_size: int = 3, horizon: int = 2, seed: int = 0
) -> SequenceBatch:
    rng = np.random.default_rng(seed)
    num_steps = horizon + 1
    return SequenceBatch(
        observations=rng.normal(size=(batch_size, num_steps + 1, spec.obs_dim)),
        actions=rng.uniform(-0.9, 0.9, size=(batch_size, num_steps, spec.action_dim)),
        rewards=rng.normal(size=(batch_size, num_steps)),
        planner_mean=rng.uniform(-0.5, 0.5, size=(batch_size, num_steps, spec.action_dim)),
        planner_std=rng.uniform(0.2, 0.6, size=(batch_size, num_steps, spec.action_dim)),
    )


def randomized_model(spec: WorldModelSpec, seed: int = 0) -> WorldModel:
    """World model whose reward and Q output layers aren't zero, unlike freshly initialized ones"""
    model = init_world_model(spec, seed)
    rng = np.random.default_rng(seed + 1)
    networks = model.params.online()
    for name in ["reward_head"] + [f"q{index}" for index in range(spec.num_q)]:
        networks[name] = init_params(spec.q_spec(), rng)
    params = model.params.with_online(networks)
    params.q_target_ensemble = [init_params(spec.q_spec(), rng) for _ in range(spec.num_q)]
    return WorldModel(spec, params)


class ZeroPolicy:  # pylint: disable=too-few-public-methods
    def __init__(self, action_dim: int):
        self.action_dim = action_dim

    def sample(self, latents: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        del rng
        return np.zeros((np.atleast_2d(latents).shape[0], self.action_dim))
