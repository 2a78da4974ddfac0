import dataclasses
import logging
import typing
from abc import ABC, abstractmethod

import numpy as np

from .np_utils import SeedLike, make_rng

_logger = logging.getLogger(__package__)

DEFAULT_EPISODE_LIMIT = 200


class EpisodeDoneError(RuntimeError):
    """Custom exception raised when an environment is stepped after its episode ended"""


class UnknownEnvironmentError(KeyError):
    """Custom exception raised when an environment name isn't registered"""


@dataclasses.dataclass
class EnvState:
    values: np.ndarray
    step_count: int = 0


@dataclasses.dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool


class Environment(ABC):
    """
    Abstract deterministic continuous-control environment with actions in [-1, 1]^action_dim and
    rewards in [0, 1]. Episodes end on time limit only.
    """

    name: typing.ClassVar[str]
    observation_dim: typing.ClassVar[int]
    action_dim: typing.ClassVar[int]

    def __init__(self, episode_limit: int = DEFAULT_EPISODE_LIMIT):
        self.episode_limit = episode_limit
        self.state: typing.Optional[EnvState] = None
        self.is_done = False

    def reset(self, seed: SeedLike = None) -> np.ndarray:
        self.state = EnvState(self._initial_state(make_rng(seed)))
        self.is_done = False
        return self.observe()

    def step(self, action: np.ndarray) -> StepResult:
        """
        :raises EpisodeDoneError: when episode is already over (or environment was never reset)
        """
        if self.state is None or self.is_done:
            raise EpisodeDoneError(f"{self.name} episode is over, please reset environment")

        action = np.clip(np.asarray(action, dtype=np.float64).reshape(self.action_dim), -1.0, 1.0)
        self.state.values = self._dynamics(self.state.values, action)
        self.state.step_count += 1
        self.is_done = self.state.step_count >= self.episode_limit

        return StepResult(self.observe(), self._reward(self.state.values), self.is_done)

    def observe(self) -> np.ndarray:
        if self.state is None:
            raise EpisodeDoneError(f"{self.name} environment has not been reset")

        return self._observation(self.state.values)

    @abstractmethod
    def _initial_state(self, rng: np.random.Generator) -> np.ndarray: ...

    @abstractmethod
    def _dynamics(self, values: np.ndarray, action: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _reward(self, values: np.ndarray) -> float: ...

    @abstractmethod
    def _observation(self, values: np.ndarray) -> np.ndarray: ...


class PointMassReach(Environment):
    """
    Planar point mass driven by its acceleration towards a goal.
    State is `(x, y, vx, vy)`, reward is `exp(-||pos - goal||^2)`.
    """

    name = "pointmass"
    observation_dim = 4
    action_dim = 2

    def __init__(
        self,
        episode_limit: int = DEFAULT_EPISODE_LIMIT,
        dt: float = 0.05,
        damping: float = 0.95,
        goal: typing.Sequence[float] = (0.0, 0.0),
    ):
        super().__init__(episode_limit)
        self.dt = dt
        self.damping = damping
        self.goal = np.asarray(goal, dtype=np.float64)

    def _initial_state(self, rng):
        return np.concatenate([rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])

    def _dynamics(self, values, action):
        position, velocity = values[:2], values[2:]
        velocity = self.damping * (velocity + self.dt * action)
        return np.concatenate([position + self.dt * velocity, velocity])

    def _reward(self, values):
        return float(np.exp(-np.sum((values[:2] - self.goal) ** 2)))

    def _observation(self, values):
        return values.copy()


class PendulumSwingup(Environment):
    """
    Torque-limited pendulum starting near the bottom, `theta = 0` being upright.
    Integration is a fixed-step fourth order Runge-Kutta scheme.
    Reward is `(1 + cos(theta)) / 2 * exp(-0.01 * theta_dot^2)`.
    """

    name = "pendulum"
    observation_dim = 3
    action_dim = 1

    def __init__(  # pylint: disable=too-many-arguments
        self,
        episode_limit: int = DEFAULT_EPISODE_LIMIT,
        dt: float = 0.05,
        gravity: float = 10.0,
        length: float = 1.0,
        mass: float = 1.0,
        max_torque: float = 2.0,
        max_speed: float = 8.0,
        damping: float = 0.0,
    ):
        super().__init__(episode_limit)
        self.dt = dt
        self.gravity = gravity
        self.length = length
        self.mass = mass
        self.max_torque = max_torque
        self.max_speed = max_speed
        self.damping = damping

    def _initial_state(self, rng):
        return np.array([np.pi + rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)])

    def _derivatives(self, values: np.ndarray, torque: float) -> np.ndarray:
        theta, theta_dot = values
        theta_ddot = (
            3.0 * self.gravity / (2.0 * self.length) * np.sin(theta)
            + 3.0 / (self.mass * self.length**2) * torque
            - self.damping * theta_dot
        )
        return np.array([theta_dot, theta_ddot])

    def _dynamics(self, values, action):
        torque = self.max_torque * float(action[0])
        k1 = self._derivatives(values, torque)
        k2 = self._derivatives(values + 0.5 * self.dt * k1, torque)
        k3 = self._derivatives(values + 0.5 * self.dt * k2, torque)
        k4 = self._derivatives(values + self.dt * k3, torque)
        theta, theta_dot = values + self.dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

        theta = (theta + np.pi) % (2.0 * np.pi) - np.pi
        return np.array([theta, np.clip(theta_dot, -self.max_speed, self.max_speed)])

    def _reward(self, values):
        theta, theta_dot = values
        return float((1.0 + np.cos(theta)) / 2.0 * np.exp(-0.01 * theta_dot**2))

    def _observation(self, values):
        theta, theta_dot = values
        return np.array([np.cos(theta), np.sin(theta), theta_dot])

    def energy(self, values: np.ndarray) -> float:
        """Mechanical energy per unit inertia (kinetic + potential), conserved without torque"""
        theta, theta_dot = values
        return float(0.5 * theta_dot**2 + 3.0 * self.gravity / (2.0 * self.length) * np.cos(theta))


_ENVIRONMENTS: typing.Dict[str, typing.Type[Environment]] = {
    PointMassReach.name: PointMassReach,
    PendulumSwingup.name: PendulumSwingup,
}


def available_environments() -> typing.Tuple[str, ...]:
    return tuple(sorted(_ENVIRONMENTS))


def make_env(name: str, **kwargs) -> Environment:
    """
    :raises UnknownEnvironmentError: when `name` isn't a registered environment
    """
    try:
        env_class = _ENVIRONMENTS[name]
    except KeyError:
        raise UnknownEnvironmentError(
            f"unknown environment {name!r} (available : {', '.join(available_environments())})"
        ) from None

    return env_class(**kwargs)
