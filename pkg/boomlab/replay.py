import collections
import dataclasses
import itertools
import logging
import typing

import numpy as np

from .np_utils import SeedLike, make_rng

_logger = logging.getLogger(__package__)

# moments of an action drawn uniformly in [-1, 1], stored along random (warmup) actions
UNIFORM_ACTION_MEAN = 0.0
UNIFORM_ACTION_STD = float(1.0 / np.sqrt(3.0))


class InsufficientDataError(RuntimeError):
    """Custom exception raised when replay buffer holds no sequence long enough to be sampled"""


@dataclasses.dataclass
class Transition:  # pylint: disable=too-many-instance-attributes
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    # value-weighted mean/std of the planner candidates that produced `a` (see `planner.plan`)
    planner_mean: typing.Optional[np.ndarray] = None
    planner_std: typing.Optional[np.ndarray] = None

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        self.a = np.atleast_1d(np.asarray(self.a, dtype=np.float64))
        self.s_next = np.asarray(self.s_next, dtype=np.float64)
        self.r = float(self.r)

        if np.any(np.abs(self.a) > 1.0):
            raise ValueError(f"transition action out of [-1, 1] bounds : {self.a}")
        if not np.isfinite(self.r):
            raise ValueError(f"transition reward isn't finite : {self.r}")

        if self.planner_mean is None:
            self.planner_mean = np.full_like(self.a, UNIFORM_ACTION_MEAN)
        if self.planner_std is None:
            self.planner_std = np.full_like(self.a, UNIFORM_ACTION_STD)


@dataclasses.dataclass
class SequenceBatch:
    """
    `B` contiguous rollout segments of `H + 1` transitions each (`H` being the horizon) :

      * observations : (B, H + 2, obs_dim), i.e. s_0 ... s_{H+1}
      * actions      : (B, H + 1, action_dim)
      * rewards      : (B, H + 1)
      * planner_mean / planner_std : (B, H + 1, action_dim)
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    planner_mean: np.ndarray
    planner_std: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.actions.shape[0]

    @property
    def num_steps(self) -> int:
        return self.actions.shape[1]

    @property
    def horizon(self) -> int:
        return self.num_steps - 1


class ReplayBuffer:
    """
    Episode-structured replay buffer.
    Capacity is counted in transitions, and whole oldest episodes are evicted first.
    """

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError(f"replay buffer capacity must be positive : {capacity}")

        self.capacity = capacity
        self._episodes: typing.Deque[typing.Deque[Transition]] = collections.deque()
        self._is_last_episode_open = False
        self._size = 0

    def __len__(self) -> int:
        return self._size

    @property
    def episodes(self) -> typing.Tuple[typing.Tuple[Transition, ...], ...]:
        """Snapshot copy of stored episodes, oldest first"""
        return tuple(tuple(episode) for episode in self._episodes)

    def episode_lengths(self) -> typing.List[int]:
        return [len(episode) for episode in self._episodes]

    def num_start_positions(self, horizon: int) -> int:
        """Number of distinct `horizon + 1` transitions sequences `sample_sequences` can draw"""
        return sum(max(len(episode) - horizon, 0) for episode in self._episodes)

    def push(self, transition: Transition) -> None:
        if not self._is_last_episode_open:
            self._episodes.append(collections.deque())
            self._is_last_episode_open = True

        self._episodes[-1].append(transition)
        self._size += 1

        # pushing after `done` starts a new episode
        if transition.done:
            self._is_last_episode_open = False

        self._evict()

    def _evict(self) -> None:
        while self._size > self.capacity:
            if len(self._episodes) > 1:
                evicted = self._episodes.popleft()
                self._size -= len(evicted)
                _logger.debug("evicted oldest episode (%d transitions)", len(evicted))
            else:
                # a lone episode longer than capacity can only be trimmed from its start
                self._episodes[0].popleft()
                self._size -= 1

    def sample_sequences(self, batch_size: int, horizon: int, seed: SeedLike) -> SequenceBatch:
        """
        Sample `batch_size` sequences of `horizon + 1` contiguous transitions, start positions
        being uniform over every valid position of every episode. Sequences never cross episode
        boundaries, so episodes shorter than `horizon + 1` are never sampled.

        :raises InsufficientDataError: when there isn't any valid start position
        """
        if horizon < 0:
            raise ValueError(f"horizon must be non-negative : {horizon}")

        num_steps = horizon + 1
        counts = np.asarray(
            [max(len(episode) - horizon, 0) for episode in self._episodes], dtype=np.int64
        )
        total = int(counts.sum())
        if total == 0:
            raise InsufficientDataError(
                f"no episode holds {num_steps} transitions yet (buffer size is {len(self)})"
            )

        rng = make_rng(seed)
        draws = rng.integers(total, size=batch_size)
        ends = np.cumsum(counts)
        episode_indices = np.searchsorted(ends, draws, side="right")
        starts = draws - (ends[episode_indices] - counts[episode_indices])

        segments = [
            list(itertools.islice(self._episodes[int(index)], int(start), int(start) + num_steps))
            for index, start in zip(episode_indices, starts)
        ]
        return SequenceBatch(
            observations=np.asarray(
                [[step.s for step in segment] + [segment[-1].s_next] for segment in segments]
            ),
            actions=np.asarray([[step.a for step in segment] for segment in segments]),
            rewards=np.asarray([[step.r for step in segment] for segment in segments]),
            planner_mean=np.asarray(
                [[step.planner_mean for step in segment] for segment in segments]
            ),
            planner_std=np.asarray(
                [[step.planner_std for step in segment] for segment in segments]
            ),
        )


def sample_sequences(
    buffer: ReplayBuffer, batch_size: int, horizon: int, seed: SeedLike
) -> SequenceBatch:
    return buffer.sample_sequences(batch_size, horizon, seed)
