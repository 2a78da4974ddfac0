import collections
import contextlib
import csv
import dataclasses
import enum
import io
import logging
import math
import os
import time
import typing
from pathlib import Path

import numpy as np

from .approximator import DivergenceError, OptimizerState, init_optimizer
from .checkpoint import save_checkpoint
from .config import config_echo, dump_config
from .envs import Environment, make_env
from .np_utils import SeedLike, make_rng, spawn_seeds
from .planner import (
    PlanConfig,
    PlanningModel,
    PlanResult,
    TrajectoryDistribution,
    WorldModelPlanningView,
    plan,
    write_plan_trace,
)
from .policy import AlignmentConfig, PolicyNetwork, init_policy, policy_update
from .replay import (
    UNIFORM_ACTION_MEAN,
    UNIFORM_ACTION_STD,
    InsufficientDataError,
    ReplayBuffer,
    SequenceBatch,
    Transition,
    sample_sequences,
)
from .world_model import (
    BinSpec,
    ModelLossConfig,
    WorldModel,
    WorldModelSpec,
    encode,
    init_model_optimizers,
    init_world_model,
    model_update,
)

_logger = logging.getLogger(__package__)

METRICS_FILE_NAME = "metrics.csv"
CHECKPOINT_FILE_NAME = "checkpoint.bin"
CONFIG_FILE_NAME = "config.txt"
PLAN_TRACE_FILE_NAME = "plan_trace.jsonl"


class LossNorm(enum.Enum):
    NONE = "none"
    MOVING_PERCENTILE = "moving_percentile"


@dataclasses.dataclass(frozen=True)
class TrainConfig:  # pylint: disable=too-many-instance-attributes
    env: str = ""
    seed: int = 0
    total_steps: int = 20_000
    warmup_steps: int = 1000
    pretrain_updates: int = 1000
    batch_size: int = 64
    horizon: int = 3
    gamma: float = 0.99
    learning_rate: float = 3e-4
    encoder_learning_rate: float = 1e-4
    clip_norm: float = 20.0
    target_update_rate: float = 0.5
    dynamics_coef: float = 20.0
    reward_coef: float = 0.1
    value_coef: float = 0.1
    updates_per_env_step: int = 1
    buffer_capacity: int = 100_000
    latent_dim: int = 64
    encoder_dims: typing.Tuple[int, ...] = (128,)
    mlp_dims: typing.Tuple[int, ...] = (128, 128)
    num_q: int = 5
    q_dropout: float = 0.01
    loss_norm: LossNorm = LossNorm.MOVING_PERCENTILE
    loss_norm_window: int = 1000
    episode_limit: int = 200
    eval_interval: int = 1000
    eval_episodes: int = 5
    log_interval: int = 1000
    record_wall_clock: bool = False
    plan_trace: bool = False
    plan: PlanConfig = dataclasses.field(default_factory=PlanConfig)
    align: AlignmentConfig = dataclasses.field(default_factory=AlignmentConfig)
    bins: BinSpec = dataclasses.field(default_factory=BinSpec)

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(
                f"warmup steps ({self.warmup_steps}) must lie in [0, {self.total_steps}]"
            )
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"discount factor must lie in [0, 1) : {self.gamma}")
        if min(self.batch_size, self.eval_interval, self.log_interval, self.eval_episodes) <= 0:
            raise ValueError("batch size, intervals and evaluation episodes must be positive")

    def model_loss_config(self) -> ModelLossConfig:
        return ModelLossConfig(self.gamma, self.dynamics_coef, self.reward_coef, self.value_coef)

    def world_model_spec(self, obs_dim: int, action_dim: int) -> WorldModelSpec:
        return WorldModelSpec(
            obs_dim=obs_dim,
            action_dim=action_dim,
            latent_dim=self.latent_dim,
            encoder_dims=self.encoder_dims,
            mlp_dims=self.mlp_dims,
            num_q=self.num_q,
            q_dropout=self.q_dropout,
            bins=self.bins,
        )


@dataclasses.dataclass
class MetricsRow:  # pylint: disable=too-many-instance-attributes
    env_step: int
    episode_return: float
    eval_return: float
    model_loss: float
    policy_loss: float
    alignment_loss: float
    q_mean: float
    planner_elite_return_mean: float
    grad_norm_model: float
    grad_norm_policy: float
    wall_clock: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


METRICS_HEADER = tuple(field.name for field in dataclasses.fields(MetricsRow))


class MetricsWriter:
    """CSV metrics file, rewritten with its header on creation, then appended row by row"""

    def __init__(self, path: Path):
        self.path = path
        self._write(METRICS_HEADER, mode="w")

    def _write(self, values: typing.Iterable[typing.Any], mode: str = "a") -> None:
        buffer = io.StringIO()
        csv.writer(buffer, lineterminator="\n").writerow(
            repr(value) if isinstance(value, float) else value for value in values
        )
        # a single write per row, flushed to disk before returning
        with self.path.open(mode, encoding="utf-8", newline="") as stream:
            stream.write(buffer.getvalue())
            stream.flush()
            os.fsync(stream.fileno())

    def append(self, row: MetricsRow) -> None:
        self._write(row.as_dict().values())


def loss_divisor(history: typing.Sequence[float]) -> float:
    """5%-95% percentile range of `history`, floored at 1"""
    low, high = np.percentile(np.asarray(history, dtype=np.float64), [5.0, 95.0])
    return max(float(high - low), 1.0)


def normalize_loss(history: typing.Sequence[float], value: float) -> float:
    """
    :raises ValueError: when `history` is empty
    """
    if len(history) == 0:
        raise ValueError("loss history window is empty")

    return value / loss_divisor(history)


class MovingPercentile:
    """Window of recent raw values, giving the divisor `normalize_loss` applies"""

    def __init__(self, window: int):
        self._values: typing.Deque[float] = collections.deque(maxlen=window)

    def __len__(self) -> int:
        return len(self._values)

    def push(self, value: float) -> None:
        self._values.append(float(value))

    def divisor(self) -> float:
        """Divisor over current window, 1 when empty"""
        if not self._values:
            return 1.0
        return loss_divisor(self._values)

    def normalize(self, value: float) -> float:
        return normalize_loss(self._values, value) if self._values else value


@dataclasses.dataclass
class Agent:  # pylint: disable=too-many-instance-attributes
    model: WorldModel
    policy: PolicyNetwork
    model_optimizers: typing.Dict[str, OptimizerState]
    policy_optimizer: OptimizerState
    model_losses: MovingPercentile
    policy_losses: MovingPercentile
    q_values: MovingPercentile
    num_updates: int = 0


def build_agent(cfg: TrainConfig, env: Environment, seed: SeedLike) -> Agent:
    rng = make_rng(seed)
    model = init_world_model(cfg.world_model_spec(env.observation_dim, env.action_dim), rng)
    policy = init_policy(cfg.latent_dim, env.action_dim, cfg.mlp_dims, rng)
    return Agent(
        model=model,
        policy=policy,
        model_optimizers=init_model_optimizers(
            model, cfg.learning_rate, cfg.encoder_learning_rate, cfg.clip_norm
        ),
        policy_optimizer=init_optimizer(policy.params, cfg.learning_rate, cfg.clip_norm),
        model_losses=MovingPercentile(cfg.loss_norm_window),
        policy_losses=MovingPercentile(cfg.loss_norm_window),
        q_values=MovingPercentile(cfg.loss_norm_window),
    )


@dataclasses.dataclass
class CollectorState:
    """Interaction state carried from one environment step to the next"""

    observation: np.ndarray
    warm_start: typing.Optional[TrajectoryDistribution] = None
    episode_return: float = 0.0
    last_episode_return: float = 0.0
    completed_episodes: int = 0
    env_step: int = 0
    last_plan: typing.Optional[PlanResult] = None


def start_collection(env: Environment, seed: SeedLike) -> CollectorState:
    return CollectorState(observation=env.reset(seed))


def _record_step(  # pylint: disable=too-many-arguments
    env: Environment,
    collector: CollectorState,
    buffer: ReplayBuffer,
    action: np.ndarray,
    planner_mean: np.ndarray,
    planner_std: np.ndarray,
    rng: np.random.Generator,
) -> Transition:
    result = env.step(action)
    transition = Transition(
        s=collector.observation,
        a=action,
        r=result.reward,
        s_next=result.observation,
        done=result.done,
        planner_mean=planner_mean,
        planner_std=planner_std,
    )
    buffer.push(transition)

    collector.env_step += 1
    collector.episode_return += result.reward
    collector.observation = result.observation
    if result.done:
        collector.last_episode_return = collector.episode_return
        collector.completed_episodes += 1
        collector.episode_return = 0.0
        collector.warm_start = None
        collector.observation = env.reset(rng)
        _logger.debug(
            "episode %d over at step %d : return %.3f",
            collector.completed_episodes,
            collector.env_step,
            collector.last_episode_return,
        )

    return transition


def _update_model(
    cfg: TrainConfig, agent: Agent, batch: SequenceBatch, seed: SeedLike
) -> typing.Dict[str, float]:
    use_norm = cfg.loss_norm is LossNorm.MOVING_PERCENTILE
    agent.model, agent.model_optimizers, metrics = model_update(
        agent.model,
        agent.model_optimizers,
        batch,
        agent.policy,
        cfg.model_loss_config(),
        seed,
        loss_scale=agent.model_losses.divisor() if use_norm else 1.0,
        target_rate=cfg.target_update_rate,
    )
    agent.model_losses.push(metrics["model_loss"])
    metrics["model_loss_normalized"] = (
        agent.model_losses.normalize(metrics["model_loss"]) if use_norm else metrics["model_loss"]
    )
    return metrics


def warmup(  # pylint: disable=too-many-arguments
    cfg: TrainConfig,
    env: Environment,
    buffer: ReplayBuffer,
    agent: Agent,
    collector: CollectorState,
    seed: SeedLike,
) -> None:
    """
    Store `cfg.warmup_steps` uniformly random transitions, then pretrain the world model alone on
    them for `cfg.pretrain_updates` updates. Policy is left untouched.
    """
    if len(buffer) != 0:
        raise ValueError("warmup expects an empty replay buffer")

    rng = make_rng(seed)
    planner_mean = np.full(env.action_dim, UNIFORM_ACTION_MEAN)
    planner_std = np.full(env.action_dim, UNIFORM_ACTION_STD)
    for _ in range(cfg.warmup_steps):
        action = rng.uniform(-1.0, 1.0, size=env.action_dim)
        _record_step(env, collector, buffer, action, planner_mean, planner_std, rng)

    if cfg.pretrain_updates <= 0:
        return

    _logger.info(
        "pretraining world model on %d random transitions (%d updates)",
        len(buffer),
        cfg.pretrain_updates,
    )
    for update in range(cfg.pretrain_updates):
        try:
            batch = sample_sequences(buffer, cfg.batch_size, cfg.horizon, rng)
        except InsufficientDataError as exception:
            _logger.warning("skipping world model pretraining : %s", exception)
            return

        metrics = _update_model(cfg, agent, batch, rng)
        if (update + 1) % max(cfg.pretrain_updates // 10, 1) == 0:
            _logger.debug("pretraining update %d : loss %.4f", update + 1, metrics["model_loss"])


def collect_step(  # pylint: disable=too-many-arguments
    cfg: TrainConfig,
    env: Environment,
    agent: Agent,
    collector: CollectorState,
    buffer: ReplayBuffer,
    seed: SeedLike,
    planning_model: typing.Optional[PlanningModel] = None,
) -> Transition:
    """
    Plan from the encoded current observation (with receding horizon warm start), act with
    exploration noise and store the transition.
    An explicit `planning_model` replaces the world model, and then plans from raw observations.
    """
    rng = make_rng(seed)
    if planning_model is None:
        planning_model = WorldModelPlanningView(agent.model, agent.policy)
        latent = encode(agent.model, collector.observation)
    else:
        latent = collector.observation

    result = plan(planning_model, latent, collector.warm_start, cfg.plan, rng, train_mode=True)
    collector.last_plan = result
    collector.warm_start = result.final_dist.shifted(cfg.plan.std_max)

    return _record_step(
        env, collector, buffer, result.action, result.surrogate_mean, result.surrogate_std, rng
    )


def train_iteration(
    cfg: TrainConfig, buffer: ReplayBuffer, agent: Agent, seed: SeedLike
) -> typing.Dict[str, float]:
    """
    Sample one batch, then update world model and policy on it (in that order).
    Loss divisors come from the moving windows of previous updates.

    :raises InsufficientDataError: when buffer holds no valid sequence
    """
    rng = make_rng(seed)
    batch = sample_sequences(buffer, cfg.batch_size, cfg.horizon, rng)
    metrics = _update_model(cfg, agent, batch, rng)

    use_norm = cfg.loss_norm is LossNorm.MOVING_PERCENTILE
    agent.policy, agent.policy_optimizer, policy_metrics = policy_update(
        agent.policy,
        agent.policy_optimizer,
        agent.model,
        batch,
        cfg.align,
        rng,
        q_scale=agent.q_values.divisor() if use_norm else 1.0,
        loss_scale=agent.policy_losses.divisor() if use_norm else 1.0,
    )
    agent.q_values.push(policy_metrics["q_mean"])
    agent.policy_losses.push(policy_metrics["policy_loss"])
    agent.num_updates += 1

    metrics.update(policy_metrics)
    metrics["policy_loss_normalized"] = (
        agent.policy_losses.normalize(policy_metrics["policy_loss"])
        if use_norm
        else policy_metrics["policy_loss"]
    )
    return metrics


def evaluate(cfg: TrainConfig, agent: Agent, seed: SeedLike) -> float:
    """
    Mean return of `cfg.eval_episodes` noise-free episodes (executing the planner first mean
    action) on a fresh environment. Neither agent nor replay buffer are modified.
    """
    rng = make_rng(seed)
    env = make_env(cfg.env, episode_limit=cfg.episode_limit)
    planning_model = WorldModelPlanningView(agent.model, agent.policy)

    returns = []
    for _ in range(cfg.eval_episodes):
        observation = env.reset(rng)
        warm_start = None
        total = 0.0
        while not env.is_done:
            result = plan(
                planning_model, encode(agent.model, observation), warm_start, cfg.plan, rng
            )
            warm_start = result.final_dist.shifted(cfg.plan.std_max)
            step = env.step(result.action)
            observation = step.observation
            total += step.reward
        returns.append(total)

    return float(np.mean(returns))


def random_policy_return(
    env_name: str, episodes: int, seed: SeedLike, episode_limit: int = 200
) -> float:
    """Mean return of uniformly random actions, as a learning baseline"""
    rng = make_rng(seed)
    env = make_env(env_name, episode_limit=episode_limit)

    returns = []
    for _ in range(episodes):
        env.reset(rng)
        total = 0.0
        while not env.is_done:
            total += env.step(rng.uniform(-1.0, 1.0, size=env.action_dim)).reward
        returns.append(total)

    return float(np.mean(returns))


def _mean_metric(updates: typing.Sequence[typing.Dict[str, float]], key: str) -> float:
    if not updates:
        return 0.0
    return float(np.mean([metrics[key] for metrics in updates]))


def run(cfg: TrainConfig, out_dir: typing.Union[str, Path]) -> typing.Dict[str, float]:
    """
    Warmup, then planner-driven collection interleaved with updates until `cfg.total_steps`
    environment steps (warmup included). Metrics are appended to `metrics.csv` every
    `cfg.log_interval` steps and a checkpoint is written at the end. Updates start once an episode
    holds `cfg.horizon + 1` transitions.

    :returns dict: last metrics row, along with the random-policy baseline
    :raises DivergenceError: after a diagnostic row was written, when any loss diverged
    """
    # pylint: disable=too-many-locals
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_FILE_NAME).write_text(dump_config(cfg), encoding="utf-8")

    env = make_env(cfg.env, episode_limit=cfg.episode_limit)
    init_seed, env_seed, collect_seed, train_seed, eval_seed, baseline_seed = spawn_seeds(
        cfg.seed, 6
    )
    agent = build_agent(cfg, env, init_seed)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    collect_rng = make_rng(collect_seed)
    train_rng = make_rng(train_seed)
    eval_rng = make_rng(eval_seed)

    baseline = random_policy_return(
        cfg.env, cfg.eval_episodes, baseline_seed, episode_limit=cfg.episode_limit
    )
    _logger.info("%s : random policy mean return is %.3f", cfg.env, baseline)

    writer = MetricsWriter(out_dir / METRICS_FILE_NAME)
    collector = start_collection(env, env_seed)
    started_at = time.perf_counter()

    updates: typing.List[typing.Dict[str, float]] = []
    elite_returns: typing.List[float] = []
    last_eval: typing.Optional[float] = None
    row: typing.Optional[MetricsRow] = None

    def _make_row(env_step: int, eval_return: float) -> MetricsRow:
        return MetricsRow(
            env_step=env_step,
            episode_return=collector.last_episode_return,
            eval_return=eval_return,
            model_loss=_mean_metric(updates, "model_loss"),
            policy_loss=_mean_metric(updates, "policy_loss"),
            alignment_loss=_mean_metric(updates, "alignment_loss"),
            q_mean=_mean_metric(updates, "q_mean"),
            planner_elite_return_mean=float(np.mean(elite_returns)) if elite_returns else 0.0,
            grad_norm_model=_mean_metric(updates, "grad_norm_model"),
            grad_norm_policy=_mean_metric(updates, "grad_norm_policy"),
            wall_clock=(time.perf_counter() - started_at) if cfg.record_wall_clock else 0.0,
        )

    with contextlib.ExitStack() as stack:
        trace_stream = None
        if cfg.plan_trace:
            trace_stream = stack.enter_context(
                (out_dir / PLAN_TRACE_FILE_NAME).open("w", encoding="utf-8")
            )

        try:
            warmup(cfg, env, buffer, agent, collector, train_rng)

            for env_step in range(collector.env_step + 1, cfg.total_steps + 1):
                collect_step(cfg, env, agent, collector, buffer, collect_rng)
                assert collector.last_plan is not None
                elite_returns.append(float(np.mean(collector.last_plan.elite_returns)))
                if trace_stream is not None:
                    write_plan_trace(trace_stream, env_step, collector.last_plan)

                if buffer.num_start_positions(cfg.horizon) == 0:
                    _logger.debug(
                        "step %d : no episode holds %d transitions yet, updates skipped",
                        env_step,
                        cfg.horizon + 1,
                    )
                else:
                    for _ in range(cfg.updates_per_env_step):
                        updates.append(train_iteration(cfg, buffer, agent, train_rng))

                is_last_step = env_step == cfg.total_steps
                if env_step % cfg.eval_interval == 0 or is_last_step:
                    last_eval = evaluate(cfg, agent, eval_rng)
                    _logger.info("step %d : evaluation return %.3f", env_step, last_eval)

                if env_step % cfg.log_interval == 0 or is_last_step:
                    if last_eval is None:
                        last_eval = evaluate(cfg, agent, eval_rng)
                    row = _make_row(env_step, last_eval)
                    writer.append(row)
                    _logger.info(
                        "step %d : episode return %.3f, model loss %.4f, policy loss %.4f",
                        env_step,
                        row.episode_return,
                        row.model_loss,
                        row.policy_loss,
                    )
                    updates.clear()
                    elite_returns.clear()
        except DivergenceError as exception:
            nan = math.nan
            writer.append(
                dataclasses.replace(
                    _make_row(collector.env_step, nan if last_eval is None else last_eval),
                    model_loss=nan,
                    policy_loss=nan,
                )
            )
            _logger.error("training diverged at step %d : %s", collector.env_step, exception)
            raise

    if row is None:
        # no collection step (warmup covered every step)
        row = _make_row(collector.env_step, evaluate(cfg, agent, eval_rng))
        writer.append(row)

    save_checkpoint(out_dir / CHECKPOINT_FILE_NAME, agent.model, agent.policy, config_echo(cfg))
    return {**row.as_dict(), "random_policy_return": baseline}
