"""Downstream agents trained on replaced rewards.

A RewardSource swaps the environment reward for a model prediction, a
running mean/std keeps learned rewards on a stable scale, and joint
sources blend several models by plain averaging or by inverse-uncertainty
weights. Desk-scale agents (tabular Q-learning on the grid, cross-entropy
gain search on the point mass) optimize the source's reward while the
learning curve always reports ground-truth evaluation returns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from feedlab.envs import (
    GRIDNAV_N_ACTIONS,
    EnvState,
    GridNavSpec,
    PointMassSpec,
    Transition,
    discounted_return,
    encode,
    make_env,
)
from feedlab.errors import ConfigError, DomainError, UnsupportedEnvError
from feedlab.experts import Policy, evaluate_policy, policy_action

STD_FLOOR = 1e-8

SOURCE_GROUND_TRUTH = "ground_truth"
SOURCE_SINGLE = "single"
SOURCE_JOINT_AVERAGE = "joint_average"
SOURCE_JOINT_WEIGHTED = "joint_uncertainty_weighted"

ALGO_Q_LEARNING = "q_learning"
ALGO_CEM = "cem_policy_search"

DEFAULT_BUDGET = 30_000
CEM_INIT_STD = 2.0
CEM_STD_FLOOR = 1e-3


@dataclass
class RunningStats:
    """Single-pass mean and spread accumulator.

    ``m2`` is the sum of squared deviations from the current mean, so the
    population variance is ``m2 / count``.
    """

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @property
    def variance(self) -> float:
        if self.count < 1:
            return 0.0
        return self.m2 / self.count

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


def welford_update(stats: RunningStats, x: float) -> RunningStats:
    """Fold one value into ``stats`` in place and return it."""
    x = float(x)
    if not math.isfinite(x):
        raise DomainError(f"cannot update running stats with {x!r}")
    stats.count += 1
    delta = x - stats.mean
    stats.mean += delta / stats.count
    stats.m2 += delta * (x - stats.mean)
    return stats


def standardize(stats: RunningStats, r: float) -> float:
    """Center and scale ``r`` by the accumulated statistics.

    Callers fold ``r`` into ``stats`` first, which makes the very first
    reward map to zero instead of being undefined.
    """
    return (float(r) - stats.mean) / max(stats.std, STD_FLOOR)


def combine_average(values) -> float:
    if len(values) == 0:
        raise DomainError("cannot average zero predictions")
    return float(sum(values)) / len(values)


def combine_uncertainty_weighted(means, stds) -> float:
    """Inverse-std convex combination with stds floored at STD_FLOOR."""
    if len(means) != len(stds):
        raise DomainError("means and stds must have equal length")
    if len(means) == 0:
        raise DomainError("cannot combine zero predictions")
    num = 0.0
    den = 0.0
    for mu, sigma in zip(means, stds):
        w = 1.0 / max(float(sigma), STD_FLOOR)
        num += float(mu) * w
        den += w
    return num / den


@dataclass
class RewardSource:
    """What the agent is paid with.

    ``ensembles`` is None for the ground-truth source, one model for
    ``single`` and two or more for the joint kinds. ``stats`` holds one
    RunningStats per member so standardization happens per source before
    any combination.
    """

    kind: str
    ensembles: list | None
    standardize: bool
    stats: list[RunningStats] = field(default_factory=list)


def ground_truth_source(standardize: bool = False) -> RewardSource:
    return RewardSource(
        kind=SOURCE_GROUND_TRUTH,
        ensembles=None,
        standardize=standardize,
        stats=[RunningStats()],
    )


def single_source(ensemble, standardize: bool = True) -> RewardSource:
    return RewardSource(
        kind=SOURCE_SINGLE,
        ensembles=[ensemble],
        standardize=standardize,
        stats=[RunningStats()],
    )


def joint_average_source(ensembles, standardize: bool = True) -> RewardSource:
    if len(ensembles) < 2:
        raise ConfigError("joint sources need at least 2 models")
    return RewardSource(
        kind=SOURCE_JOINT_AVERAGE,
        ensembles=list(ensembles),
        standardize=standardize,
        stats=[RunningStats() for _ in ensembles],
    )


def joint_weighted_source(ensembles, standardize: bool = True) -> RewardSource:
    if len(ensembles) < 2:
        raise ConfigError("joint sources need at least 2 models")
    return RewardSource(
        kind=SOURCE_JOINT_WEIGHTED,
        ensembles=list(ensembles),
        standardize=standardize,
        stats=[RunningStats() for _ in ensembles],
    )


def source_reward(source: RewardSource, env_spec, obs, action, true_reward) -> float:
    """The agent-visible reward for one (obs, action) pair.

    Every member prediction updates its own running stats before being
    standardized; joint kinds combine the per-member values afterwards.
    """
    if source.kind == SOURCE_GROUND_TRUTH:
        value = float(true_reward)
        if source.standardize:
            welford_update(source.stats[0], value)
            value = standardize(source.stats[0], value)
        return value

    row = encode(env_spec, obs, action)[None, :]
    values = []
    spreads = []
    for ensemble, stats in zip(source.ensembles, source.stats):
        mu = float(ensemble.predict_rows(row)[0])
        if source.standardize:
            welford_update(stats, mu)
            value = standardize(stats, mu)
            scale = max(stats.std, STD_FLOOR)
        else:
            value = mu
            scale = 1.0
        values.append(value)
        if source.kind == SOURCE_JOINT_WEIGHTED:
            # member disagreement, on the same scale as the value
            spreads.append(float(ensemble.spread_rows(row)[0]) / scale)
    if source.kind == SOURCE_SINGLE:
        return values[0]
    if source.kind == SOURCE_JOINT_AVERAGE:
        return combine_average(values)
    if source.kind == SOURCE_JOINT_WEIGHTED:
        return combine_uncertainty_weighted(values, spreads)
    raise DomainError(f"unknown reward source kind {source.kind!r}")


def wrapped_step(env, state: EnvState, action, source: RewardSource):
    """Step the environment, paying the source's reward instead.

    Returns (transition, next_state, true_reward); the transition carries
    the replaced reward, the side channel keeps the environment's own.
    """
    tr, next_state = env.step(state, action)
    agent_reward = source_reward(source, env.spec, tr.obs, tr.action, tr.reward)
    wrapped = replace(tr, reward=agent_reward)
    return wrapped, next_state, tr.reward


@dataclass(frozen=True)
class AgentConfig:
    """Downstream training knobs.

    ``algorithm=None`` picks the env's default; ``budget_steps=None`` and
    ``eval_interval=None`` pick desk-scale defaults. ``learning_rate`` and
    ``epsilon`` drive Q-learning; ``population`` and ``elite_frac`` drive
    the cross-entropy search.
    """

    algorithm: str | None = None
    budget_steps: int | None = None
    eval_interval: int | None = None
    eval_episodes: int = 5
    seed: int = 0
    learning_rate: float = 0.2
    epsilon: float = 0.2
    population: int = 30
    elite_frac: float = 0.2

    def __post_init__(self):
        if self.budget_steps is not None and self.budget_steps < 0:
            raise ConfigError("budget_steps must be nonnegative")
        if self.eval_interval is not None and self.eval_interval < 1:
            raise ConfigError("eval_interval must be positive")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ConfigError("learning_rate must be in (0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must be in [0, 1]")
        if self.population < 2:
            raise ConfigError("population must be at least 2")
        if not 0.0 < self.elite_frac <= 1.0:
            raise ConfigError("elite_frac must be in (0, 1]")
        if self.algorithm not in (None, ALGO_Q_LEARNING, ALGO_CEM):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")


@dataclass(frozen=True)
class CurvePoint:
    step: int
    eval_return_mean: float
    eval_return_min: float
    eval_return_max: float


@dataclass
class AgentResult:
    curve: list[CurvePoint]
    policy: Policy


def _eval_point(step, policy, env_spec, config) -> CurvePoint:
    mean, per_episode = evaluate_policy(
        policy, env_spec, n_episodes=config.eval_episodes, greedy=True
    )
    return CurvePoint(
        step=int(step),
        eval_return_mean=float(mean),
        eval_return_min=float(min(per_episode)),
        eval_return_max=float(max(per_episode)),
    )


def _fresh_run_source(source: RewardSource) -> RewardSource:
    # stats belong to one training run, so each run starts its own
    return RewardSource(
        kind=source.kind,
        ensembles=source.ensembles,
        standardize=source.standardize,
        stats=[RunningStats() for _ in source.stats],
    )


def _train_gridnav(spec: GridNavSpec, source, config, budget, eval_interval):
    """Tabular Q-learning with exploring starts.

    Training episodes begin at uniformly random cells so constant-looking
    rewards (a standardized stream that is still all zeros, say) cannot
    stall exploration; evaluation still starts from the canonical state.
    """
    env = make_env(spec)
    n_cells = spec.size * spec.size
    q = np.zeros((n_cells, GRIDNAV_N_ACTIONS))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed))

    def random_start() -> EnvState:
        cell = (int(rng.integers(spec.size)), int(rng.integers(spec.size)))
        return EnvState(
            env_id=spec.env_id, step_count=0, terminated=False, data=cell
        )

    def snapshot_policy() -> Policy:
        return Policy(
            kind="tabular",
            greedy_eval=True,
            q_table=q.copy(),
            grid_size=spec.size,
            epsilon=config.epsilon,
        )

    curve: list[CurvePoint] = []
    if budget == 0:
        return AgentResult(curve=curve, policy=snapshot_policy())

    state = random_start()
    for step in range(1, budget + 1):
        if state.terminated:
            state = random_start()
        x, y = state.data
        idx = x * spec.size + y
        if rng.uniform() < config.epsilon:
            action = int(rng.integers(GRIDNAV_N_ACTIONS))
        else:
            action = int(np.argmax(q[idx]))
        wrapped, next_state, _ = wrapped_step(env, state, action, source)
        nx, ny = next_state.data
        next_idx = nx * spec.size + ny
        # a horizon cut is truncation, not a terminal state: bootstrap
        # through it so values stay consistent with the continuing task
        true_terminal = not spec.fixed_horizon and next_state.data == spec.goal
        bootstrap = 0.0 if true_terminal else float(q[next_idx].max())
        target = wrapped.reward + spec.gamma * bootstrap
        q[idx, action] += config.learning_rate * (target - q[idx, action])
        state = next_state
        if step % eval_interval == 0:
            curve.append(_eval_point(step, snapshot_policy(), spec, config))
    if not curve or curve[-1].step != budget:
        curve.append(_eval_point(budget, snapshot_policy(), spec, config))
    return AgentResult(curve=curve, policy=snapshot_policy())


def _train_pointmass(spec: PointMassSpec, source, config, budget, eval_interval):
    env = make_env(spec)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed))
    gain_mean = np.zeros(2)
    gain_std = np.full(2, CEM_INIT_STD)

    def gain_policy(k1, k2) -> Policy:
        return Policy(
            kind="pd",
            greedy_eval=True,
            k1=float(k1),
            k2=float(k2),
            explore_std=0.0,
            action_low=spec.action_low,
            action_high=spec.action_high,
        )

    curve: list[CurvePoint] = []
    if budget == 0:
        return AgentResult(curve=curve, policy=gain_policy(*gain_mean))

    n_elite = max(2, int(round(config.elite_frac * config.population)))
    steps = 0
    next_eval = eval_interval
    while steps < budget:
        gains = rng.normal(gain_mean, gain_std, size=(config.population, 2))
        scores = np.empty(config.population)
        for i, (k1, k2) in enumerate(gains):
            candidate = gain_policy(k1, k2)
            state = env.reset(rng)
            rewards = []
            while not state.terminated:
                a = policy_action(candidate, env, env.obs(state), rng, greedy=True)
                wrapped, state, _ = wrapped_step(env, state, a, source)
                rewards.append(wrapped.reward)
                steps += 1
            scores[i] = discounted_return(rewards, spec.gamma)
        elite_idx = np.argsort(scores, kind="stable")[::-1][:n_elite]
        elite = gains[elite_idx]
        gain_mean = elite.mean(axis=0)
        gain_std = elite.std(axis=0) + CEM_STD_FLOOR
        while next_eval <= steps and next_eval <= budget:
            curve.append(_eval_point(next_eval, gain_policy(*gain_mean), spec, config))
            next_eval += eval_interval
    if not curve or curve[-1].step != budget:
        curve.append(_eval_point(budget, gain_policy(*gain_mean), spec, config))
    return AgentResult(curve=curve, policy=gain_policy(*gain_mean))


def train_agent(env_spec, source: RewardSource, config: AgentConfig | None = None):
    """Optimize the source's reward; report ground-truth learning curves.

    Evaluation always replays the greedy policy on the raw environment, so
    curves from different sources are directly comparable.
    """
    config = config if config is not None else AgentConfig()
    if isinstance(env_spec, GridNavSpec):
        if config.algorithm not in (None, ALGO_Q_LEARNING):
            raise ConfigError("gridnav trains with q_learning")
        trainer = _train_gridnav
    elif isinstance(env_spec, PointMassSpec):
        if config.algorithm not in (None, ALGO_CEM):
            raise ConfigError("pointmass trains with cem_policy_search")
        trainer = _train_pointmass
    else:
        raise UnsupportedEnvError(f"no downstream agent for {env_spec!r}")
    budget = config.budget_steps if config.budget_steps is not None else DEFAULT_BUDGET
    eval_interval = (
        config.eval_interval
        if config.eval_interval is not None
        else max(budget // 10, 1)
    )
    return trainer(env_spec, _fresh_run_source(source), config, budget, eval_interval)
