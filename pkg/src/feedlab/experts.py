"""Expert policies: training with periodic checkpoints, top-k selection,
and exact state values where the task allows it.

GridNav experts are tabular Q-learners; PointMass experts are PD
controllers tuned by iterated grid refinement. Both produce a ladder of
checkpoints from novice to tuned so the rollout buffer can mix skill
levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from feedlab.envs import (
    GRIDNAV_ID,
    GRIDNAV_N_ACTIONS,
    POINTMASS_ID,
    EnvSpec,
    EnvState,
    GridNav,
    GridNavSpec,
    PointMass,
    PointMassSpec,
    make_env,
)
from feedlab.errors import ConfigError, DomainError, UnsupportedEnvError

DEFAULT_EVAL_EPISODES = 10
DEFAULT_EVAL_SEED = 20240601


@dataclass
class Policy:
    """A policy of one of four kinds, with both a greedy and a stochastic
    action rule.

    kind "tabular": ``q_table`` of shape (cells, actions) over a square
    grid; stochastic mode is epsilon-greedy. kind "pd": proportional gains
    on position and velocity with additive exploration noise in stochastic
    mode. kind "random": uniform over the action space. kind "cloned": a
    small ReLU network stored as (weight, bias) pairs, classifying actions
    when ``discrete`` else regressing a clipped scalar.

    ``greedy_eval`` picks the default action rule used during evaluation.
    """

    kind: str
    greedy_eval: bool = True
    q_table: np.ndarray | None = None
    grid_size: int | None = None
    epsilon: float = 0.2
    k1: float = 0.0
    k2: float = 0.0
    explore_std: float = 0.3
    weights: list | None = None
    discrete: bool | None = None
    action_low: float = -1.0
    action_high: float = 1.0


@dataclass
class Checkpoint:
    policy: Policy
    train_step: int
    eval_return: float


@dataclass
class ValueTable:
    """State values for an environment.

    GridNav tables are exact (value iteration on the finite state space).
    PointMass tables are fitted on a discretized grid and carry
    ``approx=True``; callers that need exactness must reject them.
    """

    env_id: str
    gamma: float
    values: np.ndarray
    approx: bool = False
    pos_grid: np.ndarray | None = None
    vel_grid: np.ndarray | None = None

    def value_of_cell(self, cell: tuple[int, int]) -> float:
        if self.env_id != GRIDNAV_ID:
            raise DomainError("cell lookup only defined for gridnav tables")
        return float(self.values[cell[0], cell[1]])

    def value_of_obs(self, obs: np.ndarray) -> float:
        if self.env_id == GRIDNAV_ID:
            n = self.values.shape[0] - 1
            cell = (int(round(float(obs[0]) * n)), int(round(float(obs[1]) * n)))
            return self.value_of_cell(cell)
        # Bilinear interpolation on the fitted grid, clipped to its box.
        p = float(np.clip(obs[0], self.pos_grid[0], self.pos_grid[-1]))
        v = float(np.clip(obs[1], self.vel_grid[0], self.vel_grid[-1]))
        i = int(np.clip(np.searchsorted(self.pos_grid, p) - 1, 0, len(self.pos_grid) - 2))
        j = int(np.clip(np.searchsorted(self.vel_grid, v) - 1, 0, len(self.vel_grid) - 2))
        p0, p1 = self.pos_grid[i], self.pos_grid[i + 1]
        v0, v1 = self.vel_grid[j], self.vel_grid[j + 1]
        wp = (p - p0) / (p1 - p0)
        wv = (v - v0) / (v1 - v0)
        vals = self.values
        return float(
            (1 - wp) * (1 - wv) * vals[i, j]
            + wp * (1 - wv) * vals[i + 1, j]
            + (1 - wp) * wv * vals[i, j + 1]
            + wp * wv * vals[i + 1, j + 1]
        )


@dataclass
class ExpertEnsemble:
    experts: list[Policy]
    eval_returns: list[float]
    exact_values: ValueTable | None = None

    def __post_init__(self) -> None:
        if len(self.experts) < 1:
            raise ConfigError("expert ensemble needs at least one policy")
        for a, b in zip(self.eval_returns, self.eval_returns[1:]):
            if a < b:
                raise ConfigError("experts must be sorted by descending eval_return")


@dataclass
class ExpertConfig:
    """Knobs for expert training. ``budget_steps=None`` picks a per-env
    default (20k GridNav, 60k PointMass)."""

    budget_steps: int | None = None
    n_checkpoints: int = 20
    learning_rate: float = 0.2
    epsilon: float = 0.2
    q_init: float = 0.0
    gain_box: tuple[float, float] = (0.0, 6.0)
    search_rounds: int = 3
    eval_episodes: int = DEFAULT_EVAL_EPISODES
    eval_seed: int = DEFAULT_EVAL_SEED
    greedy_eval: bool = True


def _cell_index(cell: tuple[int, int], size: int) -> int:
    return cell[0] * size + cell[1]


def policy_action(policy: Policy, env, obs: np.ndarray, rng: np.random.Generator, greedy: bool | None = None):
    """Produce an action for ``obs``; ``greedy=None`` defers to the
    policy's ``greedy_eval`` flag."""
    use_greedy = policy.greedy_eval if greedy is None else greedy
    if policy.kind == "tabular":
        cell = env.cell_of_obs(obs)
        row = policy.q_table[_cell_index(cell, policy.grid_size)]
        if not use_greedy and rng.uniform() < policy.epsilon:
            return int(rng.integers(GRIDNAV_N_ACTIONS))
        return int(np.argmax(row))
    if policy.kind == "pd":
        a = -policy.k1 * float(obs[0]) - policy.k2 * float(obs[1])
        if not use_greedy:
            a += float(rng.normal(0.0, policy.explore_std))
        return float(np.clip(a, policy.action_low, policy.action_high))
    if policy.kind == "random":
        if isinstance(env, GridNav):
            return int(rng.integers(GRIDNAV_N_ACTIONS))
        return float(rng.uniform(env.spec.action_low, env.spec.action_high))
    if policy.kind == "cloned":
        h = np.asarray(obs, dtype=np.float64)
        for w, b in policy.weights[:-1]:
            h = np.maximum(w @ h + b, 0.0)
        w, b = policy.weights[-1]
        out = w @ h + b
        if policy.discrete:
            if use_greedy:
                return int(np.argmax(out))
            z = out - np.max(out)
            p = np.exp(z)
            p /= p.sum()
            return int(rng.choice(len(p), p=p))
        a = float(out[0])
        if not use_greedy:
            a += float(rng.normal(0.0, policy.explore_std))
        return float(np.clip(a, policy.action_low, policy.action_high))
    raise DomainError(f"unknown policy kind {policy.kind!r}")


def random_policy(env_spec: EnvSpec) -> Policy:
    if isinstance(env_spec, PointMassSpec):
        return Policy(
            kind="random",
            greedy_eval=False,
            action_low=env_spec.action_low,
            action_high=env_spec.action_high,
        )
    return Policy(kind="random", greedy_eval=False)


def evaluate_policy(
    policy: Policy,
    env_spec: EnvSpec,
    n_episodes: int = DEFAULT_EVAL_EPISODES,
    seed: int = DEFAULT_EVAL_SEED,
    greedy: bool | None = None,
) -> tuple[float, list[float]]:
    """Mean and per-episode discounted returns over fresh episodes.

    Episode seeds derive from ``seed`` so repeated calls see identical
    initial states regardless of what else consumed randomness.
    """
    if n_episodes < 1:
        raise ConfigError("n_episodes must be at least 1")
    env = make_env(env_spec)
    gamma = env_spec.gamma
    returns = []
    for child in np.random.SeedSequence(seed).spawn(n_episodes):
        rng = np.random.default_rng(child)
        state = env.reset(rng)
        rewards = []
        while not state.terminated:
            a = policy_action(policy, env, env.obs(state), rng, greedy)
            tr, state = env.step(state, a)
            rewards.append(tr.reward)
        total = 0.0
        for r in reversed(rewards):
            total = r + gamma * total
        returns.append(total)
    return float(np.mean(returns)), returns


def _train_gridnav_expert(
    spec: GridNavSpec, config: ExpertConfig, seed: int
) -> list[Checkpoint]:
    budget = config.budget_steps if config.budget_steps is not None else 20000
    if budget <= 0:
        raise ConfigError("training budget must be positive")
    env = GridNav(spec)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n_cells = spec.size * spec.size
    q = np.full((n_cells, GRIDNAV_N_ACTIONS), config.q_init, dtype=np.float64)
    goal = spec.goal
    alpha = config.learning_rate
    gamma = spec.gamma
    interval = max(1, budget // config.n_checkpoints)
    checkpoints: list[Checkpoint] = []
    state = env.reset(rng)
    for step in range(1, budget + 1):
        cell = state.data
        ci = _cell_index(cell, spec.size)
        if rng.uniform() < config.epsilon:
            a = int(rng.integers(GRIDNAV_N_ACTIONS))
        else:
            a = int(np.argmax(q[ci]))
        tr, next_state = env.step(state, a)
        ni = _cell_index(next_state.data, spec.size)
        if next_state.data == goal:
            target = tr.reward
        else:
            # Horizon cutoffs are time limits, not task terminations, so
            # the backup still bootstraps.
            target = tr.reward + gamma * float(np.max(q[ni]))
        q[ci, a] += alpha * (target - q[ci, a])
        state = next_state if not next_state.terminated else env.reset(rng)
        if step % interval == 0 and len(checkpoints) < config.n_checkpoints:
            policy = Policy(
                kind="tabular",
                q_table=q.copy(),
                grid_size=spec.size,
                epsilon=config.epsilon,
                greedy_eval=config.greedy_eval,
            )
            mean_ret, _ = evaluate_policy(
                policy, spec, config.eval_episodes, config.eval_seed
            )
            checkpoints.append(Checkpoint(policy, step, mean_ret))
    return checkpoints


def _pd_policy(spec: PointMassSpec, gains: tuple[float, float], config: ExpertConfig) -> Policy:
    return Policy(
        kind="pd",
        k1=float(gains[0]),
        k2=float(gains[1]),
        explore_std=0.3,
        action_low=spec.action_low,
        action_high=spec.action_high,
        greedy_eval=config.greedy_eval,
    )


def _train_pointmass_expert(
    spec: PointMassSpec, config: ExpertConfig, seed: int
) -> list[Checkpoint]:
    budget = config.budget_steps if config.budget_steps is not None else 60000
    if budget <= 0:
        raise ConfigError("training budget must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    lo, hi = config.gain_box
    g0 = (float(rng.uniform(lo, hi / 2)), float(rng.uniform(lo, hi / 2)))

    def score(gains: tuple[float, float]) -> float:
        mean_ret, _ = evaluate_policy(
            _pd_policy(spec, gains, config),
            spec,
            config.eval_episodes,
            config.eval_seed,
            greedy=True,
        )
        return mean_ret

    steps_per_eval = config.eval_episodes * spec.horizon
    n_candidates = max(9, budget // steps_per_eval)
    side = max(3, int(math.sqrt(n_candidates / config.search_rounds)))
    center = g0
    half_width = (hi - lo) / 2
    best_gains, best_score = g0, score(g0)
    for _ in range(config.search_rounds):
        k1s = np.clip(np.linspace(center[0] - half_width, center[0] + half_width, side), lo, hi)
        k2s = np.clip(np.linspace(center[1] - half_width, center[1] + half_width, side), lo, hi)
        for k1 in k1s:
            for k2 in k2s:
                s = score((float(k1), float(k2)))
                if s > best_score:
                    best_score, best_gains = s, (float(k1), float(k2))
        center = best_gains
        half_width *= 0.35
    checkpoints: list[Checkpoint] = []
    n = config.n_checkpoints
    for i in range(n):
        frac = i / (n - 1)
        gains = (
            g0[0] + frac * (best_gains[0] - g0[0]),
            g0[1] + frac * (best_gains[1] - g0[1]),
        )
        policy = _pd_policy(spec, gains, config)
        mean_ret, _ = evaluate_policy(
            policy, spec, config.eval_episodes, config.eval_seed, greedy=True
        )
        checkpoints.append(Checkpoint(policy, round(frac * budget), mean_ret))
    return checkpoints


def train_expert(env_spec: EnvSpec, config: ExpertConfig | None = None, seed: int = 0) -> list[Checkpoint]:
    """Train one expert run and return its checkpoint ladder, ordered by
    train_step with the tuned policy last."""
    config = config if config is not None else ExpertConfig()
    if config.n_checkpoints < 2:
        raise ConfigError("need at least 2 checkpoints")
    if config.budget_steps is not None and config.budget_steps <= 0:
        raise ConfigError("training budget must be positive")
    if isinstance(env_spec, GridNavSpec):
        return _train_gridnav_expert(env_spec, config, seed)
    if isinstance(env_spec, PointMassSpec):
        return _train_pointmass_expert(env_spec, config, seed)
    raise ConfigError(f"unknown environment spec {type(env_spec).__name__}")


def select_top_experts(runs: list[list[Checkpoint]], k: int = 4) -> ExpertEnsemble:
    """Keep the k best final checkpoints across runs, ranked by
    eval_return with ties broken toward the earlier run."""
    if k < 1:
        raise ConfigError("k must be at least 1")
    if len(runs) < k:
        raise ConfigError(f"need at least {k} runs, got {len(runs)}")
    finals = [(run[-1].eval_return, idx, run[-1].policy) for idx, run in enumerate(runs)]
    finals.sort(key=lambda t: (-t[0], t[1]))
    chosen = finals[:k]
    return ExpertEnsemble(
        experts=[p for _, _, p in chosen],
        eval_returns=[r for r, _, _ in chosen],
    )


def exact_value_function(
    env_spec: EnvSpec,
    gamma: float | None = None,
    approx: bool = False,
    grid_shape: tuple[int, int] = (61, 51),
    n_action_samples: int = 9,
) -> ValueTable:
    """Optimal state values.

    GridNav: value iteration on the 64-cell MDP with the goal pinned at
    zero, run until the sup-norm Bellman residual drops below 1e-10.
    PointMass has a continuous state space, so exact values do not exist;
    with ``approx=True`` a discretized-grid fitted value iteration is
    returned instead, clearly flagged.
    """
    if isinstance(env_spec, GridNavSpec):
        g = env_spec.gamma if gamma is None else gamma
        size = env_spec.size
        goal = env_spec.goal
        n = size * size
        nxt = np.zeros((n, GRIDNAV_N_ACTIONS), dtype=np.int64)
        rew = np.zeros((n, GRIDNAV_N_ACTIONS), dtype=np.float64)
        for x in range(size):
            for y in range(size):
                ci = x * size + y
                for a, (dx, dy) in enumerate(((1, 0), (0, 1), (-1, 0), (0, -1))):
                    tx = min(max(x + dx, 0), size - 1)
                    ty = min(max(y + dy, 0), size - 1)
                    nxt[ci, a] = tx * size + ty
                    rew[ci, a] = (
                        env_spec.goal_reward
                        if (tx, ty) == goal
                        else env_spec.step_reward
                    )
        goal_idx = goal[0] * size + goal[1]
        v = np.zeros(n, dtype=np.float64)
        # Iterate all the way to an exact floating-point fixed point (the
        # backup is a contraction, so updates stop changing entirely);
        # downstream equality checks against rolled-out returns depend on
        # bit-level convergence, not just a small residual.
        for _ in range(100000):
            backed = np.max(rew + g * v[nxt], axis=1)
            backed[goal_idx] = 0.0
            residual = float(np.max(np.abs(backed - v)))
            v = backed
            if residual == 0.0:
                break
        return ValueTable(
            env_id=GRIDNAV_ID,
            gamma=g,
            values=v.reshape(size, size),
        )
    if isinstance(env_spec, PointMassSpec):
        if not approx:
            raise UnsupportedEnvError(
                "exact values are undefined on a continuous state space; "
                "pass approx=True for a fitted table"
            )
        return _fitted_pointmass_values(env_spec, gamma, grid_shape, n_action_samples)
    raise ConfigError(f"unknown environment spec {type(env_spec).__name__}")


def _fitted_pointmass_values(
    spec: PointMassSpec,
    gamma: float | None,
    grid_shape: tuple[int, int],
    n_action_samples: int,
) -> ValueTable:
    g = spec.gamma if gamma is None else gamma
    pos_grid = np.linspace(-3.0, 3.0, grid_shape[0])
    vel_grid = np.linspace(-2.5, 2.5, grid_shape[1])
    actions = np.linspace(spec.action_low, spec.action_high, n_action_samples)
    pp, vv = np.meshgrid(pos_grid, vel_grid, indexing="ij")
    v = np.zeros(grid_shape, dtype=np.float64)

    def interp(values: np.ndarray, p: np.ndarray, vel: np.ndarray) -> np.ndarray:
        p = np.clip(p, pos_grid[0], pos_grid[-1])
        vel = np.clip(vel, vel_grid[0], vel_grid[-1])
        i = np.clip(np.searchsorted(pos_grid, p) - 1, 0, len(pos_grid) - 2)
        j = np.clip(np.searchsorted(vel_grid, vel) - 1, 0, len(vel_grid) - 2)
        dp = (p - pos_grid[i]) / (pos_grid[i + 1] - pos_grid[i])
        dv = (vel - vel_grid[j]) / (vel_grid[j + 1] - vel_grid[j])
        return (
            (1 - dp) * (1 - dv) * values[i, j]
            + dp * (1 - dv) * values[i + 1, j]
            + (1 - dp) * dv * values[i, j + 1]
            + dp * dv * values[i + 1, j + 1]
        )

    for _ in range(2000):
        best = np.full(grid_shape, -np.inf)
        for a in actions:
            r = -(spec.pos_cost * pp**2 + spec.vel_cost * vv**2 + spec.act_cost * a**2)
            p_next = pp + vv * spec.dt
            v_next = vv + a * spec.dt
            best = np.maximum(best, r + g * interp(v, p_next, v_next))
        residual = float(np.max(np.abs(best - v)))
        v = best
        if residual < 1e-6:
            break
    return ValueTable(
        env_id=POINTMASS_ID,
        gamma=g,
        values=v,
        approx=True,
        pos_grid=pos_grid,
        vel_grid=vel_grid,
    )


def policy_to_payload(policy: Policy) -> dict:
    payload = {"kind": policy.kind, "greedy_eval": policy.greedy_eval}
    if policy.kind == "tabular":
        payload.update(
            q_table=policy.q_table.tolist(),
            grid_size=policy.grid_size,
            epsilon=policy.epsilon,
        )
    elif policy.kind == "pd":
        payload.update(
            k1=policy.k1,
            k2=policy.k2,
            explore_std=policy.explore_std,
            action_low=policy.action_low,
            action_high=policy.action_high,
        )
    elif policy.kind == "cloned":
        payload.update(
            weights=[[w.tolist(), b.tolist()] for w, b in policy.weights],
            discrete=policy.discrete,
            action_low=policy.action_low,
            action_high=policy.action_high,
        )
    elif policy.kind != "random":
        raise DomainError(f"unknown policy kind {policy.kind!r}")
    return payload


def policy_from_payload(payload: dict) -> Policy:
    kind = payload["kind"]
    if kind == "tabular":
        return Policy(
            kind=kind,
            greedy_eval=bool(payload["greedy_eval"]),
            q_table=np.asarray(payload["q_table"], dtype=np.float64),
            grid_size=int(payload["grid_size"]),
            epsilon=float(payload["epsilon"]),
        )
    if kind == "pd":
        return Policy(
            kind=kind,
            greedy_eval=bool(payload["greedy_eval"]),
            k1=float(payload["k1"]),
            k2=float(payload["k2"]),
            explore_std=float(payload["explore_std"]),
            action_low=float(payload["action_low"]),
            action_high=float(payload["action_high"]),
        )
    if kind == "cloned":
        return Policy(
            kind=kind,
            greedy_eval=bool(payload["greedy_eval"]),
            weights=[
                (np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
                for w, b in payload["weights"]
            ],
            discrete=bool(payload["discrete"]),
            action_low=float(payload["action_low"]),
            action_high=float(payload["action_high"]),
        )
    if kind == "random":
        return Policy(kind=kind, greedy_eval=bool(payload["greedy_eval"]))
    raise DomainError(f"unknown policy kind {kind!r}")
