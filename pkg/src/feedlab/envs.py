"""Environment core: two deterministic desk-scale control tasks.

GridNav is an 8x8 shortest-path gridworld; PointMass is a one-dimensional
double integrator with quadratic cost. Both expose functional dynamics
(state in, state out), cheap copyable snapshots, and a fixed encoding of
(observation, action) pairs used by reward models downstream.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from feedlab.errors import DomainError

GRIDNAV_ID = "gridnav"
POINTMASS_ID = "pointmass"

GRIDNAV_N_ACTIONS = 4

# Action deltas for GridNav: 0 right, 1 up, 2 left, 3 down.
_GRID_DELTAS = ((1, 0), (0, 1), (-1, 0), (0, -1))


@dataclass(frozen=True)
class GridNavSpec:
    """Parameters of the gridworld task.

    The agent starts in the lower-left corner and must reach the opposite
    corner. Every transition costs ``step_reward`` except the one entering
    the goal, which pays ``goal_reward``. With ``fixed_horizon`` the goal
    cell becomes a zero-reward absorbing state and episodes always run to
    the horizon; otherwise reaching the goal ends the episode.
    """

    size: int = 8
    step_reward: float = -0.04
    goal_reward: float = 1.0
    gamma: float = 0.99
    horizon: int = 64
    fixed_horizon: bool = False

    @property
    def env_id(self) -> str:
        return GRIDNAV_ID

    @property
    def obs_dim(self) -> int:
        return 2

    @property
    def feature_dim(self) -> int:
        return 2 + GRIDNAV_N_ACTIONS

    @property
    def goal(self) -> tuple[int, int]:
        return (self.size - 1, self.size - 1)


@dataclass(frozen=True)
class PointMassSpec:
    """Parameters of the double-integrator task.

    State is (position, velocity); a bounded scalar acceleration is applied
    each step. Reward is the negative quadratic cost of state and control,
    evaluated at the pre-step state.
    """

    dt: float = 0.1
    pos_cost: float = 1.0
    vel_cost: float = 0.1
    act_cost: float = 0.01
    action_low: float = -1.0
    action_high: float = 1.0
    init_pos_range: tuple[float, float] = (-2.0, 2.0)
    init_vel_range: tuple[float, float] = (-0.5, 0.5)
    gamma: float = 0.99
    horizon: int = 100

    @property
    def env_id(self) -> str:
        return POINTMASS_ID

    @property
    def obs_dim(self) -> int:
        return 2

    @property
    def feature_dim(self) -> int:
        return 3


EnvSpec = Union[GridNavSpec, PointMassSpec]


@dataclass
class EnvState:
    """Complete, restorable environment state.

    ``data`` is env-specific: ``(x, y)`` integer cell for GridNav,
    ``(position, velocity)`` floats for PointMass. ``rng_state`` is an
    opaque slot kept for environments with stochastic dynamics; the two
    built-in tasks are deterministic and leave it None.
    """

    env_id: str
    step_count: int
    terminated: bool
    data: tuple
    rng_state: dict | None = None


@dataclass
class Transition:
    """One environment step: the observation the action was taken in, the
    action, the reward it earned, and whether the episode ended here."""

    obs: np.ndarray
    action: int | float
    reward: float
    terminated: bool


@dataclass
class Segment:
    """A contiguous slice of one episode.

    ``initial_snapshot`` restores the environment to the exact state the
    first transition was taken from, so the slice can be replayed or used
    as a branch point. ``final_obs`` is the observation reached after the
    last transition. Provenance indices record where in the collection
    process the slice came from.
    """

    env_id: str
    transitions: list[Transition]
    initial_snapshot: EnvState
    final_obs: np.ndarray
    source_checkpoint: int | None = None
    episode_index: int | None = None
    start_index: int | None = None

    def __post_init__(self) -> None:
        if len(self.transitions) == 0:
            raise DomainError("segment must contain at least one transition")
        for tr in self.transitions[:-1]:
            if tr.terminated:
                raise DomainError("terminated transition not last in segment")

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def rewards(self) -> list[float]:
        return [tr.reward for tr in self.transitions]

    @property
    def actions(self) -> list:
        return [tr.action for tr in self.transitions]


def discounted_return(segment: Segment | list[float], gamma: float) -> float:
    """Discounted reward sum with the discount clock starting at the first
    element (exponent zero)."""
    rewards = segment.rewards if isinstance(segment, Segment) else list(segment)
    if len(rewards) == 0:
        raise DomainError("discounted_return of an empty reward sequence")
    # Backward (Horner) fold: total_t = r_t + gamma * total_{t+1}. This is
    # the same arithmetic a Bellman backup performs, so converged value
    # tables and rolled-out returns agree to the last bit on deterministic
    # tasks.
    total = 0.0
    for r in reversed(rewards):
        total = r + gamma * total
    return total


class GridNav:
    """Deterministic gridworld with clamped moves and an absorbing goal."""

    def __init__(self, spec: GridNavSpec):
        self.spec = spec

    def reset(self, rng: np.random.Generator | None = None) -> EnvState:
        """Place the agent at the start corner. The generator argument is
        accepted for interface uniformity; the start state is fixed."""
        del rng
        return EnvState(
            env_id=GRIDNAV_ID, step_count=0, terminated=False, data=(0, 0)
        )

    def obs(self, state: EnvState) -> np.ndarray:
        x, y = state.data
        n = self.spec.size - 1
        return np.array([x / n, y / n], dtype=np.float64)

    def cell_of_obs(self, obs: np.ndarray) -> tuple[int, int]:
        """Invert the normalized observation back to integer coordinates."""
        n = self.spec.size - 1
        return (int(round(float(obs[0]) * n)), int(round(float(obs[1]) * n)))

    def _validate_action(self, action) -> int:
        if isinstance(action, (bool, np.bool_)):
            raise DomainError(f"invalid gridnav action {action!r}")
        if isinstance(action, (int, np.integer)):
            a = int(action)
        elif isinstance(action, float) and action.is_integer():
            a = int(action)
        else:
            raise DomainError(f"invalid gridnav action {action!r}")
        if not 0 <= a < GRIDNAV_N_ACTIONS:
            raise DomainError(f"gridnav action {a} outside 0..3")
        return a

    def step(self, state: EnvState, action) -> tuple[Transition, EnvState]:
        spec = self.spec
        if state.env_id != GRIDNAV_ID:
            raise DomainError(f"gridnav cannot step a {state.env_id!r} state")
        if state.terminated:
            raise DomainError("cannot step a terminated state")
        if state.step_count >= spec.horizon:
            raise DomainError("cannot step a state past the horizon")
        a = self._validate_action(action)
        x, y = state.data
        goal = spec.goal
        at_goal = (x, y) == goal
        if at_goal:
            # Only reachable in fixed-horizon mode: absorbing, zero reward.
            nxt = (x, y)
            reward = 0.0
        else:
            dx, dy = _GRID_DELTAS[a]
            nxt = (
                min(max(x + dx, 0), spec.size - 1),
                min(max(y + dy, 0), spec.size - 1),
            )
            reward = spec.goal_reward if nxt == goal else spec.step_reward
        step_count = state.step_count + 1
        if spec.fixed_horizon:
            terminated = step_count >= spec.horizon
        else:
            terminated = (nxt == goal) or step_count >= spec.horizon
        transition = Transition(
            obs=self.obs(state), action=a, reward=reward, terminated=terminated
        )
        new_state = EnvState(
            env_id=GRIDNAV_ID,
            step_count=step_count,
            terminated=terminated,
            data=nxt,
        )
        return transition, new_state

    def encode(self, obs: np.ndarray, action) -> np.ndarray:
        a = self._validate_action(action)
        out = np.zeros(self.spec.feature_dim, dtype=np.float64)
        out[0] = obs[0]
        out[1] = obs[1]
        out[2 + a] = 1.0
        return out


class PointMass:
    """One-dimensional double integrator under Euler integration."""

    def __init__(self, spec: PointMassSpec):
        self.spec = spec

    def reset(self, rng: np.random.Generator | None = None) -> EnvState:
        """Sample an initial position and velocity uniformly from the
        configured ranges; a missing generator falls back to the midpoint."""
        spec = self.spec
        if rng is None:
            p = 0.5 * (spec.init_pos_range[0] + spec.init_pos_range[1])
            v = 0.5 * (spec.init_vel_range[0] + spec.init_vel_range[1])
        else:
            p = float(rng.uniform(*spec.init_pos_range))
            v = float(rng.uniform(*spec.init_vel_range))
        return EnvState(
            env_id=POINTMASS_ID, step_count=0, terminated=False, data=(p, v)
        )

    def obs(self, state: EnvState) -> np.ndarray:
        p, v = state.data
        return np.array([p, v], dtype=np.float64)

    def _validate_action(self, action) -> float:
        if isinstance(action, (bool, np.bool_)):
            raise DomainError(f"invalid pointmass action {action!r}")
        if not isinstance(action, (int, float, np.integer, np.floating)):
            raise DomainError(f"invalid pointmass action {action!r}")
        a = float(action)
        if not math.isfinite(a):
            raise DomainError("pointmass action must be finite")
        spec = self.spec
        if a < spec.action_low or a > spec.action_high:
            raise DomainError(
                f"pointmass action {a} outside [{spec.action_low}, {spec.action_high}]"
            )
        return a

    def step(self, state: EnvState, action) -> tuple[Transition, EnvState]:
        spec = self.spec
        if state.env_id != POINTMASS_ID:
            raise DomainError(f"pointmass cannot step a {state.env_id!r} state")
        if state.terminated:
            raise DomainError("cannot step a terminated state")
        if state.step_count >= spec.horizon:
            raise DomainError("cannot step a state past the horizon")
        a = self._validate_action(action)
        p, v = state.data
        reward = -(
            spec.pos_cost * p * p + spec.vel_cost * v * v + spec.act_cost * a * a
        )
        p_next = p + v * spec.dt
        v_next = v + a * spec.dt
        step_count = state.step_count + 1
        terminated = step_count >= spec.horizon
        transition = Transition(
            obs=self.obs(state), action=a, reward=reward, terminated=terminated
        )
        new_state = EnvState(
            env_id=POINTMASS_ID,
            step_count=step_count,
            terminated=terminated,
            data=(p_next, v_next),
        )
        return transition, new_state

    def encode(self, obs: np.ndarray, action) -> np.ndarray:
        a = self._validate_action(action)
        return np.array([obs[0], obs[1], a], dtype=np.float64)


Environment = Union[GridNav, PointMass]


def make_env(spec: EnvSpec) -> Environment:
    if isinstance(spec, GridNavSpec):
        return GridNav(spec)
    if isinstance(spec, PointMassSpec):
        return PointMass(spec)
    raise DomainError(f"unknown environment spec {type(spec).__name__}")


def snapshot(state: EnvState) -> EnvState:
    """Copy a state so the original can keep evolving independently."""
    return EnvState(
        env_id=state.env_id,
        step_count=state.step_count,
        terminated=state.terminated,
        data=tuple(state.data),
        rng_state=copy.deepcopy(state.rng_state),
    )


def restore(env: Environment, snap: EnvState) -> EnvState:
    """Return a fresh state equal to the snapshot, after checking that it
    belongs to this environment."""
    if snap.env_id != env.spec.env_id:
        raise DomainError(
            f"snapshot from {snap.env_id!r} cannot restore into {env.spec.env_id!r}"
        )
    return snapshot(snap)


def encode(spec: EnvSpec, obs: np.ndarray, action) -> np.ndarray:
    """Fixed-width feature vector for a (observation, action) pair.

    GridNav concatenates the normalized coordinates with a one-hot action
    (length six); PointMass appends the scalar action to the observation
    (length three).
    """
    return make_env(spec).encode(np.asarray(obs, dtype=np.float64), action)


def spec_to_payload(spec: EnvSpec) -> dict:
    """JSON-ready description of an environment spec."""
    if isinstance(spec, GridNavSpec):
        return {
            "env_id": GRIDNAV_ID,
            "size": spec.size,
            "step_reward": spec.step_reward,
            "goal_reward": spec.goal_reward,
            "gamma": spec.gamma,
            "horizon": spec.horizon,
            "fixed_horizon": spec.fixed_horizon,
        }
    if isinstance(spec, PointMassSpec):
        return {
            "env_id": POINTMASS_ID,
            "dt": spec.dt,
            "pos_cost": spec.pos_cost,
            "vel_cost": spec.vel_cost,
            "act_cost": spec.act_cost,
            "action_low": spec.action_low,
            "action_high": spec.action_high,
            "init_pos_range": list(spec.init_pos_range),
            "init_vel_range": list(spec.init_vel_range),
            "gamma": spec.gamma,
            "horizon": spec.horizon,
        }
    raise DomainError(f"unknown environment spec {type(spec).__name__}")


def spec_from_payload(payload: dict) -> EnvSpec:
    env_id = payload.get("env_id")
    if env_id == GRIDNAV_ID:
        return GridNavSpec(
            size=int(payload["size"]),
            step_reward=float(payload["step_reward"]),
            goal_reward=float(payload["goal_reward"]),
            gamma=float(payload["gamma"]),
            horizon=int(payload["horizon"]),
            fixed_horizon=bool(payload["fixed_horizon"]),
        )
    if env_id == POINTMASS_ID:
        return PointMassSpec(
            dt=float(payload["dt"]),
            pos_cost=float(payload["pos_cost"]),
            vel_cost=float(payload["vel_cost"]),
            act_cost=float(payload["act_cost"]),
            action_low=float(payload["action_low"]),
            action_high=float(payload["action_high"]),
            init_pos_range=tuple(float(v) for v in payload["init_pos_range"]),
            init_vel_range=tuple(float(v) for v in payload["init_vel_range"]),
            gamma=float(payload["gamma"]),
            horizon=int(payload["horizon"]),
        )
    raise DomainError(f"unknown env_id {env_id!r} in payload")


def replay(env: Environment, segment: Segment) -> list[Transition]:
    """Re-execute a segment's actions from its initial snapshot.

    With deterministic dynamics the result must reproduce the recorded
    transitions exactly; tests rely on this to validate snapshots.
    """
    state = restore(env, segment.initial_snapshot)
    out = []
    for tr in segment.transitions:
        new_tr, state = env.step(state, tr.action)
        out.append(new_tr)
    return out
