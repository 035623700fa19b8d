"""Rollout buffer collection.

Segments are carved out of full episodes rolled by checkpoint policies in
their stochastic mode: each checkpoint gets an equal step budget, start
indices are uniform over the collected steps, and slices truncate at
episode boundaries so discounted returns stay well-defined.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from feedlab.envs import (
    GRIDNAV_ID,
    POINTMASS_ID,
    EnvSpec,
    GridNavSpec,
    PointMassSpec,
    Segment,
    Transition,
    discounted_return,
    make_env,
    snapshot,
)
from feedlab.errors import ConfigError, DomainError
from feedlab.experts import Checkpoint, policy_action


@dataclass
class RolloutBuffer:
    env_spec: EnvSpec
    segments: list[Segment]
    n_segments: int
    max_len: int
    seed: int

    def __len__(self) -> int:
        return len(self.segments)

    def returns(self, gamma: float | None = None) -> np.ndarray:
        g = self.env_spec.gamma if gamma is None else gamma
        return np.array(
            [discounted_return(s, g) for s in self.segments], dtype=np.float64
        )


def _check_policy_env(policy, env_spec: EnvSpec) -> None:
    if policy.kind == "tabular" and not isinstance(env_spec, GridNavSpec):
        raise DomainError("tabular policy only acts in gridnav")
    if policy.kind == "pd" and not isinstance(env_spec, PointMassSpec):
        raise DomainError("pd policy only acts in pointmass")
    if policy.kind == "cloned" and policy.discrete is not None:
        if policy.discrete != isinstance(env_spec, GridNavSpec):
            raise DomainError("cloned policy head does not match env action space")


def _roll_episode(env, policy, rng):
    """One full episode: per-step state snapshots (including the final
    state) plus the transition list."""
    state = env.reset(rng)
    states = [snapshot(state)]
    transitions = []
    while not state.terminated:
        a = policy_action(policy, env, env.obs(state), rng, greedy=False)
        tr, state = env.step(state, a)
        transitions.append(tr)
        states.append(snapshot(state))
    return states, transitions


def _collect_for_checkpoint(env_spec, checkpoint_index, checkpoint, quota, max_len, step_budget, seed_seq):
    env = make_env(env_spec)
    rng = np.random.default_rng(seed_seq)
    episodes = []
    steps = 0
    while steps < step_budget or not episodes:
        states, transitions = _roll_episode(env, checkpoint.policy, rng)
        episodes.append((states, transitions))
        steps += len(transitions)
    lengths = np.array([len(t) for _, t in episodes])
    cumulative = np.cumsum(lengths)
    total = int(cumulative[-1])
    segments = []
    for _ in range(quota):
        flat = int(rng.integers(total))
        ep = int(np.searchsorted(cumulative, flat, side="right"))
        start = flat - (int(cumulative[ep - 1]) if ep > 0 else 0)
        states, transitions = episodes[ep]
        chunk = transitions[start : start + max_len]
        end = start + len(chunk)
        segments.append(
            Segment(
                env_id=env_spec.env_id,
                transitions=[
                    Transition(tr.obs.copy(), tr.action, tr.reward, tr.terminated)
                    for tr in chunk
                ],
                initial_snapshot=snapshot(states[start]),
                final_obs=env.obs(states[end]),
                source_checkpoint=checkpoint_index,
                episode_index=ep,
                start_index=start,
            )
        )
    return segments


def collect_segments(
    checkpoints: list[Checkpoint],
    env_spec: EnvSpec,
    n_segments: int = 1000,
    max_len: int = 50,
    seed: int = 0,
    step_budget: int | None = None,
    threads: int = 1,
) -> RolloutBuffer:
    """Build a rollout buffer of ``n_segments`` segments.

    Checkpoints are visited round-robin with an equal step budget each
    (default ``n_segments * max_len / n_checkpoints``). The merged buffer
    is sorted by (checkpoint, episode, start index) so parallel collection
    cannot change the result.
    """
    if n_segments < 1:
        raise ConfigError("n_segments must be at least 1")
    if max_len < 1:
        raise ConfigError("max_len must be at least 1")
    if len(checkpoints) == 0:
        raise ConfigError("need at least one checkpoint")
    for cp in checkpoints:
        _check_policy_env(cp.policy, env_spec)
    n_cp = len(checkpoints)
    per_budget = (
        step_budget
        if step_budget is not None
        else max(1, (n_segments * max_len) // n_cp)
    )
    base, extra = divmod(n_segments, n_cp)
    quotas = [base + (1 if i < extra else 0) for i in range(n_cp)]
    children = np.random.SeedSequence(seed).spawn(n_cp)
    jobs = [
        (i, checkpoints[i], quotas[i], children[i])
        for i in range(n_cp)
        if quotas[i] > 0
    ]

    def run(job):
        i, cp, quota, seq = job
        return _collect_for_checkpoint(
            env_spec, i, cp, quota, max_len, per_budget, seq
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run, jobs))
    else:
        chunks = [run(job) for job in jobs]
    segments = [seg for chunk in chunks for seg in chunk]
    segments.sort(
        key=lambda s: (s.source_checkpoint, s.episode_index, s.start_index)
    )
    return RolloutBuffer(
        env_spec=env_spec,
        segments=segments,
        n_segments=n_segments,
        max_len=max_len,
        seed=seed,
    )
