"""Supervised policy distillation from demonstration segments.

Demonstrations are flattened into (observation, action) pairs and a small
rectifier network is fit by minibatch gradient steps. The grid task gets a
softmax action head trained with cross-entropy plus an entropy bonus that
discourages premature saturation; the continuous task gets a scalar head
trained with squared error. The result is packaged as a cloned Policy so
evaluation treats it like any other policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from feedlab.envs import GRIDNAV_N_ACTIONS, GridNavSpec, PointMassSpec
from feedlab.errors import ConfigError, UnsupportedEnvError
from feedlab.experts import Policy
from feedlab.nets import AdamW, RewardNet, _backward, _forward_cached, init_reward_net

DEFAULT_CLONE_HIDDEN = (32, 32)


@dataclass(frozen=True)
class CloneConfig:
    """Training knobs for behavioral cloning.

    ``entropy_coef`` only affects discrete tasks; zero recovers plain
    cross-entropy.
    """

    hidden: tuple = DEFAULT_CLONE_HIDDEN
    learning_rate: float = 1e-2
    batch_size: int = 32
    epochs: int = 20
    entropy_coef: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if self.entropy_coef < 0.0:
            raise ConfigError("entropy_coef must be nonnegative")
        if any(int(h) < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")


def flatten_demos(demos) -> tuple[np.ndarray, np.ndarray]:
    """Stack every demo transition into (obs_rows, actions) arrays."""
    obs_rows = []
    actions = []
    for demo in demos:
        for tr in demo.demo_segment.transitions:
            obs_rows.append(np.asarray(tr.obs, dtype=np.float64))
            actions.append(tr.action)
    if not obs_rows:
        raise ConfigError("demo dataset has no transitions")
    return np.stack(obs_rows), np.asarray(actions)


def _loss_terms(net: RewardNet, obs_rows, actions, discrete, entropy_coef):
    """Loss plus everything backprop needs.

    Returns (loss, hs, zs, d_out) where d_out is dLoss/dOutput per row.
    Log-probabilities are formed in log space, so the entropy terms stay
    finite even when the softmax saturates.
    """
    x = np.asarray(obs_rows, dtype=float)
    hs, zs = _forward_cached(net, x)
    out = hs[-1]
    n = x.shape[0]
    if discrete:
        labels = np.asarray(actions, dtype=int)
        z = out - out.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
        log_p = z - log_norm
        p = np.exp(log_p)
        ce = -float(np.mean(log_p[np.arange(n), labels]))
        ent = -np.sum(p * log_p, axis=1)
        loss = ce - entropy_coef * float(np.mean(ent))
        onehot = np.zeros_like(p)
        onehot[np.arange(n), labels] = 1.0
        d_out = (p - onehot) / n + entropy_coef * p * (log_p + ent[:, None]) / n
    else:
        targets = np.asarray(actions, dtype=float)
        resid = out[:, 0] - targets
        loss = float(np.mean(resid * resid))
        d_out = np.zeros_like(out)
        d_out[:, 0] = 2.0 * resid / n
    return loss, hs, zs, d_out


def policy_loss(net: RewardNet, obs_rows, actions, discrete, entropy_coef) -> float:
    """Cloning objective: cross-entropy minus an entropy bonus when
    ``discrete``, mean squared action error otherwise."""
    loss, _, _, _ = _loss_terms(net, obs_rows, actions, discrete, entropy_coef)
    return loss


def policy_loss_gradient(net: RewardNet, obs_rows, actions, discrete, entropy_coef):
    """Analytic parameter gradients of ``policy_loss``."""
    _, hs, zs, d_out = _loss_terms(net, obs_rows, actions, discrete, entropy_coef)
    return _backward(net, hs, zs, d_out)


def behavioral_cloning(demos, env_spec, config: CloneConfig | None = None) -> Policy:
    """Fit a cloned policy to the (observation, action) pairs in ``demos``."""
    config = config if config is not None else CloneConfig()
    if not demos:
        raise ConfigError("demo dataset is empty")
    if isinstance(env_spec, GridNavSpec):
        discrete, out_dim = True, GRIDNAV_N_ACTIONS
    elif isinstance(env_spec, PointMassSpec):
        discrete, out_dim = False, 1
    else:
        raise UnsupportedEnvError(f"no cloning rule for {env_spec!r}")
    obs_rows, actions = flatten_demos(demos)

    root = np.random.SeedSequence(entropy=config.seed)
    init_ss, shuffle_ss = root.spawn(2)
    net = init_reward_net(
        obs_rows.shape[1], hidden=config.hidden, seed=init_ss, out_dim=out_dim
    )
    opt = AdamW(net, lr=config.learning_rate, weight_decay=0.0)
    rng = np.random.default_rng(shuffle_ss)
    n = obs_rows.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            _, hs, zs, d_out = _loss_terms(
                net, obs_rows[idx], actions[idx], discrete, config.entropy_coef
            )
            grads_w, grads_b = _backward(net, hs, zs, d_out)
            opt.step(net, grads_w, grads_b)

    # policy_action left-multiplies, so transpose to (out, in)
    weights = [(w.T.copy(), b.copy()) for w, b in zip(net.weights, net.biases)]
    if discrete:
        return Policy(kind="cloned", greedy_eval=True, weights=weights, discrete=True)
    return Policy(
        kind="cloned",
        greedy_eval=True,
        weights=weights,
        discrete=False,
        action_low=env_spec.action_low,
        action_high=env_spec.action_high,
    )
