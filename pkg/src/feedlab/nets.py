"""Small fully-connected reward networks with hand-rolled backprop.

A network maps one encoded (observation, action) row to one scalar. A
segment's predicted value is the sum of its row predictions, so every
loss below reduces to per-row output gradients that one backward pass
turns into parameter gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envs import EnvSpec, Segment, encode
from .errors import DomainError

LOSS_MSE = "mse"
LOSS_BT = "bt"

DEFAULT_HIDDEN = (64, 64, 64)


@dataclass
class RewardNet:
    layer_sizes: tuple
    weights: list = field(repr=False)
    biases: list = field(repr=False)

    @property
    def feature_dim(self) -> int:
        return self.layer_sizes[0]


def init_reward_net(feature_dim, hidden=DEFAULT_HIDDEN, seed=0, out_dim=1) -> RewardNet:
    """He-initialized rectifier MLP with a linear head (scalar by default)."""
    if feature_dim < 1:
        raise DomainError("feature_dim must be positive")
    sizes = (int(feature_dim),) + tuple(int(h) for h in hidden) + (int(out_dim),)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return RewardNet(layer_sizes=sizes, weights=weights, biases=biases)


def _forward_cached(net: RewardNet, x: np.ndarray):
    """Forward pass keeping activations and pre-activations for backprop."""
    if x.ndim != 2 or x.shape[1] != net.feature_dim:
        raise DomainError(
            f"expected rows of width {net.feature_dim}, got shape {x.shape}"
        )
    last = len(net.weights) - 1
    hs = [x]
    zs = []
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = hs[-1] @ w + b
        zs.append(z)
        hs.append(z if layer == last else np.maximum(z, 0.0))
    return hs, zs


def net_forward(net: RewardNet, x) -> np.ndarray:
    """Per-row scalar predictions, shape (n,)."""
    hs, _ = _forward_cached(net, np.asarray(x, dtype=float))
    return hs[-1][:, 0]


def _backward(net: RewardNet, hs, zs, row_grads):
    """Parameter gradients given dLoss/dOutput for every row."""
    delta = row_grads if row_grads.ndim == 2 else row_grads[:, None]
    n_layers = len(net.weights)
    grads_w = [None] * n_layers
    grads_b = [None] * n_layers
    for layer in reversed(range(n_layers)):
        grads_w[layer] = hs[layer].T @ delta
        grads_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ net.weights[layer].T) * (zs[layer - 1] > 0.0)
    return grads_w, grads_b


def segment_features(segment: Segment, env_spec: EnvSpec) -> np.ndarray:
    """Encoded (observation, action) rows of a segment, shape (T, D)."""
    return np.stack(
        [encode(env_spec, tr.obs, tr.action) for tr in segment.transitions]
    )


def predict_segment_reward(net: RewardNet, segment: Segment, env_spec: EnvSpec) -> float:
    """Sum of per-step predictions over the segment."""
    return float(np.sum(net_forward(net, segment_features(segment, env_spec))))


def _stack_items(mats):
    """Stack row blocks, remembering each block's slice."""
    sizes = [m.shape[0] for m in mats]
    stops = np.cumsum(sizes)
    starts = stops - sizes
    return np.vstack(mats).astype(float), list(zip(starts, stops))


def _block_sums(y, slices):
    return np.array([float(np.sum(y[a:b])) for a, b in slices])


def _sigmoid(z: float) -> float:
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _softplus(z: float) -> float:
    # log(1 + e^z) without overflow on either side
    if z > 0.0:
        return z + math.log1p(math.exp(-z))
    return math.log1p(math.exp(z))


def mse_loss(net: RewardNet, batch) -> float:
    """Mean squared error between targets and predicted segment sums.

    ``batch`` is a list of (rows, target) pairs where rows holds a
    segment's encoded steps.
    """
    if not batch:
        raise DomainError("empty batch")
    x, slices = _stack_items([item[0] for item in batch])
    targets = np.array([item[1] for item in batch], dtype=float)
    sums = _block_sums(net_forward(net, x), slices)
    return float(np.mean((targets - sums) ** 2))


def bt_prob(net: RewardNet, rows_a, rows_b, beta: float) -> float:
    """Probability that the first segment is preferred: a logistic in the
    gap of predicted sums, scaled by the rationality beta. Evaluated in
    log-space so huge sums cannot overflow."""
    if beta <= 0.0:
        raise DomainError("beta_rationality must be positive")
    sum_a = float(np.sum(net_forward(net, np.asarray(rows_a, dtype=float))))
    sum_b = float(np.sum(net_forward(net, np.asarray(rows_b, dtype=float))))
    return _sigmoid(beta * (sum_a - sum_b))


def bt_loss(net: RewardNet, pairs, beta: float = 1.0) -> float:
    """Mean negative log-likelihood over (preferred, other) row pairs."""
    if beta <= 0.0:
        raise DomainError("beta_rationality must be positive")
    if not pairs:
        raise DomainError("empty batch")
    total = 0.0
    for rows_pref, rows_other in pairs:
        s_pref = float(np.sum(net_forward(net, np.asarray(rows_pref, dtype=float))))
        s_other = float(np.sum(net_forward(net, np.asarray(rows_other, dtype=float))))
        total += _softplus(-beta * (s_pref - s_other))
    return total / len(pairs)


def gradient_of_loss(net: RewardNet, batch, loss_kind: str, beta: float = 1.0):
    """Analytic parameter gradients for either loss over a batch.

    Returns (grads_w, grads_b) shaped like the net's weights and biases.
    """
    if not batch:
        raise DomainError("empty batch")
    if loss_kind == LOSS_MSE:
        x, slices = _stack_items([item[0] for item in batch])
        targets = np.array([item[1] for item in batch], dtype=float)
        hs, zs = _forward_cached(net, x)
        sums = _block_sums(hs[-1][:, 0], slices)
        d_sums = 2.0 * (sums - targets) / len(batch)
    elif loss_kind == LOSS_BT:
        if beta <= 0.0:
            raise DomainError("beta_rationality must be positive")
        mats = []
        for rows_pref, rows_other in batch:
            mats.append(np.asarray(rows_pref, dtype=float))
            mats.append(np.asarray(rows_other, dtype=float))
        x, slices = _stack_items(mats)
        hs, zs = _forward_cached(net, x)
        sums = _block_sums(hs[-1][:, 0], slices)
        d_sums = np.empty(len(slices))
        m = len(batch)
        for i in range(m):
            gap = sums[2 * i] - sums[2 * i + 1]
            pull = -beta * _sigmoid(-beta * gap) / m
            d_sums[2 * i] = pull
            d_sums[2 * i + 1] = -pull
    else:
        raise DomainError(f"unknown loss kind: {loss_kind!r}")
    row_grads = np.empty(x.shape[0])
    for d, (a, b) in zip(d_sums, slices):
        row_grads[a:b] = d
    return _backward(net, hs, zs, row_grads)


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Moments are kept per parameter tensor; decay multiplies parameters
    directly rather than entering the gradient.
    """

    def __init__(
        self,
        net: RewardNet,
        lr: float = 1e-3,
        weight_decay: float = 1e-2,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m_w = [np.zeros_like(w) for w in net.weights]
        self.v_w = [np.zeros_like(w) for w in net.weights]
        self.m_b = [np.zeros_like(b) for b in net.biases]
        self.v_b = [np.zeros_like(b) for b in net.biases]

    def _update(self, param, grad, m, v):
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1**self.t)
        v_hat = v / (1.0 - self.beta2**self.t)
        param -= self.lr * (
            m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * param
        )

    def step(self, net: RewardNet, grads_w, grads_b):
        self.t += 1
        for w, g, m, v in zip(net.weights, grads_w, self.m_w, self.v_w):
            self._update(w, g, m, v)
        for b, g, m, v in zip(net.biases, grads_b, self.m_b, self.v_b):
            self._update(b, g, m, v)


def net_to_payload(net: RewardNet) -> dict:
    """JSON-ready dump of architecture and parameters."""
    return {
        "layer_sizes": list(net.layer_sizes),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def net_from_payload(payload: dict) -> RewardNet:
    return RewardNet(
        layer_sizes=tuple(payload["layer_sizes"]),
        weights=[np.asarray(w, dtype=float) for w in payload["weights"]],
        biases=[np.asarray(b, dtype=float) for b in payload["biases"]],
    )
