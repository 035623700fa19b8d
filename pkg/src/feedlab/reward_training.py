"""Training reward-model ensembles from feedback datasets.

Each feedback type reduces to one of two supervised problems: regression
of a predicted segment sum onto a scalar (ratings, cluster descriptions)
or a logistic preference between two row blocks (comparisons, corrections,
cluster preferences, demonstrations paired against fresh random rollouts).
An ensemble is a set of nets trained on bootstrap resamples of the same
training split, sharing one validation split for early stopping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import EnvSpec, Segment, make_env, snapshot
from .errors import ConfigError
from .experts import Checkpoint, random_policy
from .feedback import (
    FIRST_PREFERRED,
    SECOND_PREFERRED,
    ClusterDescription,
    CorrectionInstance,
    DemoInstance,
    PreferenceInstance,
    RatingInstance,
)
from .nets import (
    LOSS_BT,
    LOSS_MSE,
    AdamW,
    RewardNet,
    bt_loss,
    gradient_of_loss,
    init_reward_net,
    mse_loss,
    net_forward,
    net_from_payload,
    net_to_payload,
    segment_features,
)
from .rollouts import _roll_episode, collect_segments


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 5
    beta_rationality: float = 1.0
    seed: int = 0
    validation_fraction: float = 0.1
    hidden: tuple = (64, 64, 64)
    n_members: int = 4

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs, and patience must be positive")
        if self.patience > self.max_epochs:
            raise ConfigError("patience cannot exceed max_epochs")
        if self.beta_rationality <= 0.0:
            raise ConfigError("beta_rationality must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must sit strictly inside (0, 1)")
        if self.n_members < 1:
            raise ConfigError("n_members must be at least 1")


@dataclass
class RewardEnsemble:
    """Bootstrap ensemble over reward nets. Prediction is the arithmetic
    mean across members; spread is the per-query population std."""

    members: list = field(repr=False)

    def __post_init__(self):
        if not self.members:
            raise ConfigError("ensemble needs at least one member")

    def member_rows(self, x) -> np.ndarray:
        return np.stack([net_forward(m, x) for m in self.members])

    def predict_rows(self, x) -> np.ndarray:
        return self.member_rows(x).mean(axis=0)

    def spread_rows(self, x) -> np.ndarray:
        return self.member_rows(x).std(axis=0)

    def predict_segment(self, segment: Segment, env_spec: EnvSpec) -> float:
        return float(np.sum(self.predict_rows(segment_features(segment, env_spec))))


def ensemble_to_payload(ensemble: RewardEnsemble) -> dict:
    return {"members": [net_to_payload(m) for m in ensemble.members]}


def ensemble_from_payload(payload: dict) -> RewardEnsemble:
    return RewardEnsemble(
        members=[net_from_payload(p) for p in payload["members"]]
    )


def sample_random_policy_segments(env_spec: EnvSpec, n: int, max_len: int, seed: int):
    """Segments collected from a uniform-random policy under the same
    carving protocol the rollout sampler uses."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    ckpt = Checkpoint(policy=random_policy(env_spec), train_step=0, eval_return=0.0)
    buf = collect_segments(
        [ckpt], env_spec, n_segments=n, max_len=max_len, seed=seed
    )
    return list(buf.segments)


def _matched_random_segment(env_spec: EnvSpec, length: int, seed_seq) -> Segment:
    """One random-policy segment of at most the requested length, rolled
    from a fresh episode start."""
    env = make_env(env_spec)
    rng = np.random.default_rng(seed_seq)
    states, transitions = _roll_episode(env, random_policy(env_spec), rng)
    cut = min(length, len(transitions))
    kept = transitions[:cut]
    return Segment(
        env_id=states[0].env_id,
        transitions=list(kept),
        initial_snapshot=snapshot(states[0]),
        final_obs=env.obs(states[cut]).copy(),
    )


def _segment_from_ref(buffer, ref):
    if buffer is None:
        raise ConfigError(
            "this feedback type references buffer segments; pass the rollout buffer"
        )
    return buffer.segments[ref]


def make_training_items(instances, env_spec, buffer=None, clusters=None, pair_seed=0):
    """Reduce a homogeneous feedback dataset to loss-ready items.

    Returns (loss_kind, items, strata). MSE items are (rows, target)
    pairs; preference items are (preferred rows, other rows) pairs. For
    labeled preference data, strata carries the original slot labels so
    the validation split can stratify; it is None for regression data.
    """
    if not instances:
        raise ConfigError("empty feedback dataset")
    head = type(instances[0])
    if any(type(inst) is not head for inst in instances):
        raise ConfigError("training input must hold a single feedback type")

    if head is RatingInstance:
        items = [
            (
                segment_features(_segment_from_ref(buffer, inst.segment_ref), env_spec),
                float(inst.rating),
            )
            for inst in instances
        ]
        return LOSS_MSE, items, None

    if head is ClusterDescription:
        items = [
            (np.asarray(inst.representative, dtype=float)[None, :], float(inst.mean_reward))
            for inst in instances
        ]
        return LOSS_MSE, items, None

    if head is PreferenceInstance:
        labels = {inst.label for inst in instances}
        if len(labels) == 1:
            raise ConfigError(
                "preference dataset carries a single label class; "
                "refusing a degenerate training set"
            )
        items, strata = [], []
        for inst in instances:
            if inst.kind == "cluster":
                if clusters is None:
                    raise ConfigError(
                        "cluster preferences need the cluster descriptions"
                    )
                by_id = {c.cluster_id: c for c in clusters}
                rows_first = np.asarray(
                    by_id[inst.first].representative, dtype=float
                )[None, :]
                rows_second = np.asarray(
                    by_id[inst.second].representative, dtype=float
                )[None, :]
            else:
                rows_first = segment_features(
                    _segment_from_ref(buffer, inst.first), env_spec
                )
                rows_second = segment_features(
                    _segment_from_ref(buffer, inst.second), env_spec
                )
            if inst.label == FIRST_PREFERRED:
                items.append((rows_first, rows_second))
            else:
                items.append((rows_second, rows_first))
            strata.append(inst.label)
        return LOSS_BT, items, strata

    if head is CorrectionInstance:
        items = [
            (
                segment_features(inst.improved, env_spec),
                segment_features(inst.original, env_spec),
            )
            for inst in instances
        ]
        return LOSS_BT, items, None

    if head is DemoInstance:
        # each demo is preferred over one fresh random segment of matched
        # length; slot order is randomized so the stored comparison set is
        # not single-class
        root = np.random.SeedSequence(entropy=pair_seed, spawn_key=(7,))
        children = root.spawn(len(instances))
        slot_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=pair_seed, spawn_key=(11,))
        )
        items, strata = [], []
        for inst, child in zip(instances, children):
            demo_rows = segment_features(inst.demo_segment, env_spec)
            rand_seg = _matched_random_segment(
                env_spec, len(inst.demo_segment.transitions), child
            )
            rand_rows = segment_features(rand_seg, env_spec)
            items.append((demo_rows, rand_rows))
            strata.append(
                FIRST_PREFERRED if slot_rng.random() < 0.5 else SECOND_PREFERRED
            )
        return LOSS_BT, items, strata

    raise ConfigError(f"no training reduction for {head.__name__}")


def split_validation(n, strata, fraction, seed):
    """Deterministic train/validation index split.

    With strata, each class contributes proportionally (at least one item
    stays in training per class). Returns (train_idx, val_idx) as lists.
    """
    if n < 2:
        raise ConfigError("need at least two items to hold out validation data")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3,)))
    if strata is None:
        order = list(rng.permutation(n))
        n_val = min(n - 1, max(1, int(round(fraction * n))))
        return sorted(order[n_val:]), sorted(order[:n_val])
    by_class = {}
    for i, s in enumerate(strata):
        by_class.setdefault(s, []).append(i)
    train_idx, val_idx = [], []
    for key in sorted(by_class, key=str):
        members = by_class[key]
        order = [members[j] for j in rng.permutation(len(members))]
        if len(members) == 1:
            train_idx.extend(order)
            continue
        n_val = min(len(members) - 1, max(1, int(round(fraction * len(members)))))
        val_idx.extend(order[:n_val])
        train_idx.extend(order[n_val:])
    if not val_idx:
        val_idx.append(train_idx.pop())
    return sorted(train_idx), sorted(val_idx)


def _loss_of(net, items, loss_kind, beta):
    if loss_kind == LOSS_MSE:
        return mse_loss(net, items)
    return bt_loss(net, items, beta)


def _train_single(net, train_items, val_items, config, loss_kind, shuffle_rng):
    """One member's loop: minibatch AdamW with early stopping on the
    shared validation items, restoring the best weights seen."""
    opt = AdamW(net, lr=config.learning_rate, weight_decay=config.weight_decay)
    best_val = float("inf")
    best_state = None
    bad_epochs = 0
    trace = []
    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(len(train_items))
        for start in range(0, len(order), config.batch_size):
            batch = [train_items[j] for j in order[start : start + config.batch_size]]
            grads_w, grads_b = gradient_of_loss(
                net, batch, loss_kind, beta=config.beta_rationality
            )
            opt.step(net, grads_w, grads_b)
        train_loss = _loss_of(net, train_items, loss_kind, config.beta_rationality)
        val_loss = _loss_of(net, val_items, loss_kind, config.beta_rationality)
        trace.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_state = (
                [w.copy() for w in net.weights],
                [b.copy() for b in net.biases],
            )
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    if best_state is not None:
        net.weights = best_state[0]
        net.biases = best_state[1]
    return trace


def train_reward_model(
    instances, env_spec: EnvSpec, config: TrainConfig, buffer=None, clusters=None
):
    """Train a bootstrap ensemble on one feedback dataset.

    Returns (ensemble, traces) where traces[k] lists (epoch, train_loss,
    val_loss) for member k.
    """
    if not instances:
        raise ConfigError("empty feedback dataset")
    loss_kind, items, strata = make_training_items(
        instances, env_spec, buffer=buffer, clusters=clusters, pair_seed=config.seed
    )
    train_idx, val_idx = split_validation(
        len(items), strata, config.validation_fraction, config.seed
    )
    train_pool = [items[i] for i in train_idx]
    val_items = [items[i] for i in val_idx]
    feature_dim = env_spec.feature_dim
    members = []
    traces = []
    root = np.random.SeedSequence(entropy=config.seed, spawn_key=(5,))
    for k, child in enumerate(root.spawn(config.n_members)):
        init_seed, resample_seed, shuffle_seed = child.spawn(3)
        net = init_reward_net(feature_dim, hidden=config.hidden, seed=init_seed)
        resample_rng = np.random.default_rng(resample_seed)
        picks = resample_rng.integers(0, len(train_pool), size=len(train_pool))
        member_train = [train_pool[j] for j in picks]
        trace = _train_single(
            net,
            member_train,
            val_items,
            config,
            loss_kind,
            np.random.default_rng(shuffle_seed),
        )
        members.append(net)
        traces.append(trace)
    return RewardEnsemble(members=members), traces
