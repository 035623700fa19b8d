"""The six feedback generators, rating calibration, and the optimality gap.

Each generator is a pure function of (buffer, config, seed) producing
instance records that point back into the buffer (or into a cluster set)
together with the ground-truth quantity the feedback reflects. With no
noise applied, every label agrees with ground truth by construction; the
noise engine then degrades copies of these records.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from feedlab.clustering import minibatch_kmeans
from feedlab.envs import (
    EnvState,
    Segment,
    Transition,
    discounted_return,
    encode,
    make_env,
    restore,
    snapshot,
)
from feedlab.errors import (
    CalibrationError,
    ConfigError,
    DomainError,
    GenerationExhaustedError,
    UnsupportedEnvError,
)
from feedlab.experts import ExpertEnsemble, Policy, ValueTable, policy_action
from feedlab.rollouts import RolloutBuffer

logger = logging.getLogger(__name__)

FIRST_PREFERRED = "first_preferred"
SECOND_PREFERRED = "second_preferred"

# canonical dataset-type names shared by training, persistence, and the CLI
FEEDBACK_EVALUATIVE = "evaluative"
FEEDBACK_COMPARATIVE = "comparative"
FEEDBACK_DEMONSTRATIVE = "demonstrative"
FEEDBACK_CORRECTIVE = "corrective"
FEEDBACK_DESCRIPTIVE = "descriptive"
FEEDBACK_DESCRIPTIVE_PREFERENCE = "descriptive_preference"

DEFAULT_N_BINS = 10
DEFAULT_EXCLUSION_FRAC = 0.1
RETRY_FACTOR = 20


@dataclass
class BinCalibration:
    """Equal-width bins over the calibration returns.

    Bins are half-open [lo + i*w, lo + (i+1)*w) except the last, which
    closes at ``hi`` so the maximum calibration return lands in the top
    bin. Out-of-range values clamp to the nearest bin, which matters when
    a calibration is reused on fresh data.
    """

    n_bins: int
    lo: float
    hi: float
    bin_width: float

    def bin_index(self, value: float) -> int:
        if value <= self.lo:
            return 0
        if value >= self.hi:
            return self.n_bins - 1
        return min(int((value - self.lo) / self.bin_width), self.n_bins - 1)


@dataclass
class RatingInstance:
    """A 1..10 score for one segment. ``underlying_return`` is the exact
    quantity that was binned (a discounted return, or a negated
    optimality gap in regret mode)."""

    segment_ref: int
    rating: int
    underlying_return: float


@dataclass
class PreferenceInstance:
    """An ordered comparison between two items of the same kind.

    ``kind`` is "segment" (refs index a rollout buffer) or "cluster"
    (refs are cluster ids). The per-side ground-truth values are kept so
    noise models can re-derive labels after perturbing them.
    """

    first: int
    second: int
    kind: str
    label: str
    first_value: float
    second_value: float

    @property
    def return_gap(self) -> float:
        return self.first_value - self.second_value


@dataclass
class DemoInstance:
    demo_segment: Segment
    origin_snapshot: EnvState
    expert_return: float
    original_return: float
    origin_ref: int | None = None


@dataclass
class CorrectionInstance:
    original: Segment
    improved: Segment
    original_return: float
    improved_return: float
    origin_ref: int | None = None


@dataclass
class ClusterDescription:
    cluster_id: int
    representative: np.ndarray
    mean_reward: float
    member_count: int


def calibrate_bins(
    buffer: RolloutBuffer, n_bins: int = DEFAULT_N_BINS, gamma: float | None = None
) -> BinCalibration:
    """Fit equal-width bins to the buffer's discounted returns."""
    if n_bins < 1:
        raise ConfigError("n_bins must be at least 1")
    returns = buffer.returns(gamma)
    lo = float(np.min(returns))
    hi = float(np.max(returns))
    if not hi > lo:
        raise CalibrationError(
            "degenerate calibration: all returns equal, bins have zero width"
        )
    return BinCalibration(
        n_bins=n_bins, lo=lo, hi=hi, bin_width=(hi - lo) / n_bins
    )


def gen_evaluative(
    buffer: RolloutBuffer,
    calibration: BinCalibration,
    gamma: float | None = None,
) -> list[RatingInstance]:
    """Rate every segment by the bin its discounted return falls in; bin
    index 0 (lowest returns) maps to rating 1, the top bin to 10."""
    returns = buffer.returns(gamma)
    return [
        RatingInstance(
            segment_ref=i,
            rating=calibration.bin_index(float(r)) + 1,
            underlying_return=float(r),
        )
        for i, r in enumerate(returns)
    ]


def gen_evaluative_regret(
    buffer: RolloutBuffer,
    value_table: ValueTable,
    n_bins: int = DEFAULT_N_BINS,
    gamma: float | None = None,
) -> tuple[list[RatingInstance], BinCalibration]:
    """Alternative rating source: bin negated optimality gaps instead of
    returns, so segments closer to optimal play score higher. Requires an
    exact value table (GridNav)."""
    if value_table.approx:
        raise UnsupportedEnvError(
            "regret-based ratings need exact values; fitted tables are refused"
        )
    scores = np.array(
        [-optimality_gap(seg, value_table, gamma) for seg in buffer.segments]
    )
    lo = float(np.min(scores))
    hi = float(np.max(scores))
    if not hi > lo:
        raise CalibrationError("degenerate calibration: all gaps equal")
    calibration = BinCalibration(n_bins, lo, hi, (hi - lo) / n_bins)
    instances = [
        RatingInstance(
            segment_ref=i,
            rating=calibration.bin_index(float(s)) + 1,
            underlying_return=float(s),
        )
        for i, s in enumerate(scores)
    ]
    return instances, calibration


def gen_comparative(
    buffer: RolloutBuffer,
    gamma: float | None = None,
    exclusion_frac: float = DEFAULT_EXCLUSION_FRAC,
    n_pairs: int | None = None,
    seed: int = 0,
) -> list[PreferenceInstance]:
    """Sample segment pairs and label the higher-return side.

    Pairs whose absolute return gap falls below ``exclusion_frac`` times
    the return standard deviation are discarded and redrawn (near-ties are
    where simulated raters would be unreliable). Exact ties are always
    discarded. Runs out of retries -> GenerationExhaustedError carrying
    the pairs assembled so far.
    """
    if len(buffer) < 2:
        raise ConfigError("need at least 2 segments to form pairs")
    returns = buffer.returns(gamma)
    threshold = exclusion_frac * float(np.std(returns))
    target = len(buffer) if n_pairs is None else n_pairs
    if target < 1:
        raise ConfigError("n_pairs must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out: list[PreferenceInstance] = []
    budget = RETRY_FACTOR * target
    attempts = 0
    n = len(buffer)
    while len(out) < target and attempts < budget:
        attempts += 1
        i, j = rng.choice(n, size=2, replace=False)
        gap = float(returns[i] - returns[j])
        if gap == 0.0 or abs(gap) < threshold:
            continue
        out.append(
            PreferenceInstance(
                first=int(i),
                second=int(j),
                kind="segment",
                label=FIRST_PREFERRED if gap > 0 else SECOND_PREFERRED,
                first_value=float(returns[i]),
                second_value=float(returns[j]),
            )
        )
    if len(out) < target:
        raise GenerationExhaustedError(
            f"assembled {len(out)}/{target} pairs within {budget} attempts",
            partial=out,
        )
    return out


def gen_demonstrative_and_corrective(
    buffer: RolloutBuffer,
    experts: ExpertEnsemble | list[Policy],
    gamma: float | None = None,
    segment_len: int | None = None,
    mode: str = "rollout",
) -> tuple[list[DemoInstance], list[CorrectionInstance]]:
    """Roll each expert from every segment's start snapshot and keep the
    best demo when it strictly beats the original slice.

    The accepted demo populates both a DemoInstance and a
    CorrectionInstance (original, improved) sharing that same segment.
    """
    if mode == "action_advice":
        raise NotImplementedError(
            "action-advice corrections (expert action queries without env "
            "resets) are a documented extension; both built-in tasks "
            "support state restoration, so the rollout mode covers them"
        )
    if mode != "rollout":
        raise ConfigError(f"unknown demonstration mode {mode!r}")
    policies = experts.experts if isinstance(experts, ExpertEnsemble) else list(experts)
    if len(policies) == 0:
        raise ConfigError("need at least one expert")
    env = make_env(buffer.env_spec)
    g = buffer.env_spec.gamma if gamma is None else gamma
    max_len = buffer.max_len if segment_len is None else segment_len
    rng = np.random.default_rng(np.random.SeedSequence(0))
    demos: list[DemoInstance] = []
    corrections: list[CorrectionInstance] = []
    for ref, seg in enumerate(buffer.segments):
        try:
            origin = restore(env, seg.initial_snapshot)
        except DomainError:
            logger.warning(
                "skipping segment %d (checkpoint=%s episode=%s start=%s): "
                "snapshot restore failed",
                ref,
                seg.source_checkpoint,
                seg.episode_index,
                seg.start_index,
            )
            continue
        r_orig = discounted_return(seg, g)
        best_segment = None
        best_return = -math.inf
        for policy in policies:
            state = restore(env, origin)
            transitions: list[Transition] = []
            while len(transitions) < max_len and not state.terminated:
                a = policy_action(policy, env, env.obs(state), rng, greedy=True)
                tr, state = env.step(state, a)
                transitions.append(tr)
            if not transitions:
                continue
            demo = Segment(
                env_id=buffer.env_spec.env_id,
                transitions=transitions,
                initial_snapshot=snapshot(origin),
                final_obs=env.obs(state),
                source_checkpoint=None,
            )
            r_demo = discounted_return(demo, g)
            if r_demo > best_return:
                best_return = r_demo
                best_segment = demo
        if best_segment is not None and best_return > r_orig:
            demos.append(
                DemoInstance(
                    demo_segment=best_segment,
                    origin_snapshot=snapshot(seg.initial_snapshot),
                    expert_return=best_return,
                    original_return=r_orig,
                    origin_ref=ref,
                )
            )
            corrections.append(
                CorrectionInstance(
                    original=seg,
                    improved=best_segment,
                    original_return=r_orig,
                    improved_return=best_return,
                    origin_ref=ref,
                )
            )
    return demos, corrections


def flatten_buffer(buffer: RolloutBuffer) -> tuple[np.ndarray, np.ndarray]:
    """Per-step (feature, reward) pairs across the whole buffer."""
    spec = buffer.env_spec
    feats = []
    rewards = []
    for seg in buffer.segments:
        for tr in seg.transitions:
            feats.append(encode(spec, tr.obs, tr.action))
            rewards.append(tr.reward)
    return np.asarray(feats, dtype=np.float64), np.asarray(rewards, dtype=np.float64)


def gen_descriptive(
    buffer: RolloutBuffer,
    k: int | None = None,
    seed: int = 0,
    batch_size: int = 1000,
) -> list[ClusterDescription]:
    """Cluster the buffer's per-step feature vectors and report each
    cluster's raw-space mean encoding and mean ground-truth reward.

    Clustering runs on per-dimension z-scored features so no coordinate
    dominates on scale alone; representatives are means of the raw
    encodings. ``k`` is capped at the number of distinct feature vectors
    (a discrete task can saturate well below the requested count).
    """
    clusters, _, _, _ = descriptive_details(buffer, k, seed, batch_size)
    return clusters


def descriptive_details(
    buffer: RolloutBuffer,
    k: int | None = None,
    seed: int = 0,
    batch_size: int = 1000,
) -> tuple[list[ClusterDescription], np.ndarray, np.ndarray, np.ndarray]:
    """Like gen_descriptive, but also return (assignments, features,
    rewards) so the partition and the cluster means can be audited
    without rerunning the clustering."""
    feats, rewards = flatten_buffer(buffer)
    n = feats.shape[0]
    want = buffer.n_segments if k is None else k
    if want > n:
        raise ConfigError(f"k={want} exceeds the {n} state-action pairs")
    n_distinct = np.unique(feats, axis=0).shape[0]
    k_eff = min(want, n_distinct)
    if k_eff < want:
        logger.info(
            "capping descriptive k from %d to %d distinct encodings", want, k_eff
        )
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    standardized = (feats - mu) / sd
    assignments, _ = minibatch_kmeans(
        standardized, k_eff, batch_size=batch_size, seed=seed
    )
    out: list[ClusterDescription] = []
    for cid in range(k_eff):
        members = assignments == cid
        count = int(members.sum())
        if count == 0:
            continue
        out.append(
            ClusterDescription(
                cluster_id=cid,
                representative=feats[members].mean(axis=0),
                mean_reward=float(rewards[members].mean()),
                member_count=count,
            )
        )
    return out, assignments, feats, rewards


def gen_descriptive_prefs(
    clusters: list[ClusterDescription],
    n_pairs: int,
    seed: int = 0,
) -> list[PreferenceInstance]:
    """Preferences between randomly drawn cluster pairs, labeled by mean
    reward; exact ties are skipped and redrawn."""
    m = len(clusters)
    if m < 2:
        raise ConfigError("need at least 2 clusters to form pairs")
    distinct_pairs = m * (m - 1) // 2
    if n_pairs > distinct_pairs:
        raise ConfigError(
            f"n_pairs={n_pairs} exceeds the {distinct_pairs} distinct cluster pairs"
        )
    if n_pairs < 1:
        raise ConfigError("n_pairs must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out: list[PreferenceInstance] = []
    budget = RETRY_FACTOR * n_pairs
    attempts = 0
    while len(out) < n_pairs and attempts < budget:
        attempts += 1
        i, j = rng.choice(m, size=2, replace=False)
        a, b = clusters[int(i)], clusters[int(j)]
        if a.mean_reward == b.mean_reward:
            continue
        out.append(
            PreferenceInstance(
                first=a.cluster_id,
                second=b.cluster_id,
                kind="cluster",
                label=(
                    FIRST_PREFERRED
                    if a.mean_reward > b.mean_reward
                    else SECOND_PREFERRED
                ),
                first_value=a.mean_reward,
                second_value=b.mean_reward,
            )
        )
    if len(out) < n_pairs:
        raise GenerationExhaustedError(
            f"assembled {len(out)}/{n_pairs} cluster pairs within {budget} attempts",
            partial=out,
        )
    return out


def optimality_gap(
    segment: Segment, value_table: ValueTable, gamma: float | None = None
) -> float:
    """How much return the segment gave up versus acting optimally from
    its start state: V(s0) - (discounted segment return + gamma^H V(sH))."""
    if value_table.env_id != segment.env_id:
        raise UnsupportedEnvError(
            f"value table for {value_table.env_id!r} cannot score a "
            f"{segment.env_id!r} segment"
        )
    g = value_table.gamma if gamma is None else gamma
    if segment.env_id == "gridnav":
        v0 = value_table.value_of_cell(tuple(segment.initial_snapshot.data))
    else:
        v0 = value_table.value_of_obs(
            np.asarray(segment.initial_snapshot.data, dtype=np.float64)
        )
    v_end = value_table.value_of_obs(segment.final_obs)
    h = len(segment)
    return v0 - (discounted_return(segment, g) + g**h * v_end)
