"""Feedback perturbation engine.

A single scale parameter beta controls how hard every feedback channel is
corrupted. Values are redrawn from a Gaussian centered on the clean value
whose width is beta times the relevant data range, conditioned on staying
inside that range. The conditioning is done by inverse-CDF sampling so a
mean far outside the interval costs one quantile evaluation instead of an
unbounded rejection loop.

Every op derives an independent RNG stream per instance from (seed,
instance index), so splitting a dataset across workers cannot change the
result.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from .envs import GRIDNAV_ID, GRIDNAV_N_ACTIONS, Transition
from .errors import ConfigError, DomainError
from .feedback import (
    FIRST_PREFERRED,
    SECOND_PREFERRED,
    ClusterDescription,
    CorrectionInstance,
    DemoInstance,
    PreferenceInstance,
    RatingInstance,
)

logger = logging.getLogger(__name__)

VARIANT_TRUNCATED = "truncated_gaussian"
VARIANT_PLAIN = "plain_gaussian_equivalent"

# Empirical conversion between the two variants: a conditioned Gaussian
# needs roughly four times the standard deviation of a clipped one to
# displace values by a comparable amount. Applied as sigma / ratio in the
# plain variant; not asserted anywhere.
PLAIN_SIGMA_RATIO = 4.0

RATING_SCALE_TOP = 10

_SQRT2 = math.sqrt(2.0)
_SQRT_2PI = math.sqrt(2.0 * math.pi)
_erfc_ufunc = np.frompyfunc(math.erfc, 1, 1)

# Rational approximation coefficients for the standard normal quantile
# (central branch and tail branch). Raw accuracy is about 1.2e-9; one
# Halley step against the erfc-based CDF takes it near machine precision.
_QA = (
    -3.969683028665376e01,
    2.209460984245205e02,
    -2.759285104469687e02,
    1.383577518672690e02,
    -3.066479806614716e01,
    2.506628277459239e00,
)
_QB = (
    -5.447609879822406e01,
    1.615858368580409e02,
    -1.556989798598866e02,
    6.680131188771972e01,
    -1.328068155288572e01,
)
_QC = (
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e00,
    -2.549732539343734e00,
    4.374664141464968e00,
    2.938163982698783e00,
)
_QD = (
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e00,
    3.754408661907416e00,
)
_P_TAIL = 0.02425


def norm_cdf(z):
    """Standard normal CDF, computed through erfc so deep left tails keep
    full relative precision."""
    arr = np.asarray(z, dtype=float)
    out = 0.5 * np.asarray(_erfc_ufunc(-arr / _SQRT2), dtype=float)
    if arr.ndim == 0:
        return float(out)
    return out


def _quantile_tail(q):
    num = ((((_QC[0] * q + _QC[1]) * q + _QC[2]) * q + _QC[3]) * q + _QC[4]) * q + _QC[5]
    den = (((_QD[0] * q + _QD[1]) * q + _QD[2]) * q + _QD[3]) * q + 1.0
    return num / den


def _half_quantile(q):
    """Quantile for probabilities in (0, 0.5]. Working on this side keeps
    the Halley correction well conditioned: the erfc-based CDF of a
    non-positive x carries full relative precision, so the residual
    against a small q does not cancel away."""
    x = np.empty_like(q)
    tail = q < _P_TAIL
    mid = ~tail
    if np.any(mid):
        s = q[mid] - 0.5
        r = s * s
        num = ((((_QA[0] * r + _QA[1]) * r + _QA[2]) * r + _QA[3]) * r + _QA[4]) * r + _QA[5]
        den = ((((_QB[0] * r + _QB[1]) * r + _QB[2]) * r + _QB[3]) * r + _QB[4]) * r + 1.0
        x[mid] = num * s / den
    if np.any(tail):
        x[tail] = _quantile_tail(np.sqrt(-2.0 * np.log(q[tail])))
    # exp(x^2/2) overflows past |x| ~ 38; the raw tail branch is already
    # within its stated error there
    refine = np.abs(x) < 36.0
    if np.any(refine):
        xs = x[refine]
        err = norm_cdf(xs) - q[refine]
        step = err * _SQRT_2PI * np.exp(xs * xs / 2.0)
        x[refine] = xs - step / (1.0 + xs * step / 2.0)
    return x


def norm_quantile(p):
    """Standard normal quantile for probabilities strictly inside (0, 1)."""
    scalar_in = np.asarray(p).ndim == 0
    arr = np.atleast_1d(np.asarray(p, dtype=float))
    if np.any((arr <= 0.0) | (arr >= 1.0)):
        raise DomainError("quantile is defined for probabilities strictly inside (0, 1)")
    # reflect the upper half; 1 - p is exact there, so no precision is lost
    reflect = arr > 0.5
    x = _half_quantile(np.where(reflect, 1.0 - arr, arr))
    x = np.where(reflect, -x, x)
    if scalar_in:
        return float(x[0])
    return x


def sample_truncated_gaussian(mu, sigma, lo, hi, rng, size=None):
    """Draw from a Gaussian conditioned on [lo, hi] by inverse CDF.

    All four parameters broadcast. sigma=0 degenerates to clamping mu onto
    the interval. When the interval sits so far out in one tail that its
    probability mass rounds to zero, the draw collapses to the bound
    nearest the mean.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo >= hi):
        raise DomainError("truncation interval must satisfy lo < hi")
    if np.any(sigma < 0.0):
        raise DomainError("sigma must be non-negative")
    scalar_out = size is None and all(
        a.ndim == 0 for a in (mu, sigma, lo, hi)
    )
    if size is None:
        mu, sigma, lo, hi = np.broadcast_arrays(mu, sigma, lo, hi)
        shape = mu.shape
    else:
        shape = (size,) if isinstance(size, int) else tuple(size)
        mu, sigma, lo, hi = (
            np.broadcast_to(a, shape) for a in (mu, sigma, lo, hi)
        )
    active = sigma > 0.0
    sigma_safe = np.where(active, sigma, 1.0)
    alpha = (lo - mu) / sigma_safe
    beta = (hi - mu) / sigma_safe
    # mirror intervals right of the mean into the left tail, where the
    # erfc-based CDF keeps relative precision
    flip = (alpha + beta) > 0.0
    a_std = np.where(flip, -beta, alpha)
    b_std = np.where(flip, -alpha, beta)
    ca = np.asarray(norm_cdf(a_std))
    cb = np.asarray(norm_cdf(b_std))
    u = np.asarray(rng.uniform(ca, cb, size=shape))
    u = np.clip(u, np.finfo(float).tiny, np.nextafter(1.0, 0.0))
    z = norm_quantile(u.reshape(-1)).reshape(shape)
    z = np.where(flip, -z, z)
    draw = np.clip(mu + sigma * z, lo, hi)
    clamped = np.clip(mu, lo, hi)
    degenerate = ~(cb > ca)
    out = np.where(active & ~degenerate, draw, clamped)
    if scalar_out:
        return float(out)
    return out


def sample_plain_clipped(mu, sigma, lo, hi, rng, size=None):
    """Unconditioned Gaussian draw at sigma / PLAIN_SIGMA_RATIO, clipped
    onto [lo, hi]. Comparison variant for the conditioned sampler."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    lo_a = np.asarray(lo, dtype=float)
    hi_a = np.asarray(hi, dtype=float)
    if np.any(lo_a >= hi_a):
        raise DomainError("truncation interval must satisfy lo < hi")
    if np.any(sigma < 0.0):
        raise DomainError("sigma must be non-negative")
    scalar_out = size is None and all(
        a.ndim == 0 for a in (mu, sigma, lo_a, hi_a)
    )
    if mu.ndim == 0 and sigma.ndim == 0:
        draw = rng.normal(float(mu), float(sigma) / PLAIN_SIGMA_RATIO, size=size)
    else:
        draw = rng.normal(mu, sigma / PLAIN_SIGMA_RATIO, size=size)
    out = np.clip(draw, lo_a, hi_a)
    if scalar_out:
        return float(out)
    return np.asarray(out)


def _draw(mu, sigma, lo, hi, rng, variant, size=None):
    if variant == VARIANT_TRUNCATED:
        return sample_truncated_gaussian(mu, sigma, lo, hi, rng, size=size)
    if variant == VARIANT_PLAIN:
        return sample_plain_clipped(mu, sigma, lo, hi, rng, size=size)
    raise ConfigError(f"unknown noise variant: {variant!r}")


def _instance_rng(seed, index):
    # keyed stream per instance so perturbation order cannot matter
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    )


def _check_beta(beta):
    if beta < 0.0:
        raise ConfigError("beta must be non-negative")


def _round_half_away(x):
    return math.copysign(math.floor(abs(x) + 0.5), x)


@dataclass(frozen=True)
class NoiseConfig:
    beta: float
    seed: int = 0
    variant: str = VARIANT_TRUNCATED

    def __post_init__(self):
        _check_beta(self.beta)
        if self.variant not in (VARIANT_TRUNCATED, VARIANT_PLAIN):
            raise ConfigError(f"unknown noise variant: {self.variant!r}")


def perturb_evaluative(instances, beta, seed, scale_top=RATING_SCALE_TOP, variant=VARIANT_TRUNCATED):
    """Redraw each rating around its clean value with width beta times the
    scale size, then round back onto the integer scale.

    Rounding is half away from zero, so a draw landing exactly between two
    ratings moves outward.
    """
    _check_beta(beta)
    if beta == 0.0:
        return [dataclasses.replace(inst) for inst in instances]
    sigma = beta * float(scale_top)
    out = []
    for i, inst in enumerate(instances):
        rng = _instance_rng(seed, i)
        v = _draw(float(inst.rating), sigma, 1.0, float(scale_top), rng, variant)
        rating = int(_round_half_away(float(v)))
        rating = min(max(rating, 1), int(scale_top))
        out.append(dataclasses.replace(inst, rating=rating))
    return out


def _side_values(inst):
    if isinstance(inst, PreferenceInstance):
        return inst.first_value, inst.second_value
    if isinstance(inst, CorrectionInstance):
        return inst.original_return, inst.improved_return
    raise ConfigError(
        "return-based noise applies to preference or correction instances"
    )


def _return_bounds(instances):
    vals = [v for inst in instances for v in _side_values(inst)]
    return min(vals), max(vals)


def perturb_return_based(instances, beta, seed, variant=VARIANT_TRUNCATED):
    """Perturb both side values of each comparison and rebuild the label.

    The noise width is beta times the spread of all side values in the
    dataset, and draws stay inside that observed [min, max]. Comparisons
    whose true gap is small relative to the spread flip most often. For
    corrections a flipped outcome swaps the two segments so the improved
    slot keeps the higher value.
    """
    _check_beta(beta)
    if beta == 0.0 or not instances:
        return [dataclasses.replace(inst) for inst in instances]
    lo, hi = _return_bounds(instances)
    if hi - lo == 0.0:
        logger.warning("return range is zero, perturbation left dataset unchanged")
        return [dataclasses.replace(inst) for inst in instances]
    sigma = beta * (hi - lo)
    out = []
    for i, inst in enumerate(instances):
        rng = _instance_rng(seed, i)
        v1, v2 = _side_values(inst)
        d = _draw(np.array([v1, v2]), sigma, lo, hi, rng, variant)
        p1, p2 = float(d[0]), float(d[1])
        if isinstance(inst, PreferenceInstance):
            if p1 > p2:
                label = FIRST_PREFERRED
            elif p2 > p1:
                label = SECOND_PREFERRED
            else:
                label = inst.label
            out.append(
                dataclasses.replace(
                    inst, label=label, first_value=p1, second_value=p2
                )
            )
        else:
            if p2 >= p1:
                out.append(
                    dataclasses.replace(
                        inst, original_return=p1, improved_return=p2
                    )
                )
            else:
                out.append(
                    dataclasses.replace(
                        inst,
                        original=inst.improved,
                        improved=inst.original,
                        original_return=p2,
                        improved_return=p1,
                    )
                )
    return out


def flip_rate(
    instances,
    beta,
    seed=0,
    n_resamples=10_000,
    variant=VARIANT_TRUNCATED,
    bounds=None,
):
    """Monte-Carlo probability that return-based noise at this beta flips
    a comparison's label, averaged over the dataset.

    ``bounds`` overrides the [min, max] the noise is scaled and truncated
    by, for measuring a subset of pairs against their full dataset's range.
    """
    _check_beta(beta)
    if not instances or beta == 0.0:
        return 0.0
    lo, hi = bounds if bounds is not None else _return_bounds(instances)
    if hi - lo == 0.0:
        return 0.0
    sigma = beta * (hi - lo)
    total = 0.0
    for i, inst in enumerate(instances):
        rng = _instance_rng(seed, i)
        v1, v2 = _side_values(inst)
        d = _draw(
            np.array([[v1], [v2]]), sigma, lo, hi, rng, variant,
            size=(2, n_resamples),
        )
        if isinstance(inst, PreferenceInstance):
            base_first = inst.label == FIRST_PREFERRED
        else:
            base_first = False
        now_first = d[0] > d[1]
        total += float(np.mean(now_first != base_first))
    return total / len(instances)


def perturb_demonstrations(demos, beta, seed, variant=VARIANT_TRUNCATED):
    """Jitter every state and action coordinate of each demonstration.

    Per-dimension noise width is beta times that dimension's standard
    deviation across the whole dataset, and draws stay inside the observed
    per-dimension [min, max]. Dynamics are not re-simulated: rewards,
    termination flags, and snapshots ride along unchanged, so a perturbed
    demonstration is a data record rather than a replayable trajectory.
    Discrete actions are rounded back onto the valid action set.
    """
    _check_beta(beta)
    if beta == 0.0 or not demos:
        return [dataclasses.replace(d) for d in demos]
    obs_all = np.vstack(
        [tr.obs for d in demos for tr in d.demo_segment.transitions]
    ).astype(float)
    act_all = np.array(
        [[float(tr.action)] for d in demos for tr in d.demo_segment.transitions]
    )
    obs_sigma = beta * obs_all.std(axis=0)
    act_sigma = beta * act_all.std(axis=0)
    obs_lo, obs_hi = obs_all.min(axis=0), obs_all.max(axis=0)
    act_lo, act_hi = act_all.min(axis=0), act_all.max(axis=0)
    # flat dimensions get a widened interval to keep lo < hi; their sigma
    # is zero so the clamp returns the original value
    obs_hi = np.where(obs_hi > obs_lo, obs_hi, obs_lo + 1.0)
    act_hi = np.where(act_hi > act_lo, act_hi, act_lo + 1.0)
    out = []
    for i, demo in enumerate(demos):
        rng = _instance_rng(seed, i)
        seg = demo.demo_segment
        obs_block = np.stack([tr.obs for tr in seg.transitions]).astype(float)
        act_block = np.array([[float(tr.action)] for tr in seg.transitions])
        new_obs = np.asarray(
            _draw(obs_block, obs_sigma, obs_lo, obs_hi, rng, variant)
        )
        new_act = np.asarray(
            _draw(act_block, act_sigma, act_lo, act_hi, rng, variant)
        )
        discrete = seg.env_id == GRIDNAV_ID
        new_trs = []
        for t, tr in enumerate(seg.transitions):
            if discrete:
                a = int(_round_half_away(float(new_act[t, 0])))
                a = min(max(a, 0), GRIDNAV_N_ACTIONS - 1)
            else:
                a = float(new_act[t, 0])
            new_trs.append(
                Transition(new_obs[t].copy(), a, tr.reward, tr.terminated)
            )
        new_seg = dataclasses.replace(seg, transitions=new_trs)
        out.append(dataclasses.replace(demo, demo_segment=new_seg))
    return out


def perturb_descriptive(clusters, beta, seed, variant=VARIANT_TRUNCATED):
    """Perturb each cluster's mean reward within the observed reward range.
    Representatives and member counts are left alone."""
    _check_beta(beta)
    if beta == 0.0 or not clusters:
        return [dataclasses.replace(c) for c in clusters]
    rewards = [c.mean_reward for c in clusters]
    lo, hi = min(rewards), max(rewards)
    if hi - lo == 0.0:
        logger.warning(
            "cluster rewards are all equal, perturbation left dataset unchanged"
        )
        return [dataclasses.replace(c) for c in clusters]
    sigma = beta * (hi - lo)
    out = []
    for i, cluster in enumerate(clusters):
        rng = _instance_rng(seed, i)
        v = _draw(cluster.mean_reward, sigma, lo, hi, rng, variant)
        out.append(dataclasses.replace(cluster, mean_reward=float(v)))
    return out


def apply_noise(instances, config: NoiseConfig):
    """Route a homogeneous feedback dataset to its perturbation op."""
    if not instances:
        return []
    head = type(instances[0])
    if any(type(inst) is not head for inst in instances):
        raise ConfigError("noise input must hold a single feedback type")
    kwargs = dict(beta=config.beta, seed=config.seed, variant=config.variant)
    if head is RatingInstance:
        return perturb_evaluative(instances, **kwargs)
    if head in (PreferenceInstance, CorrectionInstance):
        return perturb_return_based(instances, **kwargs)
    if head is DemoInstance:
        return perturb_demonstrations(instances, **kwargs)
    if head is ClusterDescription:
        return perturb_descriptive(instances, **kwargs)
    raise ConfigError(f"no perturbation rule for {head.__name__}")
