"""
Replacement distributions and the categorical draw that builds x^R.

p_g is the generator's MLM softmax. HP_LOSS reweights it by the estimated
discriminator loss, HP_DIST uses the sampling head's own softmax, and the oracle
reweights by the exact discriminator loss. All functions here operate on plain
numpy arrays; nothing crosses the sampling boundary with a gradient attached.
"""
import logging
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from .data import NON_SAMPLABLE_IDS
from .errors import ContractViolation, NumericFault, SupportViolation
from .models import GeneratorOutput, Variant
from .tensor import LOG_CLAMP

logger = logging.getLogger(__name__)

NORMALIZER_FLOOR = 1e-12
SUM_TOLERANCE = 1e-6
EXCLUDED_LOGIT = -1e9


def _finite(values: np.ndarray, op: str) -> np.ndarray:
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        raise NumericFault(op, 'non-finite logit')
    return values


def _validate_distribution(dist: np.ndarray, what: str = 'distribution') -> np.ndarray:
    dist = np.atleast_2d(np.asarray(dist, dtype=np.float64))
    if not np.all(np.isfinite(dist)) or (dist < 0).any():
        raise ContractViolation(f"{what} has negative or non-finite entries")
    sums = dist.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > SUM_TOLERANCE):
        raise ContractViolation(f"{what} rows must sum to 1, got sums in [{sums.min():.6g}, {sums.max():.6g}]")
    return dist


def _softmax64(logits: np.ndarray) -> np.ndarray:
    # proposals are always built in float64, whatever the training dtype
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mlm_distribution(mlm_logits) -> np.ndarray:
    logits = getattr(mlm_logits, 'data', mlm_logits)
    return _softmax64(_finite(logits, 'mlm_distribution'))


def hp_dist_distribution(sampling_logits) -> np.ndarray:
    logits = getattr(sampling_logits, 'data', sampling_logits)
    return _softmax64(_finite(logits, 'hp_dist_distribution'))


def estimated_disc_loss(d_hat: np.ndarray, original_ids) -> np.ndarray:
    """
    -log D̂ at the original token, -log(1 - D̂) at every other candidate.

    `d_hat` is (V,) or (M, V); `original_ids` is a scalar or (M,).
    """
    d_hat = np.clip(np.asarray(d_hat, dtype=np.float64), LOG_CLAMP, 1.0 - LOG_CLAMP)
    squeeze = d_hat.ndim == 1
    d_hat = np.atleast_2d(d_hat)
    original_ids = np.atleast_1d(np.asarray(original_ids, dtype=np.int64))
    if original_ids.shape[0] != d_hat.shape[0]:
        raise ContractViolation("one original id is needed per row of D̂")
    losses = -np.log1p(-d_hat)
    rows = np.arange(d_hat.shape[0])
    losses[rows, original_ids] = -np.log(d_hat[rows, original_ids])
    return losses[0] if squeeze else losses


def _reweight(p_g: np.ndarray, weights: np.ndarray, what: str) -> np.ndarray:
    squeeze = np.ndim(p_g) == 1
    p_g = np.atleast_2d(np.asarray(p_g, dtype=np.float64))
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if p_g.shape != weights.shape:
        raise ContractViolation(f"{what}: p_g {p_g.shape} and loss {weights.shape} differ in shape")
    if (weights < 0).any():
        raise ContractViolation(f"{what}: losses must be non-negative")
    unnormalized = p_g * weights
    z = unnormalized.sum(axis=-1, keepdims=True)
    degenerate = z[:, 0] < NORMALIZER_FLOOR
    out = np.where(degenerate[:, None], p_g, unnormalized / np.where(degenerate[:, None], 1.0, z))
    if degenerate.any():
        logger.warning(f"{what}: {int(degenerate.sum())} rows with vanishing normalizer fell back to p_g")
    return out[0] if squeeze else out


def hp_loss_distribution(p_g: np.ndarray, l_hat: np.ndarray) -> np.ndarray:
    """p_s proportional to p_g * L̂_D, or p_g itself when the normalizer vanishes."""
    return _reweight(p_g, l_hat, 'hp_loss_distribution')


def optimal_ps_oracle(p_g: np.ndarray, true_l_d: np.ndarray) -> np.ndarray:
    """Zero-variance proposal p_g * L_D / Z, by enumeration over the whole vocabulary."""
    return _reweight(p_g, true_l_d, 'optimal_ps_oracle')


def samplable_logit_bias(vocab_size: int, dtype=np.float64) -> np.ndarray:
    """Additive logit bias that removes the special tokens from a softmax proposal."""
    bias = np.zeros(vocab_size, dtype=dtype)
    bias[[i for i in NON_SAMPLABLE_IDS if i < vocab_size]] = EXCLUDED_LOGIT
    return bias


def restrict_to_samplable(dist: np.ndarray) -> np.ndarray:
    """Zero PAD/MASK/CLS/SEP and renormalize; rows left with no mass become uniform over the rest."""
    dist = np.array(dist, dtype=np.float64, copy=True)
    excluded = [i for i in NON_SAMPLABLE_IDS if i < dist.shape[-1]]
    dist[..., excluded] = 0.0
    z = dist.sum(axis=-1, keepdims=True)
    empty = z <= 0
    if np.any(empty):
        fallback = np.ones(dist.shape[-1])
        fallback[excluded] = 0.0
        dist = np.where(empty, fallback, dist)
        z = dist.sum(axis=-1, keepdims=True)
    return dist / z


@dataclass
class ProposalSet:
    """Per masked position: the MLM distribution, the proposal actually sampled from, and L̂_D (HP_LOSS)."""
    p_g: np.ndarray
    p_s: np.ndarray
    l_hat: Optional[np.ndarray] = None


def proposal_distributions(gen_out: GeneratorOutput, original_ids: np.ndarray, use_sampling_head: bool = True
                           ) -> ProposalSet:
    p_g = restrict_to_samplable(mlm_distribution(gen_out.mlm_logits))
    if gen_out.variant is Variant.NONE:
        return ProposalSet(p_g=p_g, p_s=p_g)
    if gen_out.variant is Variant.HP_LOSS:
        l_hat = estimated_disc_loss(gen_out.d_hat, original_ids)
        p_s = restrict_to_samplable(hp_loss_distribution(p_g, l_hat)) if use_sampling_head else p_g
        return ProposalSet(p_g=p_g, p_s=p_s, l_hat=l_hat)
    logits = gen_out.sampling_logits.data
    p_s = hp_dist_distribution(logits + samplable_logit_bias(logits.shape[-1], logits.dtype))
    return ProposalSet(p_g=p_g, p_s=p_s if use_sampling_head else p_g)


# -- drawing ---------------------------------------------------------------------------------------

def categorical_inverse_cdf(dist: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row: the first index whose cumulative mass exceeds u * total."""
    dist = np.atleast_2d(dist)
    cdf = np.cumsum(dist, axis=-1)
    u = rng.random(dist.shape[0]) * cdf[:, -1]
    return (cdf <= u[:, None]).sum(axis=-1).astype(np.int64)


@dataclass
class SamplingDecision:
    row: int
    position: int
    original: int
    sampled: int
    p_g: float
    p_s: float
    l_hat: Optional[float]
    is_original: bool


def sample_replacements(example, dists: np.ndarray, rng: np.random.Generator, p_g: np.ndarray = None,
                        p_s: np.ndarray = None, l_hat: np.ndarray = None):
    """
    Draw one replacement per masked position of `example` (a MaskedExample or MaskedBatch).

    Returns (x^R, decisions); also stores x^R on the example. Positions off the mask keep
    their original ids.
    """
    index = example.masked_index
    n_masked = index[0].shape[0]
    dists = _validate_distribution(dists, 'sampling distribution')
    if dists.shape[0] != n_masked:
        raise ContractViolation(f"{dists.shape[0]} distributions for {n_masked} masked positions")
    sampled = categorical_inverse_cdf(dists, rng)
    replaced = np.array(example.corrupted, copy=True)
    replaced[index] = sampled
    example.replaced = replaced

    p_g = dists if p_g is None else np.atleast_2d(p_g)
    p_s = dists if p_s is None else np.atleast_2d(p_s)
    originals = np.asarray(example.x)[index]
    picks = np.arange(n_masked)
    pg_at = p_g[picks, sampled]
    ps_at = p_s[picks, sampled]
    lhat_at = None if l_hat is None else np.atleast_2d(l_hat)[picks, sampled]
    rows = index[0] if len(index) == 2 else np.zeros(n_masked, dtype=np.int64)
    cols = index[-1]
    decisions = [
        SamplingDecision(
            row=int(rows[i]), position=int(cols[i]), original=int(originals[i]), sampled=int(sampled[i]),
            p_g=float(pg_at[i]), p_s=float(ps_at[i]),
            l_hat=None if lhat_at is None else float(lhat_at[i]),
            is_original=bool(originals[i] == sampled[i]),
        )
        for i in range(n_masked)
    ]
    return replaced, decisions


def decisions_frame(decisions: Sequence[SamplingDecision], step: int = None) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(d) for d in decisions],
                         columns=['row', 'position', 'original', 'sampled', 'p_g', 'p_s', 'l_hat', 'is_original'])
    if step is not None:
        frame.insert(0, 'step', step)
    return frame


# -- variance of the loss estimator ---------------------------------------------------------------

@dataclass
class VarianceEstimate:
    z: float
    var_pg: float
    var_ps_weighted: float
    mc_mean_pg: float
    mc_var_pg: float
    mc_mean_ps_weighted: float
    mc_var_ps_weighted: float
    n_samples: int


def closed_form_variances(p_g: np.ndarray, p_s: np.ndarray, l_d: np.ndarray):
    """(Z, Var_pg[L_D], Var_ps[(p_g / p_s) L_D]) by enumeration."""
    p_g, p_s, l_d = (np.asarray(a, dtype=np.float64) for a in (p_g, p_s, l_d))
    mass = p_g * l_d
    unsupported = (p_s <= 0) & (mass > 0)
    if unsupported.any():
        raise SupportViolation(
            f"proposal assigns zero probability to {int(unsupported.sum())} tokens with positive p_g * L_D"
        )
    z = float(mass.sum())
    var_pg = float((p_g * l_d * l_d).sum() - z * z)
    support = p_s > 0
    var_ps = float((mass[support] ** 2 / p_s[support]).sum() - z * z)
    return z, var_pg, var_ps


def _draw_many(dist: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(dist)
    return np.searchsorted(cdf, rng.random(n) * cdf[-1], side='right')


def estimator_variance(p_g: np.ndarray, p_s: np.ndarray, l_d: np.ndarray, n_samples: int,
                       rng: np.random.Generator) -> VarianceEstimate:
    """Closed-form and Monte Carlo variance of the plain and importance-weighted loss estimators."""
    p_g = _validate_distribution(p_g, 'p_g')[0]
    p_s = _validate_distribution(p_s, 'p_s')[0]
    l_d = np.asarray(l_d, dtype=np.float64)
    if n_samples < 2:
        raise ContractViolation(f"n_samples must be >= 2, got {n_samples}")
    z, var_pg, var_ps = closed_form_variances(p_g, p_s, l_d)

    plain = l_d[_draw_many(p_g, n_samples, rng)]
    drawn = _draw_many(p_s, n_samples, rng)
    weighted = p_g[drawn] / p_s[drawn] * l_d[drawn]
    return VarianceEstimate(
        z=z, var_pg=var_pg, var_ps_weighted=var_ps,
        mc_mean_pg=float(plain.mean()), mc_var_pg=float(plain.var(ddof=1)),
        mc_mean_ps_weighted=float(weighted.mean()), mc_var_ps_weighted=float(weighted.var(ddof=1)),
        n_samples=n_samples,
    )


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    support = p > 0
    return float((p[support] * (np.log(p[support]) - np.log(q[support]))).sum())


def original_token_rate(decisions: List[SamplingDecision]) -> float:
    if not decisions:
        return 0.0
    return sum(d.is_original for d in decisions) / len(decisions)
