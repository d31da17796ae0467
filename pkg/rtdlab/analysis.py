"""
Diagnostics over a trained model pair.

- max-probability histograms of p_g and p_s at masked positions
- correlation between the estimated and the actual discriminator loss
- replaced-token detection accuracy under either sampling scheme, and how often each
  scheme samples the original token back
- exact per-position estimator variances against the zero-variance proposal
- a direct fit of proposal logits to the HP_DIST objective

Held-out sequences are put in a canonical order first, so the order they arrive in
never changes a result.
"""
import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from cachetools import LRUCache
from scipy import stats

from .data import Batch, MaskedBatch, mask_batch, pad_sequences
from .errors import ConfigError, DataError, UndefinedCorrelation
from .losses import expected_hpdist_loss
from .models import ModelPair, Variant, discriminator_forward, generator_forward
from .rng import RngState, Stream
from .sampling import (
    ProposalSet, SamplingDecision, closed_form_variances, estimator_variance, kl_divergence,
    optimal_ps_oracle, original_token_rate, proposal_distributions, sample_replacements,
)
from .tensor import LOG_CLAMP, Tensor, backward, no_grad

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = np.linspace(0.0, 1.0, 11)
DETECTION_THRESHOLD = 0.5
MAX_EXACT_VOCAB = 64


class Scheme(str, enum.Enum):
    PG = 'pg'
    PS = 'ps'


class PositionSet(str, enum.Enum):
    MASKED = 'masked'
    ALL = 'all'


# -- shared plumbing -------------------------------------------------------------------------------

def canonical_batches(sequences: Sequence[np.ndarray], batch_size: int, max_len: int) -> List[Batch]:
    if not sequences:
        raise DataError("Held-out set is empty")
    order = sorted(range(len(sequences)), key=lambda i: (len(sequences[i]), tuple(sequences[i].tolist())))
    batches = []
    for start in range(0, len(order), batch_size):
        chosen = np.array(order[start:start + batch_size], dtype=np.int64)
        ids, attention_mask = pad_sequences([sequences[i] for i in chosen], max_len)
        batches.append(Batch(ids=ids, attention_mask=attention_mask, indices=chosen))
    return batches


@dataclass
class ReplacementDraw:
    masked: MaskedBatch
    proposals: ProposalSet
    decisions: List[SamplingDecision]
    disc_probs: np.ndarray
    is_original: np.ndarray


def draw_replacements(pair: ModelPair, batch: Batch, scheme: Scheme, mask_frac: float, ngram_max: int,
                      seed: int, counter: int) -> ReplacementDraw:
    """Mask, propose, sample and score one batch with dropout off and no tape."""
    stream = RngState(seed, Stream.ANALYSIS)
    masked = mask_batch(batch, mask_frac, ngram_max, stream.at(2 * counter))
    with no_grad():
        gen = generator_forward(pair, masked.corrupted, masked.rows, masked.cols, masked.attention_mask)
        proposals = proposal_distributions(gen, masked.masked_targets)
        dist = proposals.p_s if Scheme(scheme) is Scheme.PS else proposals.p_g
        replaced, decisions = sample_replacements(masked, dist, stream.at(2 * counter + 1),
                                                  p_g=proposals.p_g, p_s=proposals.p_s, l_hat=proposals.l_hat)
        disc = discriminator_forward(pair, replaced, masked.attention_mask)
    return ReplacementDraw(masked=masked, proposals=proposals, decisions=decisions,
                           disc_probs=disc.probs.data, is_original=replaced == masked.x)


def _require_sampling_head(pair: ModelPair, what: str) -> None:
    if pair.variant is Variant.NONE:
        raise ConfigError(f"{what} under p_s needs an HP_Loss or HP_Dist checkpoint; this one is the baseline")


# -- histograms ------------------------------------------------------------------------------------

@dataclass
class HistogramReport:
    scheme: Scheme
    counts: np.ndarray
    n: int

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / max(self.n, 1)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'bin': [f"[{lo:.1f},{hi:.1f}{']' if hi >= 1.0 else ')'}" for lo, hi in
                    zip(HISTOGRAM_BINS[:-1], HISTOGRAM_BINS[1:])],
            'fraction': self.fractions,
            'count': self.counts,
            'scheme': Scheme(self.scheme).value,
        })


def histogram_of_maxima(dists: np.ndarray, scheme: Scheme = Scheme.PG) -> HistogramReport:
    """Bin the per-row maximum probability into ten bins over [0, 1]; the top bin is closed."""
    maxima = np.atleast_2d(dists).max(axis=-1)
    counts, _ = np.histogram(maxima, bins=HISTOGRAM_BINS)
    return HistogramReport(scheme=Scheme(scheme), counts=counts.astype(np.int64), n=int(maxima.size))


def maxprob_histogram(pair: ModelPair, batches: Sequence[Batch], which: Scheme, mask_frac: float,
                      ngram_max: int, seed: int = 0) -> HistogramReport:
    which = Scheme(which)
    if which is Scheme.PS:
        _require_sampling_head(pair, 'The max-probability histogram')
    if not batches:
        raise DataError("Held-out set is empty")
    maxima = []
    for i, batch in enumerate(batches):
        draw = draw_replacements(pair, batch, Scheme.PG, mask_frac, ngram_max, seed, i)
        dist = draw.proposals.p_s if which is Scheme.PS else draw.proposals.p_g
        maxima.append(dist.max(axis=-1))
    maxima = np.concatenate(maxima)
    counts, _ = np.histogram(maxima, bins=HISTOGRAM_BINS)
    return HistogramReport(scheme=which, counts=counts.astype(np.int64), n=int(maxima.size))


# -- correlation -----------------------------------------------------------------------------------

@dataclass
class CorrelationReport:
    method: str
    coefficients: Dict[str, float]
    counts: Dict[str, int]

    def frame(self) -> pd.DataFrame:
        groups = ['original', 'replaced', 'all']
        return pd.DataFrame({
            'group': groups,
            'coefficient': [self.coefficients[g] for g in groups],
            'count': [self.counts[g] for g in groups],
            'method': self.method,
        })


def _coefficient(x: np.ndarray, y: np.ndarray, method: str, group: str) -> float:
    if x.size < 2:
        raise UndefinedCorrelation(f"group '{group}' has {x.size} points; at least 2 are needed")
    if np.std(x) == 0 or np.std(y) == 0:
        raise UndefinedCorrelation(f"group '{group}' has zero variance in one of the series")
    if method == 'spearman':
        result = stats.spearmanr(x, y)
    else:
        result = stats.pearsonr(x, y)
    return float(np.clip(result[0], -1.0, 1.0))


def correlation_from_pairs(estimated, actual, is_original, method: str = 'pearson') -> CorrelationReport:
    estimated = np.asarray(estimated, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    is_original = np.asarray(is_original, dtype=bool)
    if method not in ('pearson', 'spearman'):
        raise ConfigError(f"Unknown correlation method '{method}'")
    groups = {'original': is_original, 'replaced': ~is_original, 'all': np.ones_like(is_original)}
    coefficients, counts = {}, {}
    for name, selector in groups.items():
        counts[name] = int(selector.sum())
        coefficients[name] = _coefficient(estimated[selector], actual[selector], method, name)
    return CorrelationReport(method=method, coefficients=coefficients, counts=counts)


def actual_disc_loss(disc_probs: np.ndarray, is_original: np.ndarray) -> np.ndarray:
    d = np.clip(disc_probs, LOG_CLAMP, 1.0 - LOG_CLAMP)
    return np.where(is_original, -np.log(d), -np.log1p(-d))


def estimation_correlation(pair: ModelPair, batches: Sequence[Batch], mask_frac: float, ngram_max: int,
                           seed: int = 0, method: str = 'pearson', max_positions: int = None) -> CorrelationReport:
    """Correlate L̂_D(x', c) with the discriminator's actual loss at each sampled position."""
    if pair.variant is not Variant.HP_LOSS:
        raise ConfigError(f"Loss-estimation correlation requires an HP_Loss checkpoint, got {pair.variant.value}")
    if not batches:
        raise DataError("Held-out set is empty")
    estimated, actual, originals = [], [], []
    for i, batch in enumerate(batches):
        draw = draw_replacements(pair, batch, Scheme.PS, mask_frac, ngram_max, seed, i)
        rows, cols = draw.masked.masked_index
        flags = draw.is_original[rows, cols]
        estimated.append(np.array([d.l_hat for d in draw.decisions]))
        actual.append(actual_disc_loss(draw.disc_probs[rows, cols], flags))
        originals.append(flags)
        if max_positions and sum(a.size for a in actual) >= max_positions:
            break
    estimated, actual, originals = (np.concatenate(a) for a in (estimated, actual, originals))
    if max_positions:
        estimated, actual, originals = estimated[:max_positions], actual[:max_positions], originals[:max_positions]
    return correlation_from_pairs(estimated, actual, originals, method)


# -- detection accuracy ----------------------------------------------------------------------------

def detection_accuracy_from(disc_probs: np.ndarray, is_original: np.ndarray, selected: np.ndarray) -> float:
    """Accuracy of D >= 0.5 meaning "original" over the selected positions."""
    selected = np.asarray(selected, dtype=bool)
    if not selected.any():
        return float('nan')
    predicted = np.asarray(disc_probs) >= DETECTION_THRESHOLD
    return float((predicted == np.asarray(is_original, dtype=bool))[selected].mean())


def detection_accuracy(pair: ModelPair, batches: Sequence[Batch], scheme: Scheme, positions: PositionSet,
                       mask_frac: float, ngram_max: int, seed: int = 0) -> float:
    scheme, positions = Scheme(scheme), PositionSet(positions)
    if scheme is Scheme.PS:
        _require_sampling_head(pair, 'Detection accuracy')
    if not batches:
        raise DataError("Held-out set is empty")
    correct, total = 0, 0
    for i, batch in enumerate(batches):
        draw = draw_replacements(pair, batch, scheme, mask_frac, ngram_max, seed, i)
        selected = draw.masked.is_masked if positions is PositionSet.MASKED else draw.masked.attention_mask
        predicted = draw.disc_probs >= DETECTION_THRESHOLD
        correct += int(((predicted == draw.is_original) & selected).sum())
        total += int(selected.sum())
    return correct / total if total else float('nan')


def sampled_original_rate(pair: ModelPair, batches: Sequence[Batch], scheme: Scheme, mask_frac: float,
                          ngram_max: int, seed: int = 0) -> float:
    """Share of masked positions where the draw put the original token back."""
    scheme = Scheme(scheme)
    if scheme is Scheme.PS:
        _require_sampling_head(pair, 'Original-token rate')
    if not batches:
        raise DataError("Held-out set is empty")
    decisions = []
    for i, batch in enumerate(batches):
        decisions.extend(draw_replacements(pair, batch, scheme, mask_frac, ngram_max, seed, i).decisions)
    return original_token_rate(decisions)


def accuracy_table(pair: ModelPair, batches: Sequence[Batch], mask_frac: float, ngram_max: int,
                   seed: int = 0, step: int = None) -> pd.DataFrame:
    """Detection accuracy for every available scheme and both position sets."""
    schemes = [Scheme.PG] if pair.variant is Variant.NONE else [Scheme.PG, Scheme.PS]
    rows = []
    for scheme in schemes:
        for positions in PositionSet:
            row = {
                'scheme': scheme.value,
                'position_set': positions.value,
                'accuracy': detection_accuracy(pair, batches, scheme, positions, mask_frac, ngram_max, seed),
            }
            if step is not None:
                row = {'step': step, **row}
            rows.append(row)
    return pd.DataFrame(rows)


# -- exact discriminator loss and variance ---------------------------------------------------------

class ExactLossEvaluator:
    """
    L_D(v, c) for every candidate v at one position, all other positions held at their
    sampled values; one batched discriminator forward per (sequence, position).
    """

    def __init__(self, pair: ModelPair, max_vocab: int = MAX_EXACT_VOCAB, cache_size: int = 256):
        if pair.vocab_size > max_vocab:
            raise ConfigError(
                f"Exhaustive evaluation needs a vocabulary of at most {max_vocab} tokens, got {pair.vocab_size}"
            )
        self.pair = pair
        self.cache = LRUCache(maxsize=cache_size)

    def __call__(self, sequence: np.ndarray, position: int, original_id: int) -> np.ndarray:
        key = (sequence.tobytes(), int(position), int(original_id))
        if key in self.cache:
            return self.cache[key]
        vocab_size = self.pair.vocab_size
        candidates = np.tile(sequence, (vocab_size, 1))
        candidates[:, position] = np.arange(vocab_size)
        with no_grad():
            probs = discriminator_forward(self.pair, candidates).probs.data[:, position]
        is_original = np.arange(vocab_size) == original_id
        losses = actual_disc_loss(probs, is_original)
        self.cache[key] = losses
        return losses


def variance_report(pair: ModelPair, batches: Sequence[Batch], n_mc: int, mask_frac: float, ngram_max: int,
                    seed: int = 0, max_positions: int = 200) -> pd.DataFrame:
    """Per masked position: estimator variances under p_g, the model's p_s and the oracle proposal."""
    evaluator = ExactLossEvaluator(pair)
    mc_stream = RngState(seed, Stream.MONTE_CARLO)
    rows = []
    for i, batch in enumerate(batches):
        draw = draw_replacements(pair, batch, Scheme.PS, mask_frac, ngram_max, seed, i)
        replaced = draw.masked.replaced
        for j, (b, t) in enumerate(zip(*draw.masked.masked_index)):
            n = int(draw.masked.attention_mask[b].sum())
            original = int(draw.masked.x[b, t])
            l_d = evaluator(replaced[b, :n], int(t), original)
            p_g = draw.proposals.p_g[j]
            p_s = draw.proposals.p_s[j]
            oracle = optimal_ps_oracle(p_g, l_d)
            mc = estimator_variance(p_g, p_s, l_d, n_mc, mc_stream.at(len(rows)))
            _, _, var_oracle = closed_form_variances(p_g, oracle, l_d)
            rows.append({
                'row': int(batch.indices[b]), 'position': int(t), 'z': mc.z,
                'var_pg': mc.var_pg, 'var_ps_model': mc.var_ps_weighted, 'var_ps_oracle': var_oracle,
                'mc_var_pg': mc.mc_var_pg, 'mc_var_ps_model': mc.mc_var_ps_weighted,
            })
            if len(rows) >= max_positions:
                return pd.DataFrame(rows)
    if not rows:
        raise DataError("Held-out set produced no masked positions")
    return pd.DataFrame(rows)


@dataclass
class SyntheticVarianceReport:
    z: float
    var_pg: float
    var_oracle: float
    oracle: np.ndarray
    mc_var_pg: float
    mc_var_oracle: float

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([{
            'z': self.z, 'var_pg': self.var_pg, 'var_opt': self.var_oracle,
            'mc_var_pg': self.mc_var_pg, 'mc_var_opt': self.mc_var_oracle,
        }])


def synthetic_variance_report(p_g, l_d, n_mc: int, seed: int = 0, max_vocab: int = MAX_EXACT_VOCAB
                              ) -> SyntheticVarianceReport:
    p_g = np.asarray(p_g, dtype=np.float64)
    l_d = np.asarray(l_d, dtype=np.float64)
    if p_g.size > max_vocab:
        raise ConfigError(f"Synthetic instances are limited to {max_vocab} tokens, got {p_g.size}")
    if p_g.shape != l_d.shape:
        raise ConfigError(f"p_g has {p_g.size} entries but the loss vector has {l_d.size}")
    oracle = optimal_ps_oracle(p_g, l_d)
    estimate = estimator_variance(p_g, oracle, l_d, n_mc, RngState(seed, Stream.MONTE_CARLO).at(0))
    return SyntheticVarianceReport(z=estimate.z, var_pg=estimate.var_pg, var_oracle=estimate.var_ps_weighted,
                                   oracle=oracle, mc_var_pg=estimate.mc_var_pg,
                                   mc_var_oracle=estimate.mc_var_ps_weighted)


# -- direct fit of the HP_DIST objective -----------------------------------------------------------

@dataclass
class LogitFit:
    learned: np.ndarray
    oracle: np.ndarray
    kl: float
    steps: int
    losses: List[float] = field(default_factory=list)


def fit_sampling_logits(p_g, l_d, steps: int = 5000, lr: float = 1.0, init_logits=None,
                        tolerance: float = 0.0) -> LogitFit:
    """
    Minimize -sum p_g * L_D * log softmax(logits) by gradient descent on free logits.

    The step size is `lr / Z`, Z = sum p_g * L_D, which keeps the iteration stable for
    any loss scale. The minimizer is the zero-variance proposal.
    """
    p_g = np.asarray(p_g, dtype=np.float64)
    l_d = np.asarray(l_d, dtype=np.float64)
    z = float((p_g * l_d).sum())
    if z <= 0:
        raise ConfigError("p_g * L_D has no mass; the objective is flat")
    logits = Tensor(np.zeros_like(p_g) if init_logits is None else init_logits, requires_grad=True, name='logits')
    losses = []
    step = 0
    for step in range(1, steps + 1):
        loss = expected_hpdist_loss(logits.log_softmax(axis=-1), p_g, l_d)
        backward(loss, [logits])
        losses.append(loss.item())
        logits.data = logits.data - (lr / z) * logits.grad
        if tolerance and np.abs(logits.grad).max() < tolerance:
            break
    learned = np.exp(logits.data - logits.data.max())
    learned = learned / learned.sum()
    oracle = optimal_ps_oracle(p_g, l_d)
    return LogitFit(learned=learned, oracle=oracle, kl=kl_divergence(oracle, learned), steps=step, losses=losses)

