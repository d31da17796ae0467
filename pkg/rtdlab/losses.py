"""
Training losses: MLM cross-entropy and its focal variant, replaced-token detection,
the two sampling-head losses, and the weighted three-part objective.

Every function returns a scalar `Tensor` so it can feed `backward` directly; plain
floats or arrays are accepted as inputs for evaluation and tests.
"""
import enum
import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, ContractViolation, NumericFault
from .models import Variant
from .tensor import LOG_CLAMP, Tensor

logger = logging.getLogger(__name__)

ArrayLike = Union[Tensor, np.ndarray, float]

IMPORTANCE_FLOOR = 1e-9
DEFAULT_LAMBDA2 = 50.0
DEFAULT_LAMBDA1 = {Variant.NONE: 0.0, Variant.HP_LOSS: 5.0, Variant.HP_DIST: 1.0}


class FocalMode(str, enum.Enum):
    CONSTANT = 'constant'
    PIECEWISE = 'piecewise'


@dataclass(frozen=True)
class FocalSpec:
    mode: FocalMode = FocalMode.CONSTANT
    gamma: float = 1.0
    threshold: float = 0.2
    gamma_hi: float = 3.0
    gamma_lo: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, 'mode', FocalMode(self.mode))
        for name in ('gamma', 'gamma_hi', 'gamma_lo'):
            if getattr(self, name) < 0:
                raise ConfigError(f"focal {name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"focal threshold must be in (0, 1), got {self.threshold}")

    def gammas(self, p: np.ndarray) -> np.ndarray:
        """Per-token exponent; the piecewise mode uses gamma_lo at p == threshold."""
        p = np.asarray(p, dtype=np.float64)
        if self.mode is FocalMode.CONSTANT:
            return np.full(p.shape, float(self.gamma))
        return np.where(p > self.threshold, self.gamma_hi, self.gamma_lo)


def default_lambda1(variant: Variant) -> float:
    return DEFAULT_LAMBDA1[Variant(variant)]


def _mean(values: Tensor) -> Tensor:
    if values.size == 0:
        return Tensor(0.0)
    return values.mean()


def _log_floor(p: Tensor) -> Tensor:
    # probabilities of 1 give exactly zero loss; only the floor is clamped
    return p.clamp(LOG_CLAMP, 1.0).log()


def _log_prob(p: ArrayLike, log_p: Optional[Tensor]) -> Tensor:
    if log_p is not None:
        return log_p
    return _log_floor(Tensor.lift(p))


def mlm_cross_entropy(p_true: ArrayLike = None, log_p: Tensor = None) -> Tensor:
    """Mean of -log p_g(x|c) over masked positions; pass `log_p` to skip the clamp."""
    return _mean(-_log_prob(p_true, log_p))


def focal_loss(p_true: ArrayLike = None, spec: FocalSpec = FocalSpec(), log_p: Tensor = None,
               differentiate_factor: bool = False) -> Tensor:
    """
    Mean of -(1 - p)^gamma * log p over masked positions.

    The modulating factor is a constant weight unless `differentiate_factor` is set.
    """
    log_prob = _log_prob(p_true, log_p)
    p_values = np.exp(log_prob.data) if p_true is None else np.asarray(getattr(p_true, 'data', p_true))
    gammas = spec.gammas(p_values)
    if differentiate_factor:
        p = log_prob.exp() if p_true is None else Tensor.lift(p_true)
        factor = (1.0 - p).clamp(LOG_CLAMP, 1.0) ** gammas
    else:
        factor = Tensor(np.power(np.clip(1.0 - p_values, 0.0, 1.0), gammas))
    return _mean(-(factor * log_prob))


def discriminator_loss(d: ArrayLike, is_original, attention_mask=None) -> Tensor:
    """
    Mean over non-PAD positions of -log D where the token is original, -log(1 - D) where replaced.
    """
    d = Tensor.lift(d)
    labels = np.asarray(is_original, dtype=bool)
    if labels.shape != d.shape:
        raise ContractViolation(f"labels {labels.shape} and discriminator output {d.shape} differ in shape")
    valid = np.ones(d.shape, dtype=bool) if attention_mask is None else np.asarray(attention_mask, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        return Tensor(0.0)
    y = labels.astype(np.float64)
    per_token = -(_log_floor(d) * y + _log_floor(1.0 - d) * (1.0 - y))
    return (per_token * valid.astype(np.float64)).sum() * (1.0 / count)


def sampling_head_loss_hploss(d_hat: ArrayLike, d_target) -> Tensor:
    """Mean squared error between D̂(x', c) and the discriminator's D(x', c), the latter held constant."""
    d_hat = Tensor.lift(d_hat)
    target = np.asarray(getattr(d_target, 'data', d_target), dtype=np.float64)
    diff = d_hat - target
    return _mean(diff * diff)


def sampling_head_loss_hpdist(log_ps: Tensor, p_g, p_s, l_d, incidents: Counter = None) -> Tensor:
    """
    Mean of -(p_g / p_s) * L_D * log p_s at the sampled tokens.

    The importance weight and L_D are constants; only log p_s carries gradient. Weights
    whose p_s falls below 1e-9 are computed with p_s clamped and counted in `incidents`.
    """
    log_ps = Tensor.lift(log_ps)
    p_g = np.asarray(p_g, dtype=np.float64)
    p_s = np.asarray(p_s, dtype=np.float64)
    l_d = np.asarray(getattr(l_d, 'data', l_d), dtype=np.float64)
    tiny = p_s < IMPORTANCE_FLOOR
    if tiny.any():
        n = int(tiny.sum())
        if incidents is not None:
            incidents['importance_weight_clamped'] += n
        logger.warning(f"Clamped {n} importance weights with p_s below {IMPORTANCE_FLOOR}")
    weight = p_g / np.maximum(p_s, IMPORTANCE_FLOOR) * l_d
    return _mean(-(Tensor(weight) * log_ps))


def expected_hpdist_loss(log_ps: Tensor, p_g, l_d) -> Tensor:
    """E_{p_s}[L_S] over the whole vocabulary: -sum p_g * L_D * log p_s."""
    weight = np.asarray(p_g, dtype=np.float64) * np.asarray(l_d, dtype=np.float64)
    return -(Tensor(weight) * log_ps).sum()


@dataclass
class LossBundle:
    l_g: float
    l_s: float
    l_d: float
    lambda1: float
    lambda2: float
    total: float
    objective: Tensor

    def as_dict(self):
        return {'l_g': self.l_g, 'l_s': self.l_s, 'l_d': self.l_d, 'total': self.total}


def combined_objective(l_g: ArrayLike, l_s: Optional[ArrayLike], l_d: ArrayLike, lambda1: float,
                       lambda2: float = DEFAULT_LAMBDA2, variant: Variant = Variant.HP_LOSS) -> LossBundle:
    """L_G + lambda1 * L_S + lambda2 * L_D; the baseline variant drops the L_S term entirely."""
    if lambda1 < 0 or lambda2 < 0:
        raise ContractViolation(f"loss weights must be >= 0, got lambda1={lambda1} lambda2={lambda2}")
    l_g, l_d = Tensor.lift(l_g), Tensor.lift(l_d)
    if Variant(variant) is Variant.NONE or l_s is None:
        lambda1 = 0.0
        l_s = Tensor(0.0)
    l_s = Tensor.lift(l_s)
    objective = l_g + l_d * lambda2
    if lambda1:
        objective = objective + l_s * lambda1
    bundle = LossBundle(
        l_g=l_g.item(), l_s=l_s.item(), l_d=l_d.item(),
        lambda1=float(lambda1), lambda2=float(lambda2), total=objective.item(), objective=objective,
    )
    if not all(math.isfinite(v) for v in (bundle.l_g, bundle.l_s, bundle.l_d, bundle.total)):
        raise NumericFault('combined_objective', f"non-finite loss component {bundle.as_dict()}")
    return bundle
