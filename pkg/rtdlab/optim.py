"""Adam with bias correction, and the warmup/linear-decay schedule."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def moments_for(self, name: str, like: np.ndarray):
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)
        return self.m[name], self.v[name]


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float) -> AdamState:
    """
    Apply one bias-corrected Adam update to every named parameter.

    Parameter arrays are replaced, not written in place.
    """
    if lr < 0:
        raise ContractViolation(f"learning rate must be >= 0, got {lr}")
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            raise ContractViolation(f"missing gradient for parameter '{name}'")
        if grad.shape != param.data.shape:
            raise ContractViolation(
                f"gradient shape {grad.shape} does not match parameter '{name}' {param.data.shape}"
            )
        m, _ = state.moments_for(name, param.data)
        if m.shape != param.data.shape:
            raise ContractViolation(f"moment shape {m.shape} does not match parameter '{name}'")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        grad = grads[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data = param.data - update
    return state


def lr_at(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear ramp 0 -> peak over `warmup` steps, then linear decay to 0 at `total`."""
    if not 0 < warmup < total:
        raise ContractViolation(f"need 0 < warmup < total, got warmup={warmup} total={total}")
    if step < 0 or step > total:
        raise ContractViolation(f"step {step} outside [0, {total}]")
    if step <= warmup:
        return peak * step / warmup
    return peak * (total - step) / (total - warmup)
