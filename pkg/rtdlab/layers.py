"""
Parameter containers and transformer building blocks on top of `tensor.Tensor`.
"""
import math
from typing import Dict, Iterator

import numpy as np
from cachetools import LRUCache, cached

from .tensor import Tensor, dropout, layer_norm


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) redrawn until every value lies within +-bound*std."""
    values = rng.standard_normal(shape)
    outside = np.abs(values) > bound
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > bound
    return values * std


class Module:
    """Owns named parameters and child modules; nothing is discovered implicitly."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, 'Module'] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        tensor = Tensor(value, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def add_child(self, name: str, module: 'Module') -> 'Module':
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = '') -> Dict[str, Tensor]:
        named = {f"{prefix}{name}": p for name, p in self._params.items()}
        for child_name, child in self._children.items():
            named.update(child.named_parameters(f"{prefix}{child_name}."))
        return named

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.named_parameters().values())

    def zero_(self) -> None:
        for p in self.parameters():
            p.data = np.zeros_like(p.data)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = self.add_param('weight', truncated_normal(rng, (n_in, n_out)))
        self.bias = self.add_param('bias', np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-12):
        super().__init__()
        self.eps = eps
        self.gamma = self.add_param('gamma', np.ones(dim))
        self.beta = self.add_param('beta', np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class HeadTransform(Module):
    """Dense -> GELU -> LayerNorm, the shape shared by the MLM and sampling heads."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.dense = self.add_child('dense', Dense(n_in, n_out, rng))
        self.norm = self.add_child('norm', LayerNorm(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(self.dense(x).gelu())


def relative_position_bucket(relative_position: np.ndarray, bidirectional: bool = True,
                             num_buckets: int = 32, max_distance: int = 128) -> np.ndarray:
    """
    Map signed distances (memory - query) to bucket ids in [0, num_buckets).

    Half the buckets hold exact small distances; the rest grow logarithmically up to
    max_distance, beyond which everything shares the last bucket. Bidirectional mode
    splits the range between negative and positive offsets.
    """
    relative_position = np.asarray(relative_position, dtype=np.int64)
    buckets = np.zeros_like(relative_position)
    if bidirectional:
        num_buckets //= 2
        buckets += (relative_position > 0).astype(np.int64) * num_buckets
        distance = np.abs(relative_position)
    else:
        distance = -np.minimum(relative_position, 0)
    max_exact = num_buckets // 2
    is_small = distance < max_exact
    with np.errstate(divide='ignore'):
        large = max_exact + (
            np.log(np.maximum(distance, 1) / max_exact)
            / math.log(max_distance / max_exact)
            * (num_buckets - max_exact)
        ).astype(np.int64)
    large = np.minimum(large, num_buckets - 1)
    return buckets + np.where(is_small, distance, large)


@cached(LRUCache(maxsize=64))
def _bucket_grid(length: int, num_buckets: int, max_distance: int) -> np.ndarray:
    context = np.arange(length)[:, None]
    memory = np.arange(length)[None, :]
    grid = relative_position_bucket(memory - context, True, num_buckets, max_distance)
    grid.setflags(write=False)
    return grid


class RelativePositionBias(Module):
    """Learned per-head scalar bias per distance bucket, shared by all layers of an encoder."""

    def __init__(self, num_buckets: int, heads: int, max_distance: int, rng: np.random.Generator):
        super().__init__()
        self.num_buckets = num_buckets
        self.max_distance = max_distance
        self.table = self.add_param('table', truncated_normal(rng, (num_buckets, heads)))

    def __call__(self, length: int) -> Tensor:
        grid = _bucket_grid(length, self.num_buckets, self.max_distance)
        # (L, L, heads) -> (heads, L, L)
        return self.table[grid].transpose(2, 0, 1)


class SelfAttention(Module):
    def __init__(self, hidden: int, heads: int, head_dim: int, dropout_rate: float, rng: np.random.Generator):
        super().__init__()
        self.heads = heads
        self.head_dim = head_dim
        self.dropout_rate = dropout_rate
        inner = heads * head_dim
        self.query = self.add_child('query', Dense(hidden, inner, rng))
        self.key = self.add_child('key', Dense(hidden, inner, rng))
        self.value = self.add_child('value', Dense(hidden, inner, rng))
        self.output = self.add_child('output', Dense(inner, hidden, rng))

    def _split(self, x: Tensor) -> Tensor:
        b, length, _ = x.shape
        return x.reshape(b, length, self.heads, self.head_dim)

    def __call__(self, x: Tensor, key_bias: np.ndarray, position_bias: Tensor,
                 rng: np.random.Generator = None) -> Tensor:
        b, length, _ = x.shape
        q = self._split(self.query(x)).transpose(0, 2, 1, 3)
        k = self._split(self.key(x)).transpose(0, 2, 3, 1)
        v = self._split(self.value(x)).transpose(0, 2, 1, 3)
        scores = (q @ k) * (1.0 / math.sqrt(self.head_dim)) + position_bias + key_bias
        probs = dropout(scores.softmax(axis=-1), self.dropout_rate, rng)
        context = (probs @ v).transpose(0, 2, 1, 3).reshape(b, length, self.heads * self.head_dim)
        return self.output(context)


class TransformerLayer(Module):
    """Post-norm encoder block: attention and feed-forward, each with residual + LayerNorm."""

    def __init__(self, hidden: int, ffn_hidden: int, heads: int, head_dim: int, dropout_rate: float,
                 rng: np.random.Generator):
        super().__init__()
        self.dropout_rate = dropout_rate
        self.attention = self.add_child('attention', SelfAttention(hidden, heads, head_dim, dropout_rate, rng))
        self.attention_norm = self.add_child('attention_norm', LayerNorm(hidden))
        self.ffn_in = self.add_child('ffn_in', Dense(hidden, ffn_hidden, rng))
        self.ffn_out = self.add_child('ffn_out', Dense(ffn_hidden, hidden, rng))
        self.ffn_norm = self.add_child('ffn_norm', LayerNorm(hidden))

    def __call__(self, x: Tensor, key_bias: np.ndarray, position_bias: Tensor,
                 rng: np.random.Generator = None) -> Tensor:
        attended = dropout(self.attention(x, key_bias, position_bias, rng), self.dropout_rate, rng)
        x = self.attention_norm(x + attended)
        transformed = dropout(self.ffn_out(self.ffn_in(x).gelu()), self.dropout_rate, rng)
        return self.ffn_norm(x + transformed)


def key_padding_bias(attention_mask: np.ndarray, dtype=np.float64) -> np.ndarray:
    """(B, L) validity mask -> additive (B, 1, 1, L) bias that removes PAD keys."""
    mask = np.asarray(attention_mask, dtype=bool)
    return np.where(mask, 0.0, -1e9).astype(dtype)[:, None, None, :]
