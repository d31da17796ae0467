"""
Generator and discriminator encoders with one shared token-embedding table.

The generator carries the MLM head and, depending on the variant, a sampling head:
HP_LOSS predicts the discriminator's "original" probability for every candidate
token through a sigmoid, HP_DIST produces a softmax proposal over the vocabulary.
"""
import enum
import logging
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from typing import Dict, Optional

import numpy as np

from .errors import ConfigError, ContractViolation
from .layers import Dense, HeadTransform, LayerNorm, Module, RelativePositionBias, TransformerLayer, \
    key_padding_bias, truncated_normal
from .tensor import LOG_CLAMP, Tensor, dropout, embedding, get_default_dtype, sigmoid_array

logger = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    NONE = 'none'
    HP_LOSS = 'hp_loss'
    HP_DIST = 'hp_dist'


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    hidden: int
    ffn_hidden: int
    heads: int
    head_dim: int
    embed_dim: int
    dropout: float = 0.1
    relative_buckets: int = 32
    max_distance: int = 128
    max_len: int = 128

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == 'dropout':
                if not 0.0 <= value < 1.0:
                    raise ConfigError(f"dropout must be in [0, 1), got {value}")
            elif value <= 0:
                raise ConfigError(f"encoder field '{f.name}' must be positive, got {value}")
        if self.hidden != self.heads * self.head_dim:
            raise ConfigError(
                f"hidden ({self.hidden}) must equal heads x head_dim ({self.heads} x {self.head_dim})"
            )


# Discriminator shapes; the generator is derived through `generator_ratio`.
PRESETS = {
    'tiny': dict(layers=4, hidden=128, ffn_hidden=512, heads=2, head_dim=64, embed_dim=128,
                 generator_ratio=Fraction(1, 4), vocab=8192),
    'small': dict(layers=12, hidden=256, ffn_hidden=1024, heads=4, head_dim=64, embed_dim=128,
                  generator_ratio=Fraction(1, 4), vocab=30522),
    'base': dict(layers=12, hidden=768, ffn_hidden=3072, heads=12, head_dim=64, embed_dim=768,
                 generator_ratio=Fraction(1, 3), vocab=30522),
}

OVERRIDABLE = ('layers', 'hidden', 'ffn_hidden', 'heads', 'head_dim', 'embed_dim',
               'relative_buckets', 'max_distance', 'max_len', 'generator_ratio')


@dataclass(frozen=True)
class ModelConfig:
    preset: str = 'tiny'
    variant: Variant = Variant.HP_LOSS
    dropout: float = 0.1
    tie_sampling_projection: bool = True
    sampling_stop_gradient: bool = False
    overrides: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"Unknown model preset '{self.preset}'; choose from {sorted(PRESETS)}")
        unknown = set(self.overrides) - set(OVERRIDABLE)
        if unknown:
            raise ConfigError(f"Unknown model overrides: {sorted(unknown)}")
        self.discriminator_config()
        self.generator_config()

    @property
    def generator_ratio(self) -> Fraction:
        ratio = self.overrides.get('generator_ratio', PRESETS[self.preset]['generator_ratio'])
        ratio = Fraction(ratio).limit_denominator(64)
        if not 0 < ratio <= 1:
            raise ConfigError(f"generator_ratio must be in (0, 1], got {ratio}")
        return ratio

    def discriminator_config(self) -> EncoderConfig:
        spec = {k: v for k, v in PRESETS[self.preset].items() if k not in ('generator_ratio', 'vocab')}
        spec.update({k: v for k, v in self.overrides.items() if k != 'generator_ratio'})
        return EncoderConfig(dropout=self.dropout, **spec)

    def generator_config(self) -> EncoderConfig:
        disc = self.discriminator_config()
        ratio = self.generator_ratio
        hidden = int(round(disc.hidden * ratio))
        heads = max(1, int(round(disc.heads * ratio)))
        if hidden % heads:
            heads = 1
        return replace(
            disc,
            hidden=hidden,
            heads=heads,
            head_dim=hidden // heads,
            ffn_hidden=max(1, int(round(disc.ffn_hidden * ratio))),
        )


class Encoder(Module):
    """Token embeddings in, contextual states out. Position enters only via the relative bias."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.projection = None
        if config.embed_dim != config.hidden:
            self.projection = self.add_child('embed_projection', Dense(config.embed_dim, config.hidden, rng))
        self.embed_norm = self.add_child('embed_norm', LayerNorm(config.hidden))
        self.position_bias = self.add_child(
            'relative_position',
            RelativePositionBias(config.relative_buckets, config.heads, config.max_distance, rng),
        )
        self.layers = [
            self.add_child(f"layer.{i}", TransformerLayer(
                config.hidden, config.ffn_hidden, config.heads, config.head_dim, config.dropout, rng))
            for i in range(config.layers)
        ]

    def __call__(self, token_embeddings: Tensor, attention_mask: np.ndarray,
                 rng: np.random.Generator = None) -> Tensor:
        x = token_embeddings
        if self.projection is not None:
            x = self.projection(x)
        x = dropout(self.embed_norm(x), self.config.dropout, rng)
        length = x.shape[1]
        if length > self.config.max_len:
            raise ContractViolation(f"sequence length {length} exceeds max_len {self.config.max_len}")
        key_bias = key_padding_bias(attention_mask, get_default_dtype())
        position_bias = self.position_bias(length)
        for layer in self.layers:
            x = layer(x, key_bias, position_bias, rng)
        return x


class Generator(Module):
    def __init__(self, config: EncoderConfig, vocab_size: int, variant: Variant, tie_sampling_projection: bool,
                 rng: np.random.Generator):
        super().__init__()
        self.variant = variant
        self.encoder = self.add_child('encoder', Encoder(config, rng))
        self.mlm_head = self.add_child('mlm_head', HeadTransform(config.hidden, config.embed_dim, rng))
        self.mlm_bias = self.add_param('mlm_bias', np.zeros(vocab_size))
        self.sampling_head = None
        self.sampling_projection = None
        if variant is not Variant.NONE:
            self.sampling_head = self.add_child(
                'sampling_head', HeadTransform(config.hidden, config.embed_dim, rng))
            if variant is Variant.HP_LOSS and not tie_sampling_projection:
                self.sampling_projection = self.add_param(
                    'sampling_projection', truncated_normal(rng, (vocab_size, config.embed_dim)))


class Discriminator(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.encoder = self.add_child('encoder', Encoder(config, rng))
        self.head_dense = self.add_child('head_dense', Dense(config.hidden, config.hidden, rng))
        self.head_out = self.add_child('head_out', Dense(config.hidden, 1, rng))


class ModelPair:
    """Both towers plus the one embedding table they, and the output projections, share."""

    def __init__(self, config: ModelConfig, vocab_size: int, rng: np.random.Generator):
        self.config = config
        self.variant = Variant(config.variant)
        self.vocab_size = vocab_size
        self.generator_config = config.generator_config()
        self.discriminator_config = config.discriminator_config()
        if self.generator_config.embed_dim != self.discriminator_config.embed_dim:
            raise ConfigError("generator and discriminator must share the embedding size")
        self.embeddings = Tensor(
            truncated_normal(rng, (vocab_size, self.discriminator_config.embed_dim)),
            requires_grad=True, name='embeddings.word',
        )
        self.generator = Generator(self.generator_config, vocab_size, self.variant,
                                   config.tie_sampling_projection, rng)
        self.discriminator = Discriminator(self.discriminator_config, rng)

    def named_parameters(self) -> Dict[str, Tensor]:
        named = {'embeddings.word': self.embeddings}
        named.update(self.generator.named_parameters('generator.'))
        named.update(self.discriminator.named_parameters('discriminator.'))
        return named

    def sampling_head_parameter_names(self):
        return [name for name in self.named_parameters()
                if name.startswith('generator.sampling_head.') or name == 'generator.sampling_projection']

    def sampling_weight_table(self) -> Tensor:
        """w(x') for HP_LOSS, e(x') for HP_DIST."""
        if self.generator.sampling_projection is not None:
            return self.generator.sampling_projection
        return self.embeddings


@dataclass
class GeneratorOutput:
    hidden: Tensor
    rows: np.ndarray
    cols: np.ndarray
    mlm_logits: Tensor
    variant: Variant
    sampling_logits: Optional[Tensor] = None
    h_s: Optional[Tensor] = None

    @property
    def d_hat(self) -> Optional[np.ndarray]:
        """HP_LOSS sigmoid probabilities over the vocab, clamped away from 0 and 1."""
        if self.variant is not Variant.HP_LOSS:
            return None
        return np.clip(sigmoid_array(self.sampling_logits.data), LOG_CLAMP, 1.0 - LOG_CLAMP)


@dataclass
class DiscriminatorOutput:
    logits: Tensor
    probs: Tensor
    attention_mask: np.ndarray


def _check_positions(rows: np.ndarray, cols: np.ndarray, shape) -> None:
    if rows.shape != cols.shape:
        raise ContractViolation("row and column index arrays differ in shape")
    if rows.size and (rows.min() < 0 or rows.max() >= shape[0] or cols.min() < 0 or cols.max() >= shape[1]):
        raise ContractViolation(f"masked position out of range for batch of shape {shape}")


def generator_forward(pair: ModelPair, corrupted: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                      attention_mask: np.ndarray = None, rng: np.random.Generator = None) -> GeneratorOutput:
    """Encode the corrupted ids; evaluate both heads only at the masked positions."""
    corrupted = np.atleast_2d(np.asarray(corrupted, dtype=np.int64))
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    _check_positions(rows, cols, corrupted.shape)
    if attention_mask is None:
        attention_mask = np.ones(corrupted.shape, dtype=bool)
    gen = pair.generator
    hidden = gen.encoder(embedding(pair.embeddings, corrupted), attention_mask, rng)
    at_masks = hidden[rows, cols]
    output_table = pair.embeddings.transpose()
    mlm_logits = gen.mlm_head(at_masks) @ output_table + gen.mlm_bias
    out = GeneratorOutput(hidden=hidden, rows=rows, cols=cols, mlm_logits=mlm_logits, variant=pair.variant)
    if pair.variant is not Variant.NONE:
        source = at_masks.detach() if pair.config.sampling_stop_gradient else at_masks
        out.h_s = gen.sampling_head(source)
        out.sampling_logits = out.h_s @ pair.sampling_weight_table().transpose()
    return out


def discriminator_forward(pair: ModelPair, replaced: np.ndarray, attention_mask: np.ndarray = None,
                          rng: np.random.Generator = None) -> DiscriminatorOutput:
    """Per-position probability that the token is original; PAD positions are excluded by the mask."""
    replaced = np.atleast_2d(np.asarray(replaced, dtype=np.int64))
    if attention_mask is None:
        attention_mask = np.ones(replaced.shape, dtype=bool)
    disc = pair.discriminator
    hidden = disc.encoder(embedding(pair.embeddings, replaced), attention_mask, rng)
    logits = disc.head_out(disc.head_dense(hidden).gelu())
    b, length = replaced.shape
    logits = logits.reshape(b, length)
    probs = logits.sigmoid().clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
    return DiscriminatorOutput(logits=logits, probs=probs, attention_mask=np.asarray(attention_mask, dtype=bool))


def init_models(config: ModelConfig, vocab_size: int, rng: np.random.Generator) -> ModelPair:
    if vocab_size < 6:
        raise ConfigError(f"vocab_size must exceed the special tokens, got {vocab_size}")
    pair = ModelPair(config, vocab_size, rng)
    total = sum(p.size for p in pair.named_parameters().values())
    logger.info(
        f"Initialized {pair.variant.value} model pair: generator hidden {pair.generator_config.hidden}, "
        f"discriminator hidden {pair.discriminator_config.hidden}, {total:,} parameters"
    )
    return pair
