"""
Run configuration.

Two layers: process settings from the environment (`.env` via python-dotenv), and the
JSON run config that fully determines a training run's numbers. The run config is
hashed canonically; the hash names run directories and guards resume.
"""
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, Optional

from .errors import ConfigError
from .losses import DEFAULT_LAMBDA2, FocalSpec, default_lambda1
from .models import OVERRIDABLE, ModelConfig, Variant

logger = logging.getLogger(__name__)

ABLATION_LAMBDA1 = (5.0, 10.0, 20.0)


@dataclass(frozen=True)
class Settings:
    runs_dir: str = 'runs'
    log_level: str = 'INFO'
    checked: bool = False
    analysis_max_positions: int = 200


def load_settings() -> Settings:
    try:
        return Settings(
            runs_dir=os.getenv('RTDLAB_RUNS_DIR', 'runs'),
            log_level=os.getenv('RTDLAB_LOG_LEVEL', 'INFO').upper(),
            checked=os.getenv('RTDLAB_CHECKED', '0').strip().lower() in ('1', 'true', 'yes'),
            analysis_max_positions=int(os.getenv('RTDLAB_ANALYSIS_MAX_POSITIONS', '200')),
        )
    except ValueError as e:
        raise ConfigError(f"Invalid environment setting: {e}") from e


@dataclass(frozen=True)
class DataConfig:
    corpus: str = ''
    heldout: Optional[str] = None
    heldout_fraction: float = 0.05
    vocab_size: int = 8192
    min_freq: int = 1
    max_len: int = 128
    batch_size: int = 32
    mask_frac: float = 0.15
    ngram_max: int = 3

    def __post_init__(self):
        if not self.corpus:
            raise ConfigError("data.corpus is required")
        if not 0.0 < self.mask_frac < 1.0:
            raise ConfigError(f"data.mask_frac must be in (0, 1), got {self.mask_frac}")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ConfigError(f"data.heldout_fraction must be in [0, 1), got {self.heldout_fraction}")
        for name in ('vocab_size', 'min_freq', 'max_len', 'batch_size', 'ngram_max'):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class ObjectiveConfig:
    focal: FocalSpec = field(default_factory=FocalSpec)
    lambda1: Optional[float] = None
    lambda2: float = DEFAULT_LAMBDA2
    sampling_delay: int = 0
    differentiate_focal_factor: bool = False

    def __post_init__(self):
        if self.lambda1 is not None and self.lambda1 < 0:
            raise ConfigError(f"objective.lambda1 must be >= 0, got {self.lambda1}")
        if self.lambda2 < 0:
            raise ConfigError(f"objective.lambda2 must be >= 0, got {self.lambda2}")
        if self.sampling_delay < 0:
            raise ConfigError(f"objective.sampling_delay must be >= 0, got {self.sampling_delay}")

    def resolved_lambda1(self, variant: Variant) -> float:
        if Variant(variant) is Variant.NONE:
            return 0.0
        return default_lambda1(variant) if self.lambda1 is None else float(self.lambda1)


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float = 5e-4
    warmup_steps: int = 10000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ConfigError(f"optim.peak_lr must be > 0, got {self.peak_lr}")
        if self.warmup_steps < 1:
            raise ConfigError(f"optim.warmup_steps must be >= 1, got {self.warmup_steps}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("optim betas must be in [0, 1) and eps > 0")


@dataclass(frozen=True)
class TrainConfig:
    data: DataConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    total_steps: int = 20000
    checkpoint_every: int = 1000
    eval_every: int = 0
    eval_batches: int = 4
    log_every: int = 100
    trace_every: int = 0
    dtype: str = 'float64'
    checked: Optional[bool] = None

    def __post_init__(self):
        if self.total_steps <= self.optim.warmup_steps:
            raise ConfigError(
                f"run.total_steps ({self.total_steps}) must exceed optim.warmup_steps ({self.optim.warmup_steps})"
            )
        if self.dtype not in ('float64', 'float32'):
            raise ConfigError(f"run.dtype must be float64 or float32, got {self.dtype}")
        if not 0 <= self.seed < 2 ** 63:
            raise ConfigError(f"run.seed must be a non-negative 63-bit integer, got {self.seed}")
        for name in ('checkpoint_every', 'eval_every', 'log_every', 'trace_every'):
            if getattr(self, name) < 0:
                raise ConfigError(f"run.{name} must be >= 0, got {getattr(self, name)}")
        if self.eval_batches < 1:
            raise ConfigError(f"run.eval_batches must be >= 1, got {self.eval_batches}")

    @property
    def variant(self) -> Variant:
        return Variant(self.model.variant)

    @property
    def lambda1(self) -> float:
        return self.objective.resolved_lambda1(self.variant)

    @property
    def lambda2(self) -> float:
        return float(self.objective.lambda2)


# -- parsing ---------------------------------------------------------------------------------------

RUN_KEYS = ('seed', 'total_steps', 'checkpoint_every', 'eval_every', 'eval_batches', 'log_every',
            'trace_every', 'dtype', 'checked')
_SECTIONS = ('run', 'data', 'model', 'objective', 'optim')


def _check_type(section: str, name: str, value, expected) -> None:
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif expected is str:
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{section}.{name} must be {expected.__name__}, got {value!r}")


def _build(cls, section: str, values: Dict[str, Any], skip=()):
    if not isinstance(values, dict):
        raise ConfigError(f"section '{section}' must be an object")
    known = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"Unknown keys in '{section}': {sorted(unknown)}")
    for name, value in values.items():
        declared = known[name].type
        if value is None:
            continue
        for candidate in (bool, int, float, str):
            if declared in (candidate, Optional[candidate]):
                _check_type(section, name, value, candidate)
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid '{section}' section: {e}") from e


_MODEL_FIELDS = {'preset': str, 'variant': str, 'dropout': float,
                 'tie_sampling_projection': bool, 'sampling_stop_gradient': bool}


def _check_ratio(value) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ConfigError(f"model.generator_ratio must be a number or a fraction string, got {value!r}")
    try:
        Fraction(value)
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"model.generator_ratio is not a fraction: {value!r}") from e


def _build_model(model_raw: Dict[str, Any]) -> ModelConfig:
    if not isinstance(model_raw, dict):
        raise ConfigError("section 'model' must be an object")
    fixed = {k: v for k, v in model_raw.items() if k in _MODEL_FIELDS}
    overrides = {k: v for k, v in model_raw.items() if k not in _MODEL_FIELDS}
    unknown = set(overrides) - set(OVERRIDABLE)
    if unknown:
        raise ConfigError(f"Unknown keys in 'model': {sorted(unknown)}")
    for name, value in fixed.items():
        _check_type('model', name, value, _MODEL_FIELDS[name])
    for name, value in overrides.items():
        if name == 'generator_ratio':
            _check_ratio(value)
        else:
            _check_type('model', name, value, int)
    try:
        return ModelConfig(
            preset=fixed.get('preset', 'tiny'),
            variant=Variant(fixed.get('variant', Variant.HP_LOSS.value)),
            dropout=float(fixed.get('dropout', 0.1)),
            tie_sampling_projection=fixed.get('tie_sampling_projection', True),
            sampling_stop_gradient=fixed.get('sampling_stop_gradient', False),
            overrides=overrides,
        )
    except (TypeError, ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"Invalid 'model' section: {e}") from e


def config_from_dict(raw: Dict[str, Any]) -> TrainConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"Unknown config sections: {sorted(unknown)}")
    if 'data' not in raw:
        raise ConfigError("config needs a 'data' section")

    objective_raw = dict(raw.get('objective', {}))
    focal = _build(FocalSpec, 'objective.focal', objective_raw.pop('focal', {}))
    objective = _build(ObjectiveConfig, 'objective', objective_raw, skip=('focal',))
    objective = dataclasses.replace(objective, focal=focal)

    model = _build_model(raw.get('model', {}))

    run = raw.get('run', {})
    if not isinstance(run, dict):
        raise ConfigError("section 'run' must be an object")
    unknown = set(run) - set(RUN_KEYS)
    if unknown:
        raise ConfigError(f"Unknown keys in 'run': {sorted(unknown)}")
    config = _build(
        TrainConfig, 'run',
        dict(run, data=_build(DataConfig, 'data', raw['data']), model=model, objective=objective,
             optim=_build(OptimConfig, 'optim', raw.get('optim', {}))),
    )
    model_max_len = model.discriminator_config().max_len
    if config.data.max_len > model_max_len:
        raise ConfigError(f"data.max_len ({config.data.max_len}) exceeds the model's max_len ({model_max_len})")
    lambda1 = config.lambda1
    if config.variant is not Variant.NONE and objective.lambda1 is not None and lambda1 not in ABLATION_LAMBDA1:
        logger.info(f"lambda1={lambda1} is outside the usual ablation grid {ABLATION_LAMBDA1}")
    return config


def load_config(path) -> TrainConfig:
    try:
        with open(path, encoding='utf-8') as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: '{path}'") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file '{path}' is not valid JSON: {e}") from e
    return config_from_dict(raw)


def config_to_dict(config: TrainConfig) -> Dict[str, Any]:
    """Fully resolved config, the form that is hashed and stored in checkpoints."""
    model = config.model
    model_section = {
        'preset': model.preset,
        'variant': Variant(model.variant).value,
        'dropout': model.dropout,
        'tie_sampling_projection': model.tie_sampling_projection,
        'sampling_stop_gradient': model.sampling_stop_gradient,
    }
    model_section.update({k: (str(v) if not isinstance(v, (int, float)) else v)
                          for k, v in model.overrides.items()})
    focal = dataclasses.asdict(config.objective.focal)
    focal['mode'] = config.objective.focal.mode.value
    objective = dataclasses.asdict(config.objective)
    objective['focal'] = focal
    objective['lambda1'] = config.lambda1
    return {
        'run': {k: getattr(config, k) for k in RUN_KEYS},
        'data': dataclasses.asdict(config.data),
        'model': model_section,
        'objective': objective,
        'optim': dataclasses.asdict(config.optim),
    }


def canonical_json(payload: Dict[str, Any]) -> str:
    return json.dumps(payload, sort_keys=True, separators=(',', ':'), ensure_ascii=True)


def config_hash(config) -> str:
    payload = config_to_dict(config) if isinstance(config, TrainConfig) else config
    return hashlib.sha256(canonical_json(payload).encode('utf-8')).hexdigest()
