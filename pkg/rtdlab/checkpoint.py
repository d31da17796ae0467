"""
Checkpoint files.

A checkpoint is a safetensors file. Parameters and Adam moments are float64 tensors
named `param/<name>`, `adam.m/<name>` and `adam.v/<name>`. One metadata entry holds
the canonical JSON header: format version, step, resolved run config and its hash,
optimizer scalars, vocabulary, extras and a SHA-256 over the tensor bytes. Writing
the same state twice produces identical bytes.
"""
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from safetensors import SafetensorError, safe_open
from safetensors.numpy import save_file

from .config import TrainConfig, canonical_json, config_from_dict, config_hash, config_to_dict
from .data import Vocab
from .errors import CheckpointError, ConfigHashMismatch
from .models import init_models
from .optim import AdamState
from .rng import RngState, Stream
from .tensor import get_default_dtype, set_default_dtype

logger = logging.getLogger(__name__)

FORMAT = 'rtdlab-checkpoint'
VERSION = 2
# a single metadata key keeps the safetensors header byte-stable
HEADER_KEY = 'rtdlab'
_PAYLOAD_DTYPE = np.dtype('<f8')
_PARAM, _FIRST_MOMENT, _SECOND_MOMENT = 'param/', 'adam.m/', 'adam.v/'


@dataclass
class Checkpoint:
    step: int
    config: Dict[str, Any]
    config_hash: str
    params: Dict[str, np.ndarray]
    adam: AdamState
    vocab: Optional[List[str]] = None
    extra: Dict[str, Any] = field(default_factory=dict)


def _collect_arrays(params: Dict[str, np.ndarray], adam: AdamState) -> Dict[str, np.ndarray]:
    arrays = {f"{_PARAM}{name}": value for name, value in params.items()}
    arrays.update({f"{_FIRST_MOMENT}{name}": value for name, value in adam.m.items()})
    arrays.update({f"{_SECOND_MOMENT}{name}": value for name, value in adam.v.items()})
    return {name: np.ascontiguousarray(value, dtype=_PAYLOAD_DTYPE) for name, value in arrays.items()}


def tensor_digest(arrays: Dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype=_PAYLOAD_DTYPE)
        digest.update(name.encode('utf-8'))
        digest.update(repr(tuple(data.shape)).encode('utf-8'))
        digest.update(data.tobytes(order='C'))
    return digest.hexdigest()


def write_checkpoint(checkpoint: Checkpoint, path) -> str:
    """Write `checkpoint` to `path`; the file is replaced atomically."""
    arrays = _collect_arrays(checkpoint.params, checkpoint.adam)
    header = {
        'format': FORMAT,
        'version': VERSION,
        'step': int(checkpoint.step),
        'config': checkpoint.config,
        'config_hash': checkpoint.config_hash,
        'optimizer': {
            'beta1': checkpoint.adam.beta1,
            'beta2': checkpoint.adam.beta2,
            'eps': checkpoint.adam.eps,
            'step': int(checkpoint.adam.step),
        },
        'vocab': checkpoint.vocab,
        'extra': checkpoint.extra,
        'tensors_sha256': tensor_digest(arrays),
    }
    tmp_path = f"{path}.tmp"
    try:
        save_file(arrays, tmp_path, metadata={HEADER_KEY: canonical_json(header)})
        os.replace(tmp_path, path)
    except (OSError, SafetensorError) as e:
        raise CheckpointError(f"Cannot write checkpoint '{path}': {e}") from e
    return str(path)


def read_checkpoint(path) -> Checkpoint:
    """Read a checkpoint and verify its format, tensor checksum and embedded config hash."""
    if not os.path.isfile(path):
        raise CheckpointError(f"Checkpoint not found: '{path}'")
    try:
        with safe_open(str(path), framework='np') as f:
            metadata = f.metadata() or {}
            arrays = {name: f.get_tensor(name) for name in f.keys()}
    except (SafetensorError, OSError, ValueError) as e:
        raise CheckpointError(f"'{path}' is not a readable checkpoint: {e}") from e

    if HEADER_KEY not in metadata:
        raise CheckpointError(f"'{path}' is a safetensors file without a checkpoint header")
    try:
        header = json.loads(metadata[HEADER_KEY])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"'{path}' has a corrupt header: {e}") from e
    if header.get('format') != FORMAT or header.get('version') != VERSION:
        raise CheckpointError(
            f"'{path}' has unsupported format {header.get('format')} version {header.get('version')}")
    if tensor_digest(arrays) != header.get('tensors_sha256'):
        raise CheckpointError(f"'{path}' tensor checksum mismatch")
    if config_hash(header['config']) != header['config_hash']:
        raise CheckpointError(f"'{path}' embedded config does not match its recorded hash")

    params, first, second = {}, {}, {}
    for name, array in arrays.items():
        for prefix, target in ((_PARAM, params), (_FIRST_MOMENT, first), (_SECOND_MOMENT, second)):
            if name.startswith(prefix):
                target[name[len(prefix):]] = array
                break
        else:
            raise CheckpointError(f"'{path}' holds unknown tensor '{name}'")
    opt = header['optimizer']
    adam = AdamState(beta1=opt['beta1'], beta2=opt['beta2'], eps=opt['eps'], step=opt['step'], m=first, v=second)
    return Checkpoint(step=header['step'], config=header['config'], config_hash=header['config_hash'],
                      params=params, adam=adam, vocab=header.get('vocab'), extra=header.get('extra') or {})


def save_checkpoint(pair, adam: AdamState, step: int, path, config, vocab: List[str] = None,
                    extra: Dict[str, Any] = None) -> str:
    """Write the model pair and optimizer state."""
    config_dict = config_to_dict(config) if isinstance(config, TrainConfig) else config
    checkpoint = Checkpoint(
        step=step,
        config=config_dict,
        config_hash=config_hash(config_dict),
        params={name: p.data for name, p in pair.named_parameters().items()},
        adam=adam,
        vocab=list(vocab) if vocab is not None else None,
        extra=dict(extra or {}),
    )
    write_checkpoint(checkpoint, path)
    logger.info(f"Checkpoint written: {path} (step {step})")
    return str(path)


def load_checkpoint(path, expected_hash: str = None) -> Checkpoint:
    """Read and verify a checkpoint; `expected_hash` refuses a checkpoint from a different config."""
    checkpoint = read_checkpoint(path)
    if expected_hash is not None and expected_hash != checkpoint.config_hash:
        raise ConfigHashMismatch(expected_hash, checkpoint.config_hash, where=str(path))
    return checkpoint


def restore_parameters(pair, checkpoint: Checkpoint) -> None:
    """Copy checkpoint arrays into `pair`; names and shapes must match exactly."""
    named = pair.named_parameters()
    missing = sorted(set(named) - set(checkpoint.params))
    unexpected = sorted(set(checkpoint.params) - set(named))
    if missing or unexpected:
        raise CheckpointError(f"Parameter names differ: missing {missing[:5]}, unexpected {unexpected[:5]}")
    dtype = get_default_dtype()
    for name, param in named.items():
        value = checkpoint.params[name]
        if value.shape != param.data.shape:
            raise CheckpointError(f"Shape mismatch for '{name}': checkpoint {value.shape} vs model {param.data.shape}")
        param.data = value.astype(dtype)


def restore_optimizer(checkpoint: Checkpoint) -> AdamState:
    """Optimizer state with moments in the active dtype, so a resumed run continues bit-exactly."""
    dtype = get_default_dtype()
    adam = checkpoint.adam
    return AdamState(beta1=adam.beta1, beta2=adam.beta2, eps=adam.eps, step=adam.step,
                     m={k: v.astype(dtype) for k, v in adam.m.items()},
                     v={k: v.astype(dtype) for k, v in adam.v.items()})


def model_from_checkpoint(path, expected_hash: str = None):
    """Rebuild (pair, vocab, config, checkpoint) from a checkpoint file for evaluation."""
    checkpoint = load_checkpoint(path, expected_hash)
    if not checkpoint.vocab:
        raise CheckpointError(f"'{path}' carries no vocabulary; it cannot be evaluated")
    config = config_from_dict(checkpoint.config)
    set_default_dtype(config.dtype)
    vocab = Vocab(checkpoint.vocab)
    pair = init_models(config.model, len(vocab), RngState(config.seed, Stream.INIT).at(0))
    restore_parameters(pair, checkpoint)
    return pair, vocab, config, checkpoint
