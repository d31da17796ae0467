import copy
import json

import numpy as np
import pytest

from rtdlab.config import config_from_dict
from rtdlab.models import init_models
from rtdlab.rng import RngState, Stream
from rtdlab.tensor import _STATE

WORDS = [
    'the', 'cat', 'dog', 'sat', 'on', 'mat', 'a', 'ran', 'to', 'house', 'big', 'small', 'red', 'blue',
    'tree', 'bird', 'sang', 'in', 'park', 'day', 'night', 'sun', 'moon', 'was', 'very', 'old', 'new',
]

MICRO_MODEL = {
    'preset': 'tiny',
    'layers': 1,
    'hidden': 16,
    'heads': 2,
    'head_dim': 8,
    'ffn_hidden': 32,
    'embed_dim': 16,
    'max_len': 32,
    'relative_buckets': 8,
    'max_distance': 16,
    'generator_ratio': 0.5,
    'dropout': 0.1,
}


def make_documents(n: int = 60, seed: int = 7):
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n):
        length = int(rng.integers(8, 20))
        docs.append(' '.join(rng.choice(WORDS, size=length)) + ' .')
    return docs


def micro_raw(corpus_path: str, variant: str = 'hp_loss', **run) -> dict:
    raw = {
        'run': {'seed': 0, 'total_steps': 6, 'checkpoint_every': 3, 'log_every': 2, 'eval_every': 0},
        'data': {'corpus': str(corpus_path), 'heldout_fraction': 0.2, 'vocab_size': 64, 'max_len': 24,
                 'batch_size': 4, 'mask_frac': 0.15, 'ngram_max': 3},
        'model': dict(MICRO_MODEL, variant=variant),
        'objective': {'focal': {'mode': 'constant', 'gamma': 1.0}},
        'optim': {'peak_lr': 1e-3, 'warmup_steps': 2},
    }
    raw['run'].update(run)
    return raw


@pytest.fixture(autouse=True)
def reset_engine_state():
    saved = dict(_STATE)
    yield
    _STATE.update(saved)


@pytest.fixture(autouse=True)
def isolated_runs_dir(tmp_path, monkeypatch):
    monkeypatch.setenv('RTDLAB_RUNS_DIR', str(tmp_path / 'runs'))
    monkeypatch.delenv('RTDLAB_CHECKED', raising=False)
    return tmp_path / 'runs'


@pytest.fixture
def documents():
    return make_documents()


@pytest.fixture
def corpus_file(tmp_path, documents):
    path = tmp_path / 'corpus.txt'
    path.write_text('\n'.join(documents) + '\n', encoding='utf-8')
    return path


@pytest.fixture
def heldout_file(tmp_path):
    path = tmp_path / 'heldout.txt'
    path.write_text('\n'.join(make_documents(12, seed=99)) + '\n', encoding='utf-8')
    return path


@pytest.fixture
def make_config(corpus_file):
    def factory(variant: str = 'hp_loss', objective: dict = None, model: dict = None, **run):
        raw = micro_raw(corpus_file, variant, **run)
        if objective:
            raw['objective'].update(copy.deepcopy(objective))
        if model:
            raw['model'].update(model)
        return config_from_dict(raw)
    return factory


@pytest.fixture
def micro_config(make_config):
    return make_config()


@pytest.fixture
def make_pair():
    def factory(config, vocab_size: int = 40, seed: int = 0):
        return init_models(config.model, vocab_size, RngState(seed, Stream.INIT).at(0))
    return factory


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def write_config(tmp_path, corpus_file):
    def factory(name: str = 'config.json', variant: str = 'hp_loss', objective: dict = None, model: dict = None,
                **run):
        raw = micro_raw(corpus_file, variant, **run)
        if objective:
            raw['objective'].update(copy.deepcopy(objective))
        if model:
            raw['model'].update(model)
        path = tmp_path / name
        path.write_text(json.dumps(raw), encoding='utf-8')
        return path
    return factory
