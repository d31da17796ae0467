import os
from collections import Counter

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_array_equal
from pandas.testing import assert_frame_equal

from rtdlab import trainer
from rtdlab.checkpoint import load_checkpoint, write_checkpoint
from rtdlab.config import config_hash
from rtdlab.data import batch_for_step
from rtdlab.errors import ConfigHashMismatch, DataError, NumericFault
from rtdlab.job_utils import JobStatus, read_manifest, request_stop
from rtdlab.losses import mlm_cross_entropy
from rtdlab.optim import AdamState
from rtdlab.tensor import no_grad
from rtdlab.trainer import (
    ACCURACY_FILE, FINAL_CHECKPOINT, METRIC_COLUMNS, METRICS_FILE, TRACES_FILE, checkpoint_path,
    latest_checkpoint, prepare_data, pretrain, train_step,
)


def snapshot(pair):
    return {name: p.data.copy() for name, p in pair.named_parameters().items()}


def one_step(config, make_pair, step=1, decisions=None, incidents=None):
    prepared = prepare_data(config)
    pair = make_pair(config, vocab_size=len(prepared.vocab))
    before = snapshot(pair)
    batch = batch_for_step(prepared.train, step, config.data.batch_size, config.data.max_len, config.seed)
    metrics = train_step(batch, pair, AdamState(), config, step, decisions, incidents)
    return pair, before, metrics


def changed(pair, before, prefix):
    return {name for name, p in pair.named_parameters().items()
            if name.startswith(prefix) and not np.array_equal(p.data, before[name])}


def test_prepare_data_splits_and_encodes(micro_config, documents):
    prepared = prepare_data(micro_config)
    assert len(prepared.train) + len(prepared.heldout) == len(documents)
    assert len(prepared.heldout) == 12
    assert len(prepared.vocab) <= micro_config.data.vocab_size


def test_missing_corpus_is_a_data_error(make_config, tmp_path):
    config = make_config()
    os.remove(config.data.corpus)
    with pytest.raises(DataError, match='not found'):
        prepare_data(config)


def test_one_step_moves_every_tower(micro_config, make_pair):
    pair, before, metrics = one_step(micro_config, make_pair)
    assert changed(pair, before, 'discriminator.')
    assert changed(pair, before, 'generator.sampling_head.')
    assert changed(pair, before, 'embeddings.')
    assert metrics.l_s > 0 and metrics.l_d > 0 and metrics.l_g > 0
    assert metrics.total == pytest.approx(metrics.l_g + 5.0 * metrics.l_s + 50.0 * metrics.l_d)


def test_zero_lambda1_leaves_the_sampling_head_alone(make_config, make_pair):
    pair, before, metrics = one_step(make_config(objective={'lambda1': 0.0}), make_pair)
    assert not changed(pair, before, 'generator.sampling_head.')
    assert changed(pair, before, 'generator.encoder.')
    assert metrics.total == pytest.approx(metrics.l_g + 50.0 * metrics.l_d)


def test_zero_lambda2_leaves_the_discriminator_alone(make_config, make_pair):
    pair, before, _ = one_step(make_config(objective={'lambda2': 0.0}), make_pair)
    assert not changed(pair, before, 'discriminator.')
    assert changed(pair, before, 'generator.')


@pytest.mark.parametrize('variant', ['hp_loss', 'hp_dist'])
def test_sampling_delay_holds_back_the_head(make_config, make_pair, variant):
    decisions = []
    config = make_config(variant, objective={'sampling_delay': 100})
    pair, before, metrics = one_step(config, make_pair, decisions=decisions)
    assert metrics.l_s == 0.0
    assert not changed(pair, before, 'generator.sampling_head.')
    assert all(d.p_s == d.p_g for d in decisions)


def test_baseline_samples_from_the_generator(make_config, make_pair):
    decisions = []
    pair, _, metrics = one_step(make_config('none', objective={'focal': {'gamma': 0.0}}), make_pair,
                                decisions=decisions)
    assert metrics.l_s == 0.0
    assert decisions and all(d.p_s == d.p_g and d.l_hat is None for d in decisions)
    assert pair.sampling_head_parameter_names() == []


def test_hpdist_step_reports_clamp_incidents_counter(make_config, make_pair):
    incidents = Counter()
    _, _, metrics = one_step(make_config('hp_dist'), make_pair, incidents=incidents)
    assert np.isfinite(metrics.l_s)
    assert set(incidents) <= {'importance_weight_clamped'}


def test_step_zero_has_zero_learning_rate(micro_config, make_pair):
    pair, before, metrics = one_step(micro_config, make_pair, step=0)
    assert metrics.lr == 0.0
    assert not changed(pair, before, '')


def test_run_directory_layout(micro_config, tmp_path):
    result = pretrain(micro_config, run_dir=str(tmp_path / 'run'))
    files = set(os.listdir(result.run_dir))
    assert {'manifest.json', 'vocab.txt', METRICS_FILE, FINAL_CHECKPOINT,
            'ckpt_step_00000003.ckpt', 'ckpt_step_00000006.ckpt'} <= files
    assert list(result.metrics.columns) == METRIC_COLUMNS
    assert result.metrics['step'].tolist() == list(range(6))
    manifest = read_manifest(result.run_dir)
    assert manifest.status == JobStatus.COMPLETED.value
    assert manifest.end_step == 6 and manifest.config_hash == config_hash(micro_config)
    assert latest_checkpoint(result.run_dir) == checkpoint_path(result.run_dir, 6)


def test_default_run_directory_is_named_by_hash(micro_config, isolated_runs_dir):
    result = pretrain(micro_config)
    assert os.path.dirname(result.run_dir) == str(isolated_runs_dir)
    assert os.path.basename(result.run_dir).startswith(config_hash(micro_config)[:12])


def test_same_config_gives_identical_runs(micro_config, tmp_path):
    first = pretrain(micro_config, run_dir=str(tmp_path / 'a'))
    second = pretrain(micro_config, run_dir=str(tmp_path / 'b'))
    assert_frame_equal(first.metrics, second.metrics)
    with open(first.final_checkpoint, 'rb') as a, open(second.final_checkpoint, 'rb') as b:
        assert a.read() == b.read()


def test_different_seed_gives_a_different_run(make_config, tmp_path):
    first = pretrain(make_config(seed=0), run_dir=str(tmp_path / 'a'))
    second = pretrain(make_config(seed=1), run_dir=str(tmp_path / 'b'))
    assert not np.allclose(first.metrics['total'], second.metrics['total'])


def test_eval_and_trace_logs(make_config, tmp_path):
    config = make_config(eval_every=3, trace_every=2)
    result = pretrain(config, run_dir=str(tmp_path / 'run'))
    curve = pd.read_csv(os.path.join(result.run_dir, ACCURACY_FILE))
    assert sorted(curve['step'].unique().tolist()) == [3, 6]
    assert len(curve) == 8
    assert curve['accuracy'].between(0.0, 1.0).all()
    traces = pd.read_csv(os.path.join(result.run_dir, TRACES_FILE))
    assert sorted(traces['step'].unique().tolist()) == [0, 2, 4]


@pytest.mark.slow
def test_resume_continues_bit_exactly(micro_config, tmp_path, monkeypatch):
    reference = pretrain(micro_config, run_dir=str(tmp_path / 'reference'))

    real_step = trainer.train_step

    def interrupted(batch, pair, adam, config, step, *args):
        if step == 4:
            raise RuntimeError('simulated crash')
        return real_step(batch, pair, adam, config, step, *args)

    monkeypatch.setattr(trainer, 'train_step', interrupted)
    run_dir = str(tmp_path / 'crashed')
    with pytest.raises(RuntimeError):
        pretrain(micro_config, run_dir=run_dir)
    assert read_manifest(run_dir).status == JobStatus.FAILED.value
    monkeypatch.setattr(trainer, 'train_step', real_step)

    resumed = pretrain(micro_config, run_dir=run_dir, resume=True)
    assert_frame_equal(resumed.metrics, reference.metrics)
    with open(resumed.final_checkpoint, 'rb') as a, open(reference.final_checkpoint, 'rb') as b:
        assert a.read() == b.read()


def test_resume_under_a_different_config_is_refused(micro_config, make_config, tmp_path):
    result = pretrain(micro_config, run_dir=str(tmp_path / 'run'))
    with pytest.raises(ConfigHashMismatch):
        pretrain(make_config(objective={'lambda2': 40.0}), run_dir=result.run_dir, resume=True)


def test_resume_without_checkpoint_is_a_data_error(micro_config, tmp_path):
    (tmp_path / 'empty').mkdir()
    with pytest.raises(DataError):
        pretrain(micro_config, run_dir=str(tmp_path / 'empty'), resume=True)


def test_numeric_fault_dumps_state(micro_config, tmp_path, monkeypatch):
    real_step = trainer.train_step

    def faulty(batch, pair, adam, config, step, *args):
        if step == 2:
            raise NumericFault('log')
        return real_step(batch, pair, adam, config, step, *args)

    monkeypatch.setattr(trainer, 'train_step', faulty)
    run_dir = str(tmp_path / 'run')
    with pytest.raises(NumericFault) as info:
        pretrain(micro_config, run_dir=run_dir)
    assert info.value.exit_code == 4
    assert os.path.exists(os.path.join(run_dir, 'fault_step_2.ckpt'))
    manifest = read_manifest(run_dir)
    assert manifest.status == JobStatus.FAILED.value
    assert manifest.artifacts['fault'] == 'fault_step_2.ckpt'
    assert pd.read_csv(os.path.join(run_dir, METRICS_FILE))['step'].tolist() == [0, 1]


def test_checked_run_config_overrides_environment(make_config, tmp_path):
    result = pretrain(make_config(checked=True), run_dir=str(tmp_path / 'run'))
    assert_array_equal(result.metrics['step'], np.arange(6))


def test_stop_request_checkpoints_and_halts(micro_config, tmp_path, monkeypatch):
    run_dir = str(tmp_path / 'run')
    real_step = trainer.train_step

    def stopped_midway(batch, pair, adam, config, step, *args):
        if step == 1:
            assert request_stop(run_dir)
        return real_step(batch, pair, adam, config, step, *args)

    monkeypatch.setattr(trainer, 'train_step', stopped_midway)
    result = pretrain(micro_config, run_dir=run_dir)
    assert result.metrics['step'].tolist() == [0, 1]
    assert latest_checkpoint(run_dir) == checkpoint_path(run_dir, 2)
    assert not os.path.exists(result.final_checkpoint)
    assert read_manifest(run_dir).status == JobStatus.IDLE.value
    assert not request_stop(run_dir)


def test_missing_corpus_leaves_no_run_directory(make_config, isolated_runs_dir):
    config = make_config()
    os.remove(config.data.corpus)
    with pytest.raises(DataError):
        pretrain(config)
    assert not isolated_runs_dir.exists() or not any(isolated_runs_dir.iterdir())


def test_resume_carries_incident_counts_forward(micro_config, tmp_path):
    run_dir = pretrain(micro_config, run_dir=str(tmp_path / 'run')).run_dir
    middle = checkpoint_path(run_dir, 3)
    checkpoint = load_checkpoint(middle)
    checkpoint.extra = {'incidents': {'importance_weight_clamped': 2}}
    write_checkpoint(checkpoint, middle)
    os.remove(checkpoint_path(run_dir, 6))
    os.remove(os.path.join(run_dir, FINAL_CHECKPOINT))

    resumed = pretrain(micro_config, run_dir=run_dir, resume=True)
    assert resumed.incidents['importance_weight_clamped'] == 2
    assert load_checkpoint(resumed.final_checkpoint).extra['incidents'] == {'importance_weight_clamped': 2}


def test_baseline_with_zero_gamma_trains_on_plain_cross_entropy(make_config, make_pair, monkeypatch):
    recorded = []
    real_focal = trainer.focal_loss

    def recording(**kwargs):
        loss = real_focal(**kwargs)
        with no_grad():
            recorded.append((loss.item(), mlm_cross_entropy(log_p=kwargs['log_p']).item()))
        return loss

    monkeypatch.setattr(trainer, 'focal_loss', recording)
    config = make_config('none', objective={'focal': {'gamma': 0.0}})
    _, _, metrics = one_step(config, make_pair)
    (focal, cross_entropy), = recorded
    assert focal == pytest.approx(cross_entropy, abs=1e-12)
    assert metrics.l_g == pytest.approx(cross_entropy, abs=1e-12)
    assert metrics.l_s == 0.0
    assert metrics.total == pytest.approx(metrics.l_g + 50.0 * metrics.l_d)


@pytest.mark.slow
def test_hundred_step_runs_are_identical(make_config, tmp_path):
    config = make_config(total_steps=100, checkpoint_every=50, log_every=25)
    first = pretrain(config, run_dir=str(tmp_path / 'a'))
    second = pretrain(config, run_dir=str(tmp_path / 'b'))
    assert len(first.metrics) == 100
    assert_frame_equal(first.metrics, second.metrics)
    with open(first.final_checkpoint, 'rb') as a, open(second.final_checkpoint, 'rb') as b:
        assert a.read() == b.read()
