import os

import pandas as pd
import pytest
from click.testing import CliRunner

from rtdlab import create_cli
from rtdlab.checkpoint import save_checkpoint
from rtdlab.job_utils import JobStatus, RunManifest, read_manifest, write_manifest
from rtdlab.optim import AdamState
from rtdlab.trainer import prepare_data


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def cli():
    return create_cli()


@pytest.fixture
def make_checkpoint(tmp_path, make_config, make_pair):
    def factory(variant: str = 'hp_loss', directory: str = 'run', name: str = 'final.ckpt', **run):
        config = make_config(variant, **run)
        prepared = prepare_data(config)
        pair = make_pair(config, vocab_size=len(prepared.vocab))
        run_dir = tmp_path / directory
        run_dir.mkdir(exist_ok=True)
        return save_checkpoint(pair, AdamState(), 3, run_dir / name, config, prepared.vocab.itos)
    return factory


def test_help_lists_every_command(runner, cli):
    result = runner.invoke(cli, ['--help'])
    assert result.exit_code == 0
    for name in ('pretrain', 'stop', 'analyze', 'variance-oracle', 'export-plots'):
        assert name in result.output


def test_synthetic_variance_oracle(runner, cli):
    result = runner.invoke(cli, ['variance-oracle', '--synthetic', '--pg', '0.5,0.3,0.2', '--loss', '0.1,1.0,2.0',
                                 '--n-mc', '5000', '--fit-steps', '2000'])
    assert result.exit_code == 0, result.output
    assert 'Z=0.7500 Var_pg=0.5425 Var_opt=0.0000' in result.output
    assert 'oracle p_s = [0.0667, 0.4000, 0.5333]' in result.output
    assert 'fitted p_s' in result.output


def test_synthetic_uniform_loss_is_announced(runner, cli, tmp_path):
    out_dir = tmp_path / 'report'
    result = runner.invoke(cli, ['variance-oracle', '--synthetic', '--pg', '0.5,0.3,0.2', '--loss', '1,1,1',
                                 '--n-mc', '1000', '--fit-steps', '10', '--out', str(out_dir)])
    assert result.exit_code == 0, result.output
    assert 'uniform loss: oracle p_s equals p_g' in result.output
    assert (out_dir / 'variance_synthetic.csv').exists()


@pytest.mark.parametrize('args', [
    ['variance-oracle', '--synthetic', '--pg', '0.5,0.5'],
    ['variance-oracle', '--synthetic', '--pg', '0.5,x', '--loss', '1,2'],
    ['variance-oracle'],
])
def test_variance_oracle_argument_errors(runner, cli, args):
    result = runner.invoke(cli, args)
    assert result.exit_code == 2
    assert 'Error:' in result.output


def test_missing_config_file_exits_with_config_code(runner, cli, tmp_path):
    result = runner.invoke(cli, ['pretrain', '--config', str(tmp_path / 'absent.json')])
    assert result.exit_code == 2


def test_mistyped_model_field_exits_with_config_code(runner, cli, write_config):
    result = runner.invoke(cli, ['pretrain', '--config', str(write_config(model={'layers': '4'}))])
    assert result.exit_code == 2
    assert 'model.layers must be int' in result.output


def test_missing_corpus_exits_with_data_code(runner, cli, write_config, corpus_file):
    config_path = write_config()
    os.remove(corpus_file)
    result = runner.invoke(cli, ['pretrain', '--config', str(config_path)])
    assert result.exit_code == 3
    assert 'not found' in result.output


def test_pretrain_command_completes_a_run(runner, cli, write_config, isolated_runs_dir):
    result = runner.invoke(cli, ['pretrain', '--config', str(write_config())])
    assert result.exit_code == 0, result.output
    (run_dir,) = os.listdir(isolated_runs_dir)
    assert os.path.exists(os.path.join(isolated_runs_dir, run_dir, 'final.ckpt'))


def test_resume_with_altered_config_exits_with_config_code(runner, cli, make_checkpoint, write_config):
    checkpoint = make_checkpoint(name='ckpt_step_00000003.ckpt')
    altered = write_config('altered.json', objective={'lambda2': 10.0})
    result = runner.invoke(cli, ['pretrain', '--config', str(altered), '--resume', os.path.dirname(checkpoint)])
    assert result.exit_code == 2
    assert 'hash mismatch' in result.output


def test_correlation_on_hpdist_checkpoint_is_refused(runner, cli, make_checkpoint, heldout_file):
    checkpoint = make_checkpoint('hp_dist')
    result = runner.invoke(cli, ['analyze', 'correlation', '--checkpoint', checkpoint, '--heldout', str(heldout_file)])
    assert result.exit_code == 2
    assert 'HP_Loss' in result.output


def test_corrupt_checkpoint_exits_with_data_code(runner, cli, tmp_path):
    path = tmp_path / 'broken.ckpt'
    path.write_bytes(b'garbage')
    result = runner.invoke(cli, ['analyze', 'accuracy', '--checkpoint', str(path)])
    assert result.exit_code == 3


def test_accuracy_report_is_written_and_reproducible(runner, cli, make_checkpoint, heldout_file):
    checkpoint = make_checkpoint()
    args = ['analyze', 'accuracy', '--checkpoint', checkpoint, '--heldout', str(heldout_file), '--seed', '5']
    first = runner.invoke(cli, args)
    assert first.exit_code == 0, first.output
    report = os.path.join(os.path.dirname(checkpoint), 'analysis', 'accuracy.csv')
    with open(report, 'rb') as f:
        content = f.read()
    assert runner.invoke(cli, args).exit_code == 0
    with open(report, 'rb') as f:
        assert f.read() == content
    frame = pd.read_csv(report)
    assert set(frame['scheme']) == {'pg', 'ps'} and set(frame['position_set']) == {'masked', 'all'}
    assert frame['original_rate'].between(0.0, 1.0).all()


def test_histogram_on_baseline_falls_back_to_pg(runner, cli, make_checkpoint, tmp_path):
    checkpoint = make_checkpoint('none')
    out_dir = tmp_path / 'out'
    result = runner.invoke(cli, ['analyze', 'histogram', '--checkpoint', checkpoint, '--out', str(out_dir)])
    assert result.exit_code == 0, result.output
    assert 'p_g only' in result.output
    assert pd.read_csv(out_dir / 'histogram.csv')['scheme'].unique().tolist() == ['pg']


def test_checkpoint_variance_report(runner, cli, make_checkpoint, heldout_file, monkeypatch):
    monkeypatch.setenv('RTDLAB_ANALYSIS_MAX_POSITIONS', '3')
    checkpoint = make_checkpoint()
    result = runner.invoke(cli, ['variance-oracle', '--checkpoint', checkpoint, '--heldout', str(heldout_file),
                                 '--n-mc', '500'])
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(os.path.join(os.path.dirname(checkpoint), 'analysis', 'variance.csv'))
    assert len(frame) == 3
    assert (frame['var_ps_oracle'].abs() < 1e-9).all()


def test_export_plots_without_accuracy_curve(runner, cli, make_checkpoint):
    checkpoint = make_checkpoint()
    run_dir = os.path.dirname(checkpoint)
    result = runner.invoke(cli, ['export-plots', '--run-dir', run_dir])
    assert result.exit_code == 0, result.output
    histogram = pd.read_csv(os.path.join(run_dir, 'plots', 'maxprob_histogram.csv'))
    curve = pd.read_csv(os.path.join(run_dir, 'plots', 'accuracy_curve.csv'))
    assert list(histogram.columns) == ['bin', 'fraction', 'scheme']
    assert list(curve.columns) == ['step', 'accuracy', 'scheme', 'position_set']
    assert curve['step'].unique().tolist() == [3]


def test_export_plots_without_checkpoint(runner, cli, tmp_path):
    (tmp_path / 'bare').mkdir()
    result = runner.invoke(cli, ['export-plots', '--run-dir', str(tmp_path / 'bare')])
    assert result.exit_code == 3


def test_stop_command_flags_a_running_run(runner, cli, tmp_path):
    run_dir = tmp_path / 'live'
    run_dir.mkdir()
    write_manifest(str(run_dir), RunManifest(config_hash='ef' * 32, seed=0, preset='tiny', variant='hp_loss',
                                             status=JobStatus.RUNNING.value))
    result = runner.invoke(cli, ['stop', str(run_dir)])
    assert result.exit_code == 0, result.output
    assert read_manifest(str(run_dir)).status == JobStatus.STOPPING.value
    again = runner.invoke(cli, ['stop', str(run_dir)])
    assert again.exit_code == 0 and 'nothing to stop' in again.output


def test_stop_command_without_manifest_exits_with_data_code(runner, cli, tmp_path):
    result = runner.invoke(cli, ['stop', str(tmp_path)])
    assert result.exit_code == 3
