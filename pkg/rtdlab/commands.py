import functools
import logging
import os
import sys

import click
import numpy as np
import pandas as pd

from .analysis import (
    PositionSet, Scheme, accuracy_table, canonical_batches, detection_accuracy, estimation_correlation,
    fit_sampling_logits, maxprob_histogram, sampled_original_rate, synthetic_variance_report, variance_report,
)
from .checkpoint import model_from_checkpoint
from .config import load_config, load_settings
from .data import encode_documents, read_documents
from .errors import ConfigError, DataError, LabError
from .helpers import frame_to_text, write_csv
from .job_utils import read_manifest, request_stop
from .models import Variant
from .trainer import ACCURACY_FILE, FINAL_CHECKPOINT, latest_checkpoint, prepare_data, pretrain

logger = logging.getLogger(__name__)


def lab_command(func):
    """Report LabError in red and exit with its code instead of a traceback."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except LabError as e:
            click.secho(f"Error: {e}", fg='red', err=True)
            sys.exit(e.exit_code)
    return wrapper


def _parse_vector(text: str, name: str) -> np.ndarray:
    try:
        values = np.array([float(v) for v in text.replace(' ', '').split(',') if v], dtype=np.float64)
    except ValueError as e:
        raise ConfigError(f"--{name} must be a comma-separated list of numbers: {e}") from e
    if values.size == 0:
        raise ConfigError(f"--{name} is empty")
    return values


def _heldout_batches(config, vocab, heldout_path: str = None):
    """Held-out batches from a file, or the run's own held-out split when no file is given."""
    if heldout_path:
        sequences = encode_documents(read_documents(heldout_path), vocab, config.data.max_len,
                                     config.data.mask_frac).sequences
    else:
        sequences = prepare_data(config, vocab=vocab).heldout
    if not sequences:
        raise DataError(f"Held-out set '{heldout_path or config.data.corpus}' has no usable sequence")
    return canonical_batches(sequences, config.data.batch_size, config.data.max_len)


def _write_report(frame: pd.DataFrame, out_dir: str, name: str, title: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{name}.csv")
    write_csv(frame, csv_path)
    text = frame_to_text(frame, title)
    with open(os.path.join(out_dir, f"{name}.txt"), 'w', encoding='utf-8') as f:
        f.write(text + '\n')
    click.echo(text)
    return csv_path


def register_commands(cli):
    """Attach the lab's subcommands to the top-level click group."""

    @cli.command('pretrain')
    @click.option('--config', 'config_path', required=True, type=click.Path(dir_okay=False),
                  help='JSON run config.')
    @click.option('--resume', 'resume_dir', type=click.Path(file_okay=False), default=None,
                  help='Run directory to continue from its latest checkpoint.')
    @lab_command
    def pretrain_cmd(config_path, resume_dir):
        """Jointly train generator and discriminator as configured."""
        config = load_config(config_path)
        click.echo(f"Pretraining {config.variant.value} ({config.model.preset}) for {config.total_steps} steps")
        result = pretrain(config, run_dir=resume_dir, resume=resume_dir is not None)
        if result.incidents:
            click.secho(f"Incidents: {result.incidents}", fg='yellow')
        click.secho(f"Run finished: {result.run_dir}", fg='green')

    @cli.command('stop')
    @click.argument('run_dir', type=click.Path(file_okay=False))
    @lab_command
    def stop_cmd(run_dir):
        """Ask a running pretrain to checkpoint and exit at its next log step."""
        if request_stop(run_dir):
            click.secho(f"Stop requested for {run_dir}; it halts at its next log step", fg='green')
        else:
            click.secho(f"Run {run_dir} is {read_manifest(run_dir).status}; nothing to stop", fg='yellow')

    @cli.command('analyze')
    @click.argument('which', type=click.Choice(['histogram', 'correlation', 'accuracy']))
    @click.option('--checkpoint', 'checkpoint_path', required=True, type=click.Path(dir_okay=False))
    @click.option('--heldout', 'heldout_path', type=click.Path(dir_okay=False), default=None,
                  help="Held-out text, one document per line (default: the run's own split).")
    @click.option('--scheme', type=click.Choice(['pg', 'ps', 'both']), default='both', show_default=True)
    @click.option('--positions', type=click.Choice(['masked', 'all', 'both']), default='both', show_default=True)
    @click.option('--seed', type=int, default=0, show_default=True)
    @click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None,
                  help='Report directory (default: <checkpoint dir>/analysis).')
    @click.option('--spearman', is_flag=True, help='Rank correlation instead of Pearson.')
    @lab_command
    def analyze_cmd(which, checkpoint_path, heldout_path, scheme, positions, seed, out_dir, spearman):
        """Histogram, loss-estimation correlation or detection accuracy on held-out data."""
        pair, vocab, config, checkpoint = model_from_checkpoint(checkpoint_path)
        batches = _heldout_batches(config, vocab, heldout_path)
        out_dir = out_dir or os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), 'analysis')
        mask_frac, ngram_max = config.data.mask_frac, config.data.ngram_max
        schemes = [Scheme.PG, Scheme.PS] if scheme == 'both' else [Scheme(scheme)]
        if scheme == 'both' and pair.variant is Variant.NONE:
            click.secho("Baseline checkpoint has no sampling head; reporting p_g only", fg='yellow')
            schemes = [Scheme.PG]

        if which == 'histogram':
            frames = [maxprob_histogram(pair, batches, s, mask_frac, ngram_max, seed).frame() for s in schemes]
            path = _write_report(pd.concat(frames, ignore_index=True), out_dir, 'histogram',
                                 f"Max-probability histogram (step {checkpoint.step})")
        elif which == 'correlation':
            max_positions = load_settings().analysis_max_positions
            report = estimation_correlation(pair, batches, mask_frac, ngram_max, seed,
                                            'spearman' if spearman else 'pearson', max_positions)
            path = _write_report(report.frame(), out_dir, 'correlation',
                                 f"Estimated vs actual discriminator loss (step {checkpoint.step})")
        else:
            position_sets = list(PositionSet) if positions == 'both' else [PositionSet(positions)]
            original_rates = {s: sampled_original_rate(pair, batches, s, mask_frac, ngram_max, seed) for s in schemes}
            rows = [
                {'scheme': s.value, 'position_set': p.value,
                 'accuracy': detection_accuracy(pair, batches, s, p, mask_frac, ngram_max, seed),
                 'original_rate': original_rates[s]}
                for s in schemes for p in position_sets
            ]
            path = _write_report(pd.DataFrame(rows), out_dir, 'accuracy',
                                 f"Replaced-token detection accuracy (step {checkpoint.step})")
        click.secho(f"Report written: {path}", fg='green')

    @cli.command('variance-oracle')
    @click.option('--synthetic', is_flag=True, help='Use the --pg/--loss vectors instead of a checkpoint.')
    @click.option('--pg', 'pg_text', default=None, help='Comma-separated p_g, e.g. 0.5,0.3,0.2')
    @click.option('--loss', 'loss_text', default=None, help='Comma-separated discriminator losses.')
    @click.option('--checkpoint', 'checkpoint_path', type=click.Path(dir_okay=False), default=None)
    @click.option('--heldout', 'heldout_path', type=click.Path(dir_okay=False), default=None)
    @click.option('--n-mc', 'n_mc', type=int, default=100000, show_default=True, help='Monte Carlo draws.')
    @click.option('--fit-steps', type=int, default=5000, show_default=True,
                  help='Gradient steps for the proposal-logit fit (synthetic mode).')
    @click.option('--seed', type=int, default=0, show_default=True)
    @click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None)
    @lab_command
    def variance_oracle_cmd(synthetic, pg_text, loss_text, checkpoint_path, heldout_path, n_mc, fit_steps, seed,
                            out_dir):
        """Estimator variance under p_g, the model's p_s and the zero-variance proposal."""
        if n_mc < 2:
            raise ConfigError(f"--n-mc must be at least 2, got {n_mc}")
        if synthetic:
            if not pg_text or not loss_text:
                raise ConfigError("--synthetic needs both --pg and --loss")
            p_g, l_d = _parse_vector(pg_text, 'pg'), _parse_vector(loss_text, 'loss')
            report = synthetic_variance_report(p_g, l_d, n_mc, seed)
            click.echo(f"Z={report.z:.4f} Var_pg={report.var_pg:.4f} Var_opt={max(report.var_oracle, 0.0):.4f}")
            click.echo(f"oracle p_s = [{', '.join(f'{v:.4f}' for v in report.oracle)}]")
            if np.allclose(l_d, l_d[0]):
                click.echo("uniform loss: oracle p_s equals p_g")
            fit = fit_sampling_logits(p_g, l_d, steps=fit_steps)
            click.echo(f"fitted p_s = [{', '.join(f'{v:.4f}' for v in fit.learned)}] "
                       f"KL(oracle||fit)={fit.kl:.3e} after {fit.steps} steps")
            if out_dir:
                _write_report(report.frame(), out_dir, 'variance_synthetic', 'Synthetic variance oracle')
            return

        if not checkpoint_path:
            raise ConfigError("Give --checkpoint (with optional --heldout) or use --synthetic")
        pair, vocab, config, checkpoint = model_from_checkpoint(checkpoint_path)
        batches = _heldout_batches(config, vocab, heldout_path)
        max_positions = load_settings().analysis_max_positions
        frame = variance_report(pair, batches, n_mc, config.data.mask_frac, config.data.ngram_max, seed,
                                max_positions)
        out_dir = out_dir or os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), 'analysis')
        path = _write_report(frame, out_dir, 'variance', f"Estimator variance per position (step {checkpoint.step})")
        click.secho(f"Report written: {path}", fg='green')

    @cli.command('export-plots')
    @click.option('--run-dir', required=True, type=click.Path(exists=True, file_okay=False))
    @click.option('--heldout', 'heldout_path', type=click.Path(dir_okay=False), default=None)
    @click.option('--seed', type=int, default=0, show_default=True)
    @lab_command
    def export_plots_cmd(run_dir, heldout_path, seed):
        """Plot-ready CSVs: max-probability histogram and accuracy over training."""
        plots_dir = os.path.join(run_dir, 'plots')
        checkpoint_path = os.path.join(run_dir, FINAL_CHECKPOINT)
        if not os.path.exists(checkpoint_path):
            checkpoint_path = latest_checkpoint(run_dir)
        if checkpoint_path is None:
            raise DataError(f"No checkpoint in '{run_dir}'")

        pair, vocab, config, checkpoint = model_from_checkpoint(checkpoint_path)
        batches = _heldout_batches(config, vocab, heldout_path)
        schemes = [Scheme.PG] if pair.variant is Variant.NONE else [Scheme.PG, Scheme.PS]
        histogram = pd.concat(
            [maxprob_histogram(pair, batches, s, config.data.mask_frac, config.data.ngram_max, seed).frame()
             for s in schemes],
            ignore_index=True,
        )
        os.makedirs(plots_dir, exist_ok=True)
        write_csv(histogram[['bin', 'fraction', 'scheme']], os.path.join(plots_dir, 'maxprob_histogram.csv'))
        click.echo(f"Wrote {os.path.join(plots_dir, 'maxprob_histogram.csv')}")

        curve_path = os.path.join(run_dir, ACCURACY_FILE)
        if os.path.exists(curve_path):
            curve = pd.read_csv(curve_path)
        else:
            click.secho("No accuracy curve recorded (run.eval_every was 0); exporting the final point only",
                        fg='yellow')
            curve = accuracy_table(pair, batches, config.data.mask_frac, config.data.ngram_max, seed,
                                   step=checkpoint.step)
        write_csv(curve[['step', 'accuracy', 'scheme', 'position_set']],
                  os.path.join(plots_dir, 'accuracy_curve.csv'))
        click.secho(f"Plot data written to {plots_dir}", fg='green')
