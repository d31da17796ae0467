"""
Joint pretraining: mask -> generator -> propose and sample -> discriminator -> losses -> Adam.

Every random draw of step s comes from a counter-based stream keyed by (seed, s), so a
run resumed from a checkpoint continues exactly as the uninterrupted run would.
"""
import glob
import logging
import os
import re
import time
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .analysis import accuracy_table, canonical_batches
from .checkpoint import load_checkpoint, restore_optimizer, restore_parameters, save_checkpoint
from .config import Settings, TrainConfig, config_hash, load_settings
from .data import (
    Batch, Vocab, build_vocab, encode_documents, mask_batch, read_documents, split_heldout, training_batches,
)
from .errors import DataError, NumericFault
from .helpers import write_csv
from .job_utils import (
    JobStatus, RunManifest, check_run_should_stop, cleanup_run_state, create_run_dir, update_run_heartbeat,
    utc_now, write_manifest,
)
from .losses import (
    combined_objective, discriminator_loss, focal_loss, sampling_head_loss_hpdist, sampling_head_loss_hploss,
)
from .models import ModelPair, Variant, discriminator_forward, generator_forward, init_models
from .optim import AdamState, adam_step, lr_at
from .rng import RngState, Stream
from .sampling import (
    SamplingDecision, decisions_frame, proposal_distributions, samplable_logit_bias, sample_replacements,
)
from .tensor import backward, checked_mode, set_default_dtype

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.csv'
ACCURACY_FILE = 'accuracy_curve.csv'
TRACES_FILE = 'traces.csv'
FINAL_CHECKPOINT = 'final.ckpt'
CHECKPOINT_PATTERN = re.compile(r'ckpt_step_(\d+)\.ckpt$')


@dataclass
class StepMetrics:
    step: int
    l_g: float
    l_s: float
    l_d: float
    total: float
    mlm_acc: float
    disc_acc_masked: float
    disc_acc_all: float
    original_fraction: float
    lr: float
    wall_clock: float = 0.0


# wall_clock varies between identical runs, so the metrics log leaves it out
METRIC_COLUMNS = ['step', 'l_g', 'l_s', 'l_d', 'total', 'mlm_acc', 'disc_acc_masked', 'disc_acc_all',
                  'original_fraction', 'lr']


def step_streams(seed: int, step: int):
    return (RngState(seed, Stream.MASKING).at(step), RngState(seed, Stream.SAMPLING).at(step),
            RngState(seed, Stream.DROPOUT).at(step))


def train_step(batch: Batch, pair: ModelPair, adam: AdamState, config: TrainConfig, step: int,
               decisions_out: List[SamplingDecision] = None, incidents: Counter = None) -> StepMetrics:
    """One full generator/discriminator update on `batch`; exactly one Adam step over all parameters."""
    started = time.perf_counter()
    data_cfg, objective = config.data, config.objective
    mask_rng, sample_rng, dropout_rng = step_streams(config.seed, step)
    if pair.config.dropout <= 0:
        dropout_rng = None

    masked = mask_batch(batch, data_cfg.mask_frac, data_cfg.ngram_max, mask_rng)
    rows, cols = masked.masked_index
    targets = masked.masked_targets
    picks = np.arange(targets.shape[0])

    gen = generator_forward(pair, masked.corrupted, rows, cols, masked.attention_mask, dropout_rng)
    log_p_true = gen.mlm_logits.log_softmax(axis=-1)[picks, targets]
    l_g = focal_loss(log_p=log_p_true, spec=objective.focal,
                     differentiate_factor=objective.differentiate_focal_factor)

    use_head = pair.variant is not Variant.NONE and step >= objective.sampling_delay
    proposals = proposal_distributions(gen, targets, use_sampling_head=use_head)
    replaced, decisions = sample_replacements(masked, proposals.p_s, sample_rng, p_g=proposals.p_g,
                                              p_s=proposals.p_s, l_hat=proposals.l_hat)
    if decisions_out is not None:
        decisions_out.extend(decisions)

    disc = discriminator_forward(pair, replaced, masked.attention_mask, dropout_rng)
    is_original = replaced == masked.x
    l_d = discriminator_loss(disc.probs, is_original, masked.attention_mask)

    sampled = replaced[rows, cols]
    d_at_sampled = disc.probs.data[rows, cols]
    l_s = None
    if use_head and pair.variant is Variant.HP_LOSS:
        d_hat = gen.sampling_logits[picks, sampled].sigmoid()
        l_s = sampling_head_loss_hploss(d_hat, d_at_sampled)
    elif use_head and pair.variant is Variant.HP_DIST:
        logits = gen.sampling_logits
        log_ps = (logits + samplable_logit_bias(logits.shape[-1], logits.data.dtype)).log_softmax(axis=-1)
        flags = is_original[rows, cols]
        clipped = np.clip(d_at_sampled, 1e-6, 1.0 - 1e-6)
        l_d_sampled = np.where(flags, -np.log(clipped), -np.log1p(-clipped))
        l_s = sampling_head_loss_hpdist(log_ps[picks, sampled], proposals.p_g[picks, sampled],
                                        proposals.p_s[picks, sampled], l_d_sampled, incidents)

    lambda1 = config.lambda1 if use_head else 0.0
    bundle = combined_objective(l_g, l_s, l_d, lambda1, config.lambda2, pair.variant)

    named = pair.named_parameters()
    backward(bundle.objective, named.values())
    lr = lr_at(step, config.optim.peak_lr, config.optim.warmup_steps, config.total_steps)
    adam_step(named, {name: p.grad for name, p in named.items()}, adam, lr)

    predicted_original = disc.probs.data >= 0.5
    correct = predicted_original == is_original
    valid = masked.attention_mask
    return StepMetrics(
        step=step,
        l_g=bundle.l_g,
        l_s=bundle.l_s,
        l_d=bundle.l_d,
        total=bundle.total,
        mlm_acc=float((gen.mlm_logits.data.argmax(axis=-1) == targets).mean()),
        disc_acc_masked=float(correct[rows, cols].mean()),
        disc_acc_all=float(correct[valid].mean()),
        original_fraction=float((sampled == targets).mean()),
        lr=lr,
        wall_clock=time.perf_counter() - started,
    )


# -- run loop --------------------------------------------------------------------------------------

@dataclass
class PreparedData:
    vocab: Vocab
    train: List[np.ndarray]
    heldout: List[np.ndarray]


def prepare_data(config: TrainConfig, documents: Sequence[str] = None, vocab: Vocab = None) -> PreparedData:
    data_cfg = config.data
    documents = list(documents) if documents is not None else read_documents(data_cfg.corpus)
    if data_cfg.heldout:
        train_docs, heldout_docs = documents, read_documents(data_cfg.heldout)
    else:
        train_docs, heldout_docs = split_heldout(documents, data_cfg.heldout_fraction, config.seed)
    if vocab is None:
        vocab = build_vocab(train_docs, data_cfg.vocab_size, data_cfg.min_freq)
    train = encode_documents(train_docs, vocab, data_cfg.max_len, data_cfg.mask_frac)
    heldout = encode_documents(heldout_docs, vocab, data_cfg.max_len, data_cfg.mask_frac)
    if not train.sequences:
        raise DataError(f"Corpus '{data_cfg.corpus}' has no sequence long enough to mask")
    logger.info(f"Prepared {len(train)} training and {len(heldout)} held-out sequences (vocab {len(vocab)})")
    return PreparedData(vocab=vocab, train=train.sequences, heldout=heldout.sequences)


def checkpoint_path(run_dir: str, step: int) -> str:
    return os.path.join(run_dir, f"ckpt_step_{step:08d}.ckpt")


def latest_checkpoint(run_dir: str) -> Optional[str]:
    found = []
    for path in glob.glob(os.path.join(run_dir, 'ckpt_step_*.ckpt')):
        match = CHECKPOINT_PATTERN.search(path)
        if match:
            found.append((int(match.group(1)), path))
    return max(found)[1] if found else None


def _append_rows(path: str, frame: pd.DataFrame) -> None:
    if frame.empty:
        return
    if os.path.exists(path):
        frame = pd.concat([pd.read_csv(path), frame], ignore_index=True)
    write_csv(frame, path)


def _truncate_log(path: str, start_step: int) -> None:
    """Drop rows at or beyond `start_step`, written after the checkpoint being resumed."""
    if os.path.exists(path):
        frame = pd.read_csv(path)
        write_csv(frame[frame['step'] < start_step], path)


@dataclass
class PretrainResult:
    run_dir: str
    final_checkpoint: str
    metrics: pd.DataFrame
    incidents: Dict[str, int]


class _Buffers:
    def __init__(self, run_dir: str):
        self.run_dir = run_dir
        self.metrics: List[Dict] = []
        self.traces: List[pd.DataFrame] = []
        self.accuracy: List[pd.DataFrame] = []

    def flush(self) -> None:
        _append_rows(os.path.join(self.run_dir, METRICS_FILE), pd.DataFrame(self.metrics, columns=METRIC_COLUMNS))
        if self.traces:
            _append_rows(os.path.join(self.run_dir, TRACES_FILE), pd.concat(self.traces, ignore_index=True))
        if self.accuracy:
            _append_rows(os.path.join(self.run_dir, ACCURACY_FILE), pd.concat(self.accuracy, ignore_index=True))
        self.metrics, self.traces, self.accuracy = [], [], []


def pretrain(config: TrainConfig, corpus: Sequence[str] = None, run_dir: str = None, resume: bool = False,
             settings: Settings = None) -> PretrainResult:
    """
    Train for `config.total_steps` steps, checkpointing every `checkpoint_every` steps.

    With `resume`, `run_dir` must hold a checkpoint written under the same config hash;
    training restarts from its step and the logs are cut back to match.
    """
    settings = settings or load_settings()
    digest = config_hash(config)
    set_default_dtype(config.dtype)
    checked = settings.checked if config.checked is None else config.checked

    start_step, checkpoint = 0, None
    if resume:
        if not run_dir or not os.path.isdir(run_dir):
            raise DataError(f"Run directory to resume not found: '{run_dir}'")
        latest = latest_checkpoint(run_dir)
        if latest is None:
            raise DataError(f"No checkpoint to resume in '{run_dir}'")
        checkpoint = load_checkpoint(latest, expected_hash=digest)
        start_step = checkpoint.step
        for name in (METRICS_FILE, TRACES_FILE, ACCURACY_FILE):
            _truncate_log(os.path.join(run_dir, name), start_step)
        logger.info(f"Resuming run {run_dir} from step {start_step}")

    prepared = prepare_data(config, corpus, Vocab(checkpoint.vocab) if checkpoint and checkpoint.vocab else None)
    if not resume:
        run_dir = run_dir or create_run_dir(settings.runs_dir, digest)
        os.makedirs(run_dir, exist_ok=True)
    pair = init_models(config.model, len(prepared.vocab), RngState(config.seed, Stream.INIT).at(0))
    adam = AdamState(beta1=config.optim.beta1, beta2=config.optim.beta2, eps=config.optim.eps)
    if checkpoint is not None:
        restore_parameters(pair, checkpoint)
        adam = restore_optimizer(checkpoint)
    prepared.vocab.save(os.path.join(run_dir, 'vocab.txt'))

    now = utc_now().isoformat()
    write_manifest(run_dir, RunManifest(
        config_hash=digest, seed=config.seed, preset=config.model.preset, variant=config.variant.value,
        start_step=start_step, end_step=start_step, status=JobStatus.RUNNING.value, created_at=now,
        last_updated=now, artifacts={'vocab': 'vocab.txt', 'metrics': METRICS_FILE},
    ))
    heldout_batches = []
    if config.eval_every and prepared.heldout:
        heldout_batches = canonical_batches(prepared.heldout, config.data.batch_size,
                                            config.data.max_len)[:config.eval_batches]

    buffers = _Buffers(run_dir)
    incidents = Counter(checkpoint.extra.get('incidents', {})) if checkpoint is not None else Counter()
    batches = training_batches(prepared.train, start_step, config.data.batch_size, config.data.max_len, config.seed)
    step = start_step
    try:
        with checked_mode(checked):
            while step < config.total_steps:
                _, batch = next(batches)
                trace = [] if config.trace_every and step % config.trace_every == 0 else None
                metrics = train_step(batch, pair, adam, config, step, trace, incidents)
                buffers.metrics.append({k: v for k, v in asdict(metrics).items() if k in METRIC_COLUMNS})
                if trace is not None:
                    buffers.traces.append(decisions_frame(trace, step))
                step += 1

                if config.log_every and step % config.log_every == 0:
                    logger.info(
                        f"step {step}/{config.total_steps} total={metrics.total:.4f} l_g={metrics.l_g:.4f} "
                        f"l_s={metrics.l_s:.4f} l_d={metrics.l_d:.4f} disc_acc={metrics.disc_acc_all:.3f} "
                        f"lr={metrics.lr:.2e} ({metrics.wall_clock:.2f}s/step)"
                    )
                    update_run_heartbeat(run_dir, step)
                if heldout_batches and step % config.eval_every == 0:
                    buffers.accuracy.append(accuracy_table(pair, heldout_batches, config.data.mask_frac,
                                                           config.data.ngram_max, config.seed, step))
                stop = config.log_every and step % config.log_every == 0 and check_run_should_stop(run_dir)
                if (config.checkpoint_every and step % config.checkpoint_every == 0) or stop:
                    buffers.flush()
                    save_checkpoint(pair, adam, step, checkpoint_path(run_dir, step), config,
                                    prepared.vocab.itos, {'incidents': dict(incidents)})
                if stop:
                    logger.info(f"Stop requested; run {run_dir} halted at step {step}")
                    cleanup_run_state(run_dir, JobStatus.IDLE)
                    break
    except NumericFault as e:
        logger.error(f"Numeric fault at step {step}: {e}")
        buffers.flush()
        fault_path = os.path.join(run_dir, f"fault_step_{step}.ckpt")
        save_checkpoint(pair, adam, step, fault_path, config, prepared.vocab.itos, {'incidents': dict(incidents)})
        cleanup_run_state(run_dir, JobStatus.FAILED, str(e), {'fault': os.path.basename(fault_path)})
        raise
    except Exception as e:
        buffers.flush()
        cleanup_run_state(run_dir, JobStatus.FAILED, str(e))
        raise

    buffers.flush()
    final_path = os.path.join(run_dir, FINAL_CHECKPOINT)
    if step >= config.total_steps:
        save_checkpoint(pair, adam, step, final_path, config, prepared.vocab.itos, {'incidents': dict(incidents)})
        artifacts = {'final_checkpoint': FINAL_CHECKPOINT}
        if heldout_batches:
            artifacts['accuracy_curve'] = ACCURACY_FILE
        if config.trace_every:
            artifacts['traces'] = TRACES_FILE
        update_run_heartbeat(run_dir, step)
        cleanup_run_state(run_dir, JobStatus.COMPLETED, artifacts=artifacts)
    if incidents:
        logger.warning(f"Run finished with incidents: {dict(incidents)}")
    metrics_path = os.path.join(run_dir, METRICS_FILE)
    metrics = pd.read_csv(metrics_path) if os.path.exists(metrics_path) else pd.DataFrame(columns=METRIC_COLUMNS)
    return PretrainResult(run_dir=run_dir, final_checkpoint=final_path, metrics=metrics, incidents=dict(incidents))
