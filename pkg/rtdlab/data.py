"""
Corpus ingestion, vocabulary, MLM masking and deterministic batching.

Positions are 0-based indices into the token array; no CLS/SEP framing is added,
so a sequence of n tokens has maskable positions 0..n-1.
"""
import logging
import itertools
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractViolation, DataError, DegenerateSequenceError
from .helpers import detokenize, iter_documents, tokenize
from .rng import RngState, Stream

logger = logging.getLogger(__name__)

SPECIAL_TOKENS = ('[PAD]', '[UNK]', '[MASK]', '[CLS]', '[SEP]')
PAD, UNK, MASK, CLS, SEP = range(len(SPECIAL_TOKENS))
# never proposed as a replacement; UNK stays samplable since it stands for real surface forms
NON_SAMPLABLE_IDS = (PAD, MASK, CLS, SEP)

_HEADER_PREFIX = '#special '


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError("Vocabulary must start with the special tokens in their fixed order")
        self.itos: List[str] = list(tokens)
        self.stoi = {token: i for i, token in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("Vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token: str):
        return token in self.stoi

    def id_of(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.id_of(t) for t in tokenize(text)], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        return detokenize(self.itos[int(i)] for i in ids if int(i) != PAD)

    def save(self, path) -> None:
        with open(path, 'w', encoding='utf-8') as f:
            for i, special in enumerate(SPECIAL_TOKENS):
                f.write(f"{_HEADER_PREFIX}{i} {special}\n")
            for token in self.itos[len(SPECIAL_TOKENS):]:
                f.write(f"{token}\n")

    @classmethod
    def load(cls, path) -> 'Vocab':
        try:
            with open(path, encoding='utf-8') as f:
                lines = f.read().split('\n')
        except OSError as e:
            raise DataError(f"Cannot read vocabulary file '{path}': {e}") from e
        if lines and lines[-1] == '':
            lines.pop()
        header = lines[:len(SPECIAL_TOKENS)]
        if len(header) < len(SPECIAL_TOKENS) or not all(line.startswith(_HEADER_PREFIX) for line in header):
            raise DataError(f"Vocabulary file '{path}' is missing its special-token header")
        return cls(list(SPECIAL_TOKENS) + lines[len(SPECIAL_TOKENS):])


def build_vocab(corpus: Iterable[str], max_size: int, min_freq: int = 1) -> Vocab:
    """Frequency-ranked vocabulary (ties broken lexicographically) capped at `max_size` ids, specials included."""
    if max_size <= len(SPECIAL_TOKENS):
        raise ContractViolation(f"max_size must exceed the {len(SPECIAL_TOKENS)} special tokens, got {max_size}")
    counts = Counter()
    documents = 0
    for doc in iter_documents(corpus):
        counts.update(tokenize(doc))
        documents += 1
    if not counts:
        raise DataError("Cannot build a vocabulary from an empty corpus")
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    ranked = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    kept = ranked[:max_size - len(SPECIAL_TOKENS)]
    logger.info(f"Built vocabulary from {documents} documents: {len(counts)} types, kept {len(kept)}")
    return Vocab(list(SPECIAL_TOKENS) + kept)


# -- masking ---------------------------------------------------------------------------------------

@dataclass
class MaskedExample:
    x: np.ndarray
    positions: np.ndarray
    corrupted: np.ndarray
    replaced: Optional[np.ndarray] = None

    @property
    def masked_index(self):
        return (self.positions,)


def mask_count(n: int, mask_frac: float) -> int:
    # rounding first keeps 0.15 * 20 at exactly 3
    return int(math.ceil(round(mask_frac * n, 9)))


def span_length_weights(ngram_max: int) -> np.ndarray:
    """P(l) proportional to 1/l for l = 1..ngram_max."""
    if ngram_max < 1:
        raise ContractViolation(f"ngram_max must be >= 1, got {ngram_max}")
    weights = 1.0 / np.arange(1, ngram_max + 1)
    return weights / weights.sum()


def sample_span_lengths(ngram_max: int, size: int, rng: np.random.Generator) -> np.ndarray:
    weights = span_length_weights(ngram_max)
    return rng.choice(np.arange(1, ngram_max + 1), size=size, p=weights)


def _ngram_positions(n: int, k: int, ngram_max: int, rng: np.random.Generator) -> np.ndarray:
    covered = np.zeros(n, dtype=bool)
    remaining = k
    attempts = 0
    while remaining > 0:
        attempts += 1
        if attempts > 100 * n:
            # fragmented free space: finish with single tokens
            free = np.flatnonzero(~covered)
            covered[rng.choice(free, size=remaining, replace=False)] = True
            break
        length = min(int(sample_span_lengths(ngram_max, 1, rng)[0]), remaining)
        start = int(rng.integers(0, n - length + 1))
        if covered[start:start + length].any():
            continue
        covered[start:start + length] = True
        remaining -= length
    return np.flatnonzero(covered)


def mask_sequence(x, mask_frac: float, ngram_max: int, rng: np.random.Generator) -> MaskedExample:
    x = np.asarray(x, dtype=np.int64)
    n = x.shape[0]
    if n < 1:
        raise ContractViolation("cannot mask an empty sequence")
    if not 0.0 < mask_frac < 1.0:
        raise ContractViolation(f"mask_frac must be in (0, 1), got {mask_frac}")
    if ngram_max < 1:
        raise ContractViolation(f"ngram_max must be >= 1, got {ngram_max}")
    k = mask_count(n, mask_frac)
    if k >= n:
        raise DegenerateSequenceError(f"sequence of {n} tokens is too short to mask {k} positions")
    if ngram_max == 1:
        positions = np.sort(rng.choice(n, size=k, replace=False))
    else:
        positions = _ngram_positions(n, k, ngram_max, rng)
    corrupted = x.copy()
    corrupted[positions] = MASK
    return MaskedExample(x=x, positions=positions.astype(np.int64), corrupted=corrupted)


# -- batching --------------------------------------------------------------------------------------

@dataclass
class Batch:
    ids: np.ndarray
    attention_mask: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return self.ids.shape[0]


@dataclass
class MaskedBatch:
    """A padded batch after masking; (rows, cols) enumerate masked positions in row-major order."""
    x: np.ndarray
    corrupted: np.ndarray
    attention_mask: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    replaced: Optional[np.ndarray] = None

    @property
    def masked_index(self):
        return self.rows, self.cols

    @property
    def is_masked(self) -> np.ndarray:
        flags = np.zeros(self.x.shape, dtype=bool)
        flags[self.rows, self.cols] = True
        return flags

    @property
    def masked_targets(self) -> np.ndarray:
        return self.x[self.rows, self.cols]


def pad_sequences(sequences: Sequence[np.ndarray], max_len: int):
    width = min(max_len, max(len(s) for s in sequences))
    ids = np.full((len(sequences), width), PAD, dtype=np.int64)
    attention_mask = np.zeros((len(sequences), width), dtype=bool)
    for i, seq in enumerate(sequences):
        seq = np.asarray(seq, dtype=np.int64)[:max_len]
        ids[i, :len(seq)] = seq
        attention_mask[i, :len(seq)] = True
    return ids, attention_mask


def make_batches(examples: Sequence[np.ndarray], batch_size: int, max_len: int,
                 rng: np.random.Generator) -> Iterator[Batch]:
    """Shuffle example indices once with `rng`, then yield padded batches in that order."""
    if batch_size < 1:
        raise ContractViolation(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        chosen = order[start:start + batch_size]
        ids, attention_mask = pad_sequences([examples[i] for i in chosen], max_len)
        yield Batch(ids=ids, attention_mask=attention_mask, indices=chosen)


def batches_per_epoch(n_examples: int, batch_size: int) -> int:
    return max(1, math.ceil(n_examples / batch_size))


def training_batches(examples: Sequence[np.ndarray], start_step: int, batch_size: int, max_len: int,
                     seed: int) -> Iterator[Tuple[int, Batch]]:
    """
    Endless (step, batch) stream starting at `start_step`.

    Epoch e goes through `make_batches` shuffled by the (seed, e) stream, so the batch
    at any step is the same whether the run started at 0 or resumed mid-epoch.
    """
    if not examples:
        raise DataError("No training sequences available")
    epoch, offset = divmod(start_step, batches_per_epoch(len(examples), batch_size))
    step = start_step
    while True:
        epoch_rng = RngState(seed, Stream.SHUFFLE).at(epoch)
        for batch in itertools.islice(make_batches(examples, batch_size, max_len, epoch_rng), offset, None):
            yield step, batch
            step += 1
        epoch, offset = epoch + 1, 0


def batch_for_step(examples: Sequence[np.ndarray], step: int, batch_size: int, max_len: int, seed: int) -> Batch:
    """The batch consumed at `step`."""
    if not examples:
        raise DataError("No training sequences available")
    return next(training_batches(examples, step, batch_size, max_len, seed))[1]


def mask_batch(batch: Batch, mask_frac: float, ngram_max: int, rng: np.random.Generator) -> MaskedBatch:
    rows, cols = [], []
    corrupted = batch.ids.copy()
    for i in range(len(batch)):
        n = int(batch.attention_mask[i].sum())
        example = mask_sequence(batch.ids[i, :n], mask_frac, ngram_max, rng)
        corrupted[i, :n] = example.corrupted
        rows.append(np.full(example.positions.shape, i, dtype=np.int64))
        cols.append(example.positions)
    return MaskedBatch(
        x=batch.ids,
        corrupted=corrupted,
        attention_mask=batch.attention_mask,
        rows=np.concatenate(rows),
        cols=np.concatenate(cols),
    )


# -- corpus ----------------------------------------------------------------------------------------

def read_documents(path) -> List[str]:
    if not path or not os.path.exists(path):
        raise DataError(f"Corpus file not found: '{path}'")
    try:
        with open(path, encoding='utf-8') as f:
            documents = list(iter_documents(f))
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"Cannot read corpus '{path}': {e}") from e
    if not documents:
        raise DataError(f"Corpus '{path}' contains no documents")
    return documents


@dataclass
class EncodedCorpus:
    sequences: List[np.ndarray] = field(default_factory=list)
    skipped: int = 0

    def __len__(self):
        return len(self.sequences)


def encode_documents(documents: Iterable[str], vocab: Vocab, max_len: int, mask_frac: float) -> EncodedCorpus:
    """Encode and truncate; sequences too short to mask are skipped and counted."""
    corpus = EncodedCorpus()
    for doc in documents:
        ids = vocab.encode(doc)[:max_len]
        if len(ids) == 0 or mask_count(len(ids), mask_frac) >= len(ids):
            corpus.skipped += 1
            continue
        corpus.sequences.append(ids)
    if corpus.skipped:
        logger.warning(f"Skipped {corpus.skipped} sequences too short to mask")
    return corpus


def split_heldout(documents: Sequence[str], fraction: float, seed: int):
    """Deterministic train/held-out split of documents."""
    if not 0.0 <= fraction < 1.0:
        raise ContractViolation(f"heldout fraction must be in [0, 1), got {fraction}")
    n_heldout = int(round(len(documents) * fraction))
    order = RngState(seed, Stream.SPLIT).at(0).permutation(len(documents))
    heldout = set(order[:n_heldout].tolist())
    train = [d for i, d in enumerate(documents) if i not in heldout]
    held = [d for i, d in enumerate(documents) if i in heldout]
    return train, held
