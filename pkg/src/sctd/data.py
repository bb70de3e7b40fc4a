"""Corpus ingestion, vocabulary, encoding and BERT-style masking."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, InputError

SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
N_SPECIAL = len(SPECIALS)
IGNORE = -1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace and split punctuation into its own tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    tokens: tuple
    id_of: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:N_SPECIAL]) != SPECIALS:
            raise InputError("vocabulary must start with the five special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise InputError("vocabulary tokens must be unique")
        object.__setattr__(self, "id_of", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    @property
    def specials(self) -> dict:
        return {t: i for i, t in enumerate(SPECIALS)}

    def lookup(self, token: str) -> int:
        return self.id_of.get(token, UNK_ID)

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocab:
    """Specials first, then tokens by descending frequency (ties: lexicographic)."""
    if max_size < N_SPECIAL + 1:
        raise ConfigError(f"max_size must be at least {N_SPECIAL + 1}, got {max_size}")
    counts: Counter = Counter()
    for line in corpus:
        counts.update(tokenize(line))
    for s in SPECIALS:
        counts.pop(s.lower(), None)
        counts.pop(s, None)
    if not counts:
        raise InputError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - N_SPECIAL]]
    return Vocab(SPECIALS + tuple(kept))


def encode(sentence: str, vocab: Vocab, max_len: int, pad: bool = True) -> List[int]:
    """``[CLS] tokens [SEP]`` then right padding to ``max_len``.

    Over-long sentences lose trailing words, never the closing ``[SEP]``.
    """
    if max_len < 3:
        raise ConfigError(f"max_len must be at least 3, got {max_len}")
    ids = [vocab.lookup(t) for t in tokenize(sentence)][: max_len - 2]
    out = [CLS_ID] + ids + [SEP_ID]
    if pad:
        out += [PAD_ID] * (max_len - len(out))
    return out


def read_corpus(path) -> List[str]:
    """UTF-8 text, one sentence per line; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


@dataclass(frozen=True)
class MaskedBatch:
    """One unit of MLM input.  Arrays are ``[batch, seq]`` and read-only.

    ``attention_mask`` marks real (non-padding) positions.  It is carried
    separately from the ids so the ids at padded positions never matter.
    """

    token_ids: np.ndarray
    labels: np.ndarray
    mask_positions: np.ndarray
    original_ids: np.ndarray
    attention_mask: np.ndarray

    def __post_init__(self):
        shape = self.token_ids.shape
        for name in ("labels", "mask_positions", "original_ids", "attention_mask"):
            if getattr(self, name).shape != shape:
                raise ContractError(f"MaskedBatch.{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in ("token_ids", "labels", "mask_positions", "original_ids", "attention_mask"):
            getattr(self, name).flags.writeable = False

    @property
    def shape(self):
        return self.token_ids.shape

    @property
    def n_masked(self) -> int:
        return int(self.mask_positions.sum())

    @classmethod
    def unmasked(cls, ids, attention_mask=None) -> "MaskedBatch":
        """Wrap plain id rows (no corruption) for inference."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        if attention_mask is None:
            attention_mask = ids != PAD_ID
        return cls(
            token_ids=ids.copy(),
            labels=np.full(ids.shape, IGNORE, dtype=np.int64),
            mask_positions=np.zeros(ids.shape, dtype=bool),
            original_ids=ids.copy(),
            attention_mask=np.asarray(attention_mask, dtype=bool).copy(),
        )


def pad_sequences(seqs: Sequence[Sequence[int]], length: Optional[int] = None) -> np.ndarray:
    """Right-pad id sequences with ``[PAD]`` to ``length`` (default: the longest)."""
    if length is None:
        length = max(len(s) for s in seqs)
    out = np.full((len(seqs), length), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s[:length]
    return out


def apply_masking(
    ids,
    rate: float,
    rng: np.random.Generator,
    vocab_size: int,
    sub_split: bool = True,
) -> MaskedBatch:
    """BERT corruption of id rows (1-D or 2-D).

    Each non-special position is selected independently with probability
    ``rate``.  With ``sub_split`` a selected position becomes ``[MASK]`` 80%
    of the time, a random ordinary token 10% and stays unchanged 10%;
    without it every selected position becomes ``[MASK]``.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"mask rate must lie in [0, 1], got {rate}")
    original = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    eligible = original >= N_SPECIAL
    # fixed draw order keeps the corruption a pure function of the seed
    select = (rng.random(original.shape) < rate) & eligible
    action = rng.random(original.shape)
    n_ordinary = max(vocab_size - N_SPECIAL, 1)
    random_ids = rng.integers(N_SPECIAL, N_SPECIAL + n_ordinary, size=original.shape)

    corrupted = original.copy()
    if sub_split:
        to_mask = select & (action < 0.8)
        to_random = select & (action >= 0.8) & (action < 0.9)
        corrupted[to_mask] = MASK_ID
        corrupted[to_random] = random_ids[to_random]
    else:
        corrupted[select] = MASK_ID
    labels = np.where(select, original, IGNORE)
    return MaskedBatch(
        token_ids=corrupted,
        labels=labels,
        mask_positions=select,
        original_ids=original,
        attention_mask=original != PAD_ID,
    )


def collate(rows: Sequence[MaskedBatch]) -> MaskedBatch:
    """Stack single-row batches, padding to the longest real length."""
    length = max(int(r.attention_mask.sum(axis=1).max()) for r in rows)

    def stack(name, fill):
        parts = []
        for r in rows:
            a = getattr(r, name)
            width = min(a.shape[1], length)
            block = np.full((a.shape[0], length), fill, dtype=a.dtype)
            block[:, :width] = a[:, :width]
            parts.append(block)
        return np.concatenate(parts, axis=0)

    return MaskedBatch(
        token_ids=stack("token_ids", PAD_ID),
        labels=stack("labels", IGNORE),
        mask_positions=stack("mask_positions", False),
        original_ids=stack("original_ids", PAD_ID),
        attention_mask=stack("attention_mask", False),
    )


class BatchSampler:
    """Deterministic batches: the batch for step ``t`` is a pure function of ``(seed, t)``.

    Sentences are visited in a fresh seeded permutation every epoch.  Each
    batch is padded only to its own longest sentence.
    """

    max_remask = 64

    def __init__(self, sequences: Sequence[Sequence[int]], batch_size: int, seed: int,
                 vocab_size: int, mask_rate: float = 0.15, sub_split: bool = True):
        if not sequences:
            raise InputError("no training sequences")
        if batch_size < 1:
            raise ConfigError("batch_size must be positive")
        self.sequences = [np.asarray(s, dtype=np.int64) for s in sequences]
        self.batch_size = batch_size
        self.seed = int(seed)
        self.vocab_size = vocab_size
        self.mask_rate = mask_rate
        self.sub_split = sub_split
        self._perm_cache = {}

    def _perm(self, epoch: int) -> np.ndarray:
        perm = self._perm_cache.get(epoch)
        if perm is None:
            perm = np.random.default_rng([self.seed, 0, epoch]).permutation(len(self.sequences))
            self._perm_cache = {epoch: perm}
        return perm

    def indices(self, t: int) -> List[int]:
        if t < 1:
            raise InputError(f"steps are 1-based, got t={t}")
        n = len(self.sequences)
        start = (t - 1) * self.batch_size
        out = []
        for k in range(start, start + self.batch_size):
            epoch, pos = divmod(k, n)
            out.append(int(self._perm(epoch)[pos]))
        return out

    def batch(self, t: int) -> MaskedBatch:
        """Masked batch for 1-based step ``t``; re-masks with a new sub-seed if nothing got selected."""
        ids = pad_sequences([self.sequences[i] for i in self.indices(t)])
        return mask_with_retry(ids, self.mask_rate, [self.seed, 1, t], self.vocab_size,
                               self.sub_split, self.max_remask)


def mask_with_retry(ids, rate, seed_key, vocab_size, sub_split=True, max_remask=64) -> MaskedBatch:
    for sub in range(max_remask):
        rng = np.random.default_rng(list(seed_key) + [sub])
        batch = apply_masking(ids, rate, rng, vocab_size, sub_split)
        if batch.n_masked > 0:
            return batch
    raise InputError("could not select any masked position; batch has no maskable tokens or rate is 0")


def fixed_batches(sequences, batch_size: int, seed: int, vocab_size: int,
                  mask_rate: float = 0.15) -> List[MaskedBatch]:
    """Validation batches with a frozen corruption, in corpus order."""
    out = []
    for i, start in enumerate(range(0, len(sequences), batch_size)):
        ids = pad_sequences(sequences[start : start + batch_size])
        out.append(mask_with_retry(ids, mask_rate, [seed, 2, i], vocab_size))
    return out
