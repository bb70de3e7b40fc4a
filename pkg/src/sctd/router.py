"""Token importance, the kept/dropped split, and gather/merge bookkeeping.

Importance is a running mean of the MLM loss observed for each vocabulary id.
Positions that are masked or hold special tokens are always kept; the rest
of the keep quota goes to the highest scoring positions.  Ids never observed
score ``+inf`` so nothing is dropped before the router has evidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import N_SPECIAL, MaskedBatch
from .errors import ConfigError, ContractError, DimensionError, InputError

SCORERS = ("importance", "random")


class ImportanceState:
    """Per-vocab-id running mean of MLM loss plus observation counts."""

    def __init__(self, vocab_size: int, cum_loss=None, counts=None):
        self.vocab_size = int(vocab_size)
        self.cum_loss = np.zeros(vocab_size) if cum_loss is None else np.array(cum_loss, dtype=np.float64)
        self.counts = np.zeros(vocab_size, dtype=np.int64) if counts is None else np.array(counts, dtype=np.int64)
        if self.cum_loss.shape != (vocab_size,) or self.counts.shape != (vocab_size,):
            raise DimensionError("importance arrays must have one entry per vocabulary id")

    def scores(self) -> np.ndarray:
        return np.where(self.counts > 0, self.cum_loss, np.inf)

    def copy(self) -> "ImportanceState":
        return ImportanceState(self.vocab_size, self.cum_loss, self.counts)

    def __eq__(self, other):
        return (
            isinstance(other, ImportanceState)
            and np.array_equal(self.cum_loss, other.cum_loss)
            and np.array_equal(self.counts, other.counts)
        )


def update_importance(state: ImportanceState, token_ids, per_token_loss) -> ImportanceState:
    """Fold observed losses (masked positions only) into the running means."""
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    losses = np.asarray(per_token_loss, dtype=np.float64).reshape(-1)
    if ids.shape != losses.shape:
        raise DimensionError(f"{ids.size} token ids but {losses.size} losses")
    if losses.size and (np.any(losses < 0) or not np.all(np.isfinite(losses))):
        raise InputError("per-token losses must be finite and non-negative")
    if ids.size and (ids.min() < 0 or ids.max() >= state.vocab_size):
        raise InputError("token id outside the vocabulary")
    new = state.copy()
    n = np.bincount(ids, minlength=state.vocab_size)
    s = np.bincount(ids, weights=losses, minlength=state.vocab_size)
    seen = n > 0
    total = new.counts[seen] + n[seen]
    new.cum_loss[seen] = new.cum_loss[seen] + (s[seen] - n[seen] * new.cum_loss[seen]) / total
    new.counts[seen] = total
    return new


@dataclass(frozen=True)
class RoutingPlan:
    """Kept (``group1``) and dropped (``group2``) positions of one sequence."""

    group1: np.ndarray
    group2: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_groups(cls, group1, group2) -> "RoutingPlan":
        g1 = np.sort(np.asarray(group1, dtype=np.int64))
        g2 = np.sort(np.asarray(group2, dtype=np.int64))
        order = np.concatenate([g1, g2])
        if not np.array_equal(np.sort(order), np.arange(order.size)):
            raise ContractError("groups must partition 0..s-1")
        return cls(g1, g2, np.argsort(order, kind="stable"))

    @property
    def length(self) -> int:
        return self.group1.size + self.group2.size


def _quota(keep_ratio: float, n_real: int) -> int:
    # tolerance guards against 0.1 * 30 == 3.0000000000000004
    return int(math.ceil(keep_ratio * n_real - 1e-9))


def make_plan(batch: MaskedBatch, keep_ratio: float, state: Optional[ImportanceState] = None,
              rng: Optional[np.random.Generator] = None, scorer: str = "importance",
              row: int = 0) -> RoutingPlan:
    """Split one row of ``batch`` into kept and dropped positions.

    The kept set always holds every masked and special position; it is
    topped up to ``ceil(keep_ratio * real_length)`` with the highest scoring
    free positions (ties go to the lower position).  Padding is always dropped.
    """
    if not 0.0 < keep_ratio <= 1.0:
        raise ConfigError(f"keep_ratio must lie in (0, 1], got {keep_ratio}")
    if scorer not in SCORERS:
        raise ConfigError(f"unknown scorer {scorer!r}; expected one of {SCORERS}")
    if scorer == "importance" and state is None:
        raise ContractError("importance scoring needs an ImportanceState")
    if scorer == "random" and rng is None:
        raise ContractError("random scoring needs a seeded generator")
    ids = batch.original_ids[row]
    real = batch.attention_mask[row]
    forced = real & (batch.mask_positions[row] | (ids < N_SPECIAL))
    free = real & ~forced
    n_forced = int(forced.sum())
    n_take = max(_quota(keep_ratio, int(real.sum())) - n_forced, 0)

    keep = forced.copy()
    if n_take:
        positions = np.flatnonzero(free)
        if scorer == "importance":
            scores = state.scores()[ids[positions]]
        else:
            scores = rng.random(positions.size)
        order = np.lexsort((positions, -scores))
        keep[positions[order[:n_take]]] = True
    return RoutingPlan.from_groups(np.flatnonzero(keep), np.flatnonzero(~keep))


def make_plans(batch: MaskedBatch, keep_ratio: float, state=None, rng=None,
               scorer: str = "importance") -> List[RoutingPlan]:
    return [make_plan(batch, keep_ratio, state, rng, scorer, row=i) for i in range(batch.shape[0])]


@dataclass(frozen=True)
class BatchPlan:
    """Row plans stacked into fixed-width index arrays for batched compute.

    ``index[b]`` lists the kept positions of row ``b`` followed by filler
    positions taken from the front of its dropped set; ``valid`` is False on
    filler.  Filler rows are computed but masked out as attention keys and
    discarded at the merge.
    """

    index: np.ndarray
    valid: np.ndarray
    plans: tuple

    @classmethod
    def stack(cls, plans: Sequence[RoutingPlan]) -> "BatchPlan":
        width = max(p.group1.size for p in plans)
        index = np.zeros((len(plans), width), dtype=np.int64)
        valid = np.zeros((len(plans), width), dtype=bool)
        for b, p in enumerate(plans):
            k = p.group1.size
            index[b, :k] = p.group1
            index[b, k:] = p.group2[: width - k]
            valid[b, :k] = True
        index.flags.writeable = False
        valid.flags.writeable = False
        return cls(index, valid, tuple(plans))

    @property
    def width(self) -> int:
        return self.index.shape[1]

    def kept_fraction(self, attention_mask) -> float:
        real = np.asarray(attention_mask).sum()
        return float(self.valid.sum() / max(real, 1))


def gather(hidden: T.Tensor, indices) -> T.Tensor:
    """Rows of a ``[s, d]`` tensor at ``indices``."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= hidden.shape[0]):
        raise ContractError(f"gather: indices out of range for {hidden.shape[0]} rows")
    return T.index_select(hidden, indices)


def merge(kept: T.Tensor, frozen: T.Tensor, plan: RoutingPlan) -> T.Tensor:
    """Inverse of the split: rows back in original sequence order."""
    if kept.shape[0] != plan.group1.size or frozen.shape[0] != plan.group2.size:
        raise ContractError(
            f"merge: got {kept.shape[0]} kept / {frozen.shape[0]} frozen rows, plan has "
            f"{plan.group1.size} / {plan.group2.size}"
        )
    if plan.group2.size == 0:
        return kept
    return T.index_select(T.concat([kept, frozen], axis=0), plan.inverse)
