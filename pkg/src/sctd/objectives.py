"""MLM cross-entropy, KL semantic constraints and the hybrid objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .data import IGNORE, MaskedBatch
from .errors import ConfigError, ContractError, DimensionError

PROB_FLOOR = 1e-12

Scalar = Union[float, T.Tensor]


@dataclass
class Distribution:
    """Row-normalised probabilities over the vocabulary, one row per position."""

    probs: T.Tensor
    support: np.ndarray

    @classmethod
    def from_logits(cls, logits: T.Tensor, support=None, detach: bool = False) -> "Distribution":
        if detach:
            logits = logits.detach()
        n = logits.shape[0]
        support = np.ones(n, dtype=bool) if support is None else np.asarray(support, dtype=bool)
        return cls(T.softmax(logits, axis=-1), support)


def mlm_loss(logits: T.Tensor, labels, mask_positions=None) -> T.Tensor:
    """Mean negative log-likelihood of the labels at masked positions.

    ``logits`` is ``[..., vocab]`` and ``labels`` matches its leading shape
    with ``IGNORE`` wherever no prediction is scored.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[:-1] != labels.shape:
        raise DimensionError(f"logits {logits.shape} do not match labels {labels.shape}")
    scored = labels != IGNORE
    if mask_positions is not None and not np.array_equal(np.asarray(mask_positions, dtype=bool), scored):
        raise ContractError("mask_positions disagree with the non-IGNORE labels")
    flat = labels.reshape(-1)
    sel = np.flatnonzero(flat != IGNORE)
    if sel.size == 0:
        raise ContractError("mlm_loss needs at least one masked position")
    V = logits.shape[-1]
    z = logits.reshape(-1, V)
    if sel.size != flat.size:
        z = T.index_select(z, sel)
    lp = T.log_softmax(z, axis=-1)
    return -T.mean(T.pick(lp, flat[sel]))


def token_losses(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row cross-entropy values (no graph), for importance bookkeeping."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return np.maximum(lse - z[np.arange(z.shape[0]), labels], 0.0)


def kl_div(teacher: Distribution, student: Distribution, floor: float = PROB_FLOOR) -> T.Tensor:
    """Mean over supported rows of ``sum p_t * (ln p_t - ln p_s)``, i.e. KL(teacher || student).

    Both sides are floored at ``floor`` before the log, so zero teacher
    entries contribute exactly zero.
    """
    if teacher.probs.shape != student.probs.shape:
        raise ContractError(f"kl_div: shapes differ, {teacher.probs.shape} vs {student.probs.shape}")
    if not np.array_equal(teacher.support, student.support):
        raise ContractError("kl_div: teacher and student supports differ")
    rows = np.flatnonzero(teacher.support)
    if rows.size == 0:
        raise ContractError("kl_div: empty support")
    pt, ps = teacher.probs, student.probs
    if rows.size != pt.shape[0]:
        pt, ps = T.index_select(pt, rows), T.index_select(ps, rows)
    log_ratio = T.log(T.clamp_min(pt, floor)) - T.log(T.clamp_min(ps, floor))
    return T.mean(T.sum(pt * log_ratio, axis=-1))


def semantic_constraints(teacher_final: T.Tensor, student_final: T.Tensor,
                         teacher_penult: T.Tensor, student_penult: T.Tensor,
                         detach_teacher: bool = True) -> Tuple[T.Tensor, T.Tensor]:
    """Global (last layer) and local (penultimate) KL terms from head logits."""
    sc_g = kl_div(Distribution.from_logits(teacher_final, detach=detach_teacher),
                  Distribution.from_logits(student_final))
    sc_l = kl_div(Distribution.from_logits(teacher_penult, detach=detach_teacher),
                  Distribution.from_logits(student_penult))
    return sc_g, sc_l


def sc_losses(base_out, drop_out, encoder, batch: MaskedBatch,
              detach_teacher: bool = True) -> Tuple[T.Tensor, T.Tensor]:
    """KL(p(X_l) || p(X~_l)) and KL(p(X_{l-1}) || p(X~_{l-1})) at masked positions.

    The distributions are the MLM head's softmax applied to each hidden state.
    """
    return semantic_constraints(
        encoder.masked_logits(base_out.final, batch),
        encoder.masked_logits(drop_out.final, batch),
        encoder.masked_logits(base_out.penultimate, batch),
        encoder.masked_logits(drop_out.penultimate, batch),
        detach_teacher,
    )


def is_sc_step(t: int, interval: Optional[int]) -> bool:
    """True on the semantic-consistent steps ``t % interval == 0``; ``None`` means never."""
    if interval is None:
        return False
    if interval < 1:
        raise ConfigError(f"interval must be >= 1, got {interval}")
    return t % interval == 0


def _value(x: Optional[Scalar]) -> Optional[float]:
    if x is None:
        return None
    return x.item() if isinstance(x, T.Tensor) else float(x)


@dataclass
class LossBundle:
    mlm_drop: Optional[float]
    mlm_base: Optional[float]
    sc_g: Optional[float]
    sc_l: Optional[float]
    total: float
    is_sc_step: bool
    objective: Optional[T.Tensor] = field(default=None, repr=False, compare=False)

    def finite(self) -> bool:
        vals = [self.mlm_drop, self.mlm_base, self.sc_g, self.sc_l, self.total]
        return all(np.isfinite(v) for v in vals if v is not None)


def total_loss(mlm_drop: Scalar, mlm_base: Optional[Scalar], sc_g: Optional[Scalar],
               sc_l: Optional[Scalar], t: int, interval: Optional[int],
               weight: float) -> LossBundle:
    """Hybrid objective.

    On steps with ``t % interval == 0`` the total is
    ``0.5 * mlm_drop + 0.5 * mlm_base + weight * (sc_g + sc_l)``; otherwise
    it is ``mlm_drop`` alone.
    """
    if interval is not None and interval < 1:
        raise ConfigError(f"interval must be >= 1, got {interval}")
    if t < 1:
        raise ConfigError(f"step index t is 1-based, got {t}")
    if weight < 0:
        raise ConfigError(f"weight must be non-negative, got {weight}")
    sc = is_sc_step(t, interval)
    if sc:
        if mlm_base is None or sc_g is None or sc_l is None:
            raise ContractError(f"step {t} is a semantic-consistent step and needs all four loss parts")
        total = 0.5 * mlm_drop + 0.5 * mlm_base + weight * (sc_g + sc_l)
        return LossBundle(_value(mlm_drop), _value(mlm_base), _value(sc_g), _value(sc_l),
                          _value(total), True,
                          total if isinstance(total, T.Tensor) else None)
    return LossBundle(_value(mlm_drop), None, None, None, _value(mlm_drop), False,
                      mlm_drop if isinstance(mlm_drop, T.Tensor) else None)
