"""Hybrid token-drop / semantic-consistent training loop with AdamW.

Steps are 1-based.  In ``sctd`` mode step ``t`` is a semantic-consistent
(SC) step when ``t % interval == 0``: the batch goes through both the drop
path and the full path from one shared embedding output, and the update
uses the combined objective.  Every other step is a vanilla token-drop step.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .analysis import step_macs
from .checkpoint import read_checkpoint, write_checkpoint
from .config import TrainConfig
from .data import BatchSampler, MaskedBatch, Vocab, build_vocab, encode, fixed_batches, read_corpus
from .errors import ConfigError, ContractError, NonFiniteLossError, NumericError
from .model import Encoder, ModelConfig, masked_labels
from .objectives import LossBundle, is_sc_step, mlm_loss, semantic_constraints, token_losses, total_loss
from .router import BatchPlan, ImportanceState, make_plans, update_importance

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class ScheduleState:
    t: int = 0
    interval: Optional[int] = 10
    weight: float = 0.05

    def __post_init__(self):
        if self.interval is not None and self.interval < 1:
            raise ConfigError("interval must be >= 1")
        if self.weight < 0:
            raise ConfigError("weight must be non-negative")

    def next_is_sc(self) -> bool:
        return is_sc_step(self.t + 1, self.interval)


def lr_at(t: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to ``peak_lr`` at ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and t <= warmup_steps:
        return peak_lr * t / warmup_steps
    if t >= total_steps:
        return 0.0
    return peak_lr * (total_steps - t) / (total_steps - warmup_steps)


class AdamW:
    """Adam with decoupled weight decay; 1-D tensors (biases, norms) are not decayed."""

    def __init__(self, params: Dict[str, T.Tensor], betas=(0.9, 0.999), eps=1e-6, weight_decay=0.01):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def step(self, lr: float):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                update += self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype, copy=False)


def clip_grad_norm(params: Sequence[T.Tensor], max_norm: float) -> float:
    norm = T.parameters_grad_norm(params)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.dtype.type(scale)
    return norm


class Trainer:
    """Owns parameters, optimizer moments, importance state and the step counter."""

    def __init__(self, config: TrainConfig, vocab: Vocab, encoder: Optional[Encoder] = None):
        self.config = config
        self.vocab = vocab
        m, o, s = config.model, config.optimizer, config.schedule
        self.model_config = ModelConfig(vocab_size=len(vocab), n_layers=m.n_layers, d_model=m.d_model,
                                        n_heads=m.n_heads, ffn_dim=m.ffn_dim, max_seq=m.max_seq,
                                        drop_start=m.drop_start, drop_end=m.drop_end,
                                        keep_ratio=m.keep_ratio, dtype=m.dtype, init_std=m.init_std)
        self.encoder = encoder or Encoder(self.model_config, seed=o.seed)
        self.optimizer = AdamW(self.encoder.params, (o.beta1, o.beta2), o.eps, o.weight_decay)
        interval = s.interval if s.mode == "sctd" else None
        self.schedule = ScheduleState(0, interval, s.weight)
        self.importance = ImportanceState(len(vocab))
        self.rng = np.random.default_rng([o.seed, 3])
        self.mode = s.mode

    @property
    def t(self) -> int:
        return self.schedule.t

    def lr(self, t: int) -> float:
        o = self.config.optimizer
        return lr_at(t, o.peak_lr, o.resolved_warmup, o.total_steps)

    # -- one optimizer step ----------------------------------------------
    def _plan(self, batch: MaskedBatch) -> BatchPlan:
        s = self.config.schedule
        return BatchPlan.stack(make_plans(batch, self.model_config.keep_ratio, self.importance,
                                          self.rng, s.scorer))

    def objective(self, batch: MaskedBatch, plan: Optional[BatchPlan], t: int, sc: bool):
        """Loss bundle for a fixed routing plan (``None`` runs the full path only).

        Returns the bundle and the drop-path logits at masked positions.
        """
        enc = self.encoder
        labels = masked_labels(batch)
        if plan is None:
            out = enc.forward_full(batch)
            loss = mlm_loss(enc.masked_logits(out.final, batch), labels)
            return LossBundle(None, loss.item(), None, None, loss.item(), False, loss), None
        x0 = enc.embed(batch)
        drop = enc.forward_with_drop(batch, plan, x0=x0)
        drop_logits = enc.masked_logits(drop.final, batch)
        mlm_drop = mlm_loss(drop_logits, labels)
        if not sc:
            return total_loss(mlm_drop, None, None, None, t, None, self.schedule.weight), drop_logits
        base = enc.forward_full(batch, x0=x0)
        base_logits = enc.masked_logits(base.final, batch)
        mlm_base = mlm_loss(base_logits, labels)
        sc_g, sc_l = semantic_constraints(
            base_logits, drop_logits,
            enc.masked_logits(base.penultimate, batch), enc.masked_logits(drop.penultimate, batch),
            detach_teacher=self.config.schedule.detach_teacher,
        )
        bundle = total_loss(mlm_drop, mlm_base, sc_g, sc_l, t, self.schedule.interval, self.schedule.weight)
        return bundle, drop_logits

    def _losses(self, batch: MaskedBatch, t: int, sc: bool):
        plan = None if self.mode == "baseline" else self._plan(batch)
        bundle, drop_logits = self.objective(batch, plan, t, sc)
        if plan is not None:
            labels = masked_labels(batch)
            self.importance = update_importance(self.importance, labels,
                                                token_losses(drop_logits.data, labels))
        return bundle, plan

    def _abort(self, t: int, reason: str, bundle: Optional[LossBundle] = None):
        diag = {
            "step": t,
            "reason": reason,
            "loss": None if bundle is None else {k: getattr(bundle, k) for k in
                                                 ("mlm_drop", "mlm_base", "sc_g", "sc_l", "total")},
            "grad_norms": {k: float(np.linalg.norm(p.grad)) for k, p in self.encoder.params.items()
                           if p.grad is not None},
        }
        raise NonFiniteLossError(f"non-finite training signal at step {t}: {reason}", diag)

    def train_step(self, batch: MaskedBatch, mode: Optional[str] = None) -> Tuple[LossBundle, dict]:
        """Forward, backward and one AdamW update; advances ``t`` by one."""
        if mode is not None and mode != self.mode:
            raise ContractError(f"trainer runs in {self.mode!r} mode, not {mode!r}")
        if batch.n_masked == 0:
            raise ContractError("batch has no masked positions")
        t = self.schedule.t + 1
        sc = self.mode == "sctd" and is_sc_step(t, self.schedule.interval)
        start = time.perf_counter()
        self.encoder.zero_grad()
        try:
            bundle, plan = self._losses(batch, t, sc)
        except NumericError as exc:
            self._abort(t, f"forward: {exc}")
        if not bundle.finite():
            self._abort(t, "loss is not finite", bundle)
        try:
            bundle.objective.backward()
        except NumericError as exc:
            self._abort(t, f"backward: {exc}", bundle)
        params = self.encoder.parameters()
        grad_norm = clip_grad_norm(params, self.config.optimizer.max_grad_norm)
        if not np.isfinite(grad_norm):
            self._abort(t, "gradient is not finite", bundle)
        lr = self.lr(t)
        self.optimizer.step(lr)
        self.encoder.zero_grad()
        self.schedule.t = t
        elapsed = (time.perf_counter() - start) * 1e3

        B, L = batch.shape
        record = {"t": t, "mode": self._mode_label(sc)}
        if bundle.mlm_drop is not None:
            record["mlm_drop"] = bundle.mlm_drop
        if bundle.mlm_base is not None:
            record["mlm_base"] = bundle.mlm_base
        if sc:
            record["sc_g"] = bundle.sc_g
            record["sc_l"] = bundle.sc_l
        record["total"] = bundle.total
        record["lr"] = lr
        record["step_ms"] = round(elapsed, 3) if self.config.run.record_timing else None
        record["flops_step"] = step_macs(self.model_config, B, L, None if plan is None else plan.width,
                                         batch.n_masked, sc)
        if plan is not None:
            record["keep_frac"] = plan.kept_fraction(batch.attention_mask)
        return bundle, record

    def _mode_label(self, sc: bool) -> str:
        if self.mode == "baseline":
            return "baseline"
        return "sc" if sc else "vanilla"

    def evaluate(self, batches: Sequence[MaskedBatch]) -> float:
        """Full-path MLM loss averaged over masked positions of fixed batches."""
        total, count = 0.0, 0
        with T.no_grad():
            for b in batches:
                out = self.encoder.forward_full(b)
                labels = masked_labels(b)
                loss = mlm_loss(self.encoder.masked_logits(out.final, b), labels)
                total += loss.item() * labels.size
                count += labels.size
        return total / count

    # -- checkpoints -------------------------------------------------------
    def save(self, path) -> None:
        header = {
            "format_version": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "config_fingerprint": self.config.fingerprint(),
            "model_config": self.model_config.to_dict(),
            "vocab": list(self.vocab.tokens),
            "schedule": {"t": self.schedule.t, "interval": self.schedule.interval,
                         "weight": self.schedule.weight},
            "adam_step": self.optimizer.step_count,
            "rng": self.rng.bit_generator.state,
        }
        arrays = {}
        for k, p in self.encoder.params.items():
            arrays["param/" + k] = p.data
        for k in self.encoder.params:
            arrays["adam_m/" + k] = self.optimizer.m[k]
            arrays["adam_v/" + k] = self.optimizer.v[k]
        arrays["importance/cum_loss"] = self.importance.cum_loss
        arrays["importance/counts"] = self.importance.counts
        write_checkpoint(path, header, arrays)

    @classmethod
    def load(cls, path, config: Optional[TrainConfig] = None) -> "Trainer":
        """Restore a trainer; ``config`` (if given) must describe the same trajectory."""
        header, arrays = read_checkpoint(path)
        saved = TrainConfig.from_dict(header["config"])
        if config is None:
            config = saved
        elif config.fingerprint() != header["config_fingerprint"]:
            raise ConfigError(f"{path}: checkpoint was written under a different configuration")
        trainer = cls(config, Vocab(tuple(header["vocab"])))
        trainer.encoder.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
        for k in trainer.encoder.params:
            trainer.optimizer.m[k] = arrays["adam_m/" + k].copy()
            trainer.optimizer.v[k] = arrays["adam_v/" + k].copy()
        trainer.optimizer.step_count = header["adam_step"]
        sched = header["schedule"]
        trainer.schedule = ScheduleState(sched["t"], sched["interval"], sched["weight"])
        trainer.importance = ImportanceState(len(trainer.vocab), arrays["importance/cum_loss"],
                                             arrays["importance/counts"])
        trainer.rng.bit_generator.state = header["rng"]
        return trainer


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    vocab: Vocab
    train: List[List[int]]
    val: List[List[int]]


def prepare_data(config: TrainConfig, lines: Optional[Sequence[str]] = None,
                 val_lines: Optional[Sequence[str]] = None, vocab: Optional[Vocab] = None) -> Dataset:
    """Read, split and encode the corpus; builds the vocabulary from training lines."""
    d = config.data
    if lines is None:
        if d.corpus is None:
            raise ConfigError("data.corpus is not set and no sentences were passed")
        lines = read_corpus(d.corpus)
    lines = list(lines)
    if val_lines is None and d.val_corpus is not None:
        val_lines = read_corpus(d.val_corpus)
    if val_lines is None:
        n_val = int(round(d.val_fraction * len(lines)))
        cut = len(lines) - n_val
        lines, val_lines = lines[:cut], lines[cut:]
    vocab = vocab or build_vocab(lines, d.vocab_size)
    enc = lambda s: encode(s, vocab, d.max_len, pad=False)  # noqa: E731
    return Dataset(vocab, [enc(s) for s in lines], [enc(s) for s in val_lines])


@dataclass
class TrainResult:
    trainer: Trainer
    metrics: List[dict] = field(default_factory=list)
    validation: List[dict] = field(default_factory=list)


def _truncate_jsonl(path: Path, last_t: int):
    if not path.exists():
        return
    keep = [ln for ln in path.read_text(encoding="utf-8").splitlines()
            if ln.strip() and json.loads(ln)["t"] <= last_t]
    path.write_text("".join(ln + "\n" for ln in keep), encoding="utf-8")


def train(config: TrainConfig, dataset: Optional[Dataset] = None, out_dir=None,
          resume=None, stop_at: Optional[int] = None,
          on_step: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run (or resume) training to ``optimizer.total_steps``.

    With ``out_dir`` the metrics stream goes to ``metrics.jsonl``, validation
    records to ``validation.jsonl`` and checkpoints to ``ckpt_<t>.sctd`` plus
    ``final.sctd``.
    """
    if resume is not None:
        trainer = Trainer.load(resume, config)
        if dataset is None:
            dataset = prepare_data(config, vocab=trainer.vocab)
    else:
        dataset = dataset or prepare_data(config)
        trainer = Trainer(config, dataset.vocab)
    if dataset.vocab != trainer.vocab:
        raise ConfigError("dataset vocabulary differs from the trainer's")

    o, d, r = config.optimizer, config.data, config.run
    sampler = BatchSampler(dataset.train, o.batch_size, o.seed, len(dataset.vocab), d.mask_rate, d.sub_split)
    val = fixed_batches(dataset.val, o.batch_size, o.seed, len(dataset.vocab), d.mask_rate)[: r.eval_batches]
    result = TrainResult(trainer)
    last = min(o.total_steps, stop_at) if stop_at is not None else o.total_steps

    metrics_fh = val_fh = None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for name in ("metrics.jsonl", "validation.jsonl"):
            if trainer.t == 0:
                (out / name).unlink(missing_ok=True)
            else:
                _truncate_jsonl(out / name, trainer.t)
        metrics_fh = open(out / "metrics.jsonl", "a", encoding="utf-8")
        val_fh = open(out / "validation.jsonl", "a", encoding="utf-8")

    def validate():
        if not val:
            return
        rec = {"t": trainer.t, "val_mlm": trainer.evaluate(val)}
        result.validation.append(rec)
        logger.info("t=%d val_mlm=%.4f", rec["t"], rec["val_mlm"])
        if val_fh:
            val_fh.write(json.dumps(rec) + "\n")
            val_fh.flush()

    try:
        if trainer.t == 0:
            validate()
        while trainer.t < last:
            batch = sampler.batch(trainer.t + 1)
            try:
                _, record = trainer.train_step(batch)
            except NonFiniteLossError as exc:
                logger.error("%s", exc)
                if out is not None:
                    (out / "abort_dump.json").write_text(json.dumps(exc.diagnostics, indent=2))
                raise
            result.metrics.append(record)
            if metrics_fh:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            if on_step:
                on_step(record)
            t = trainer.t
            if r.eval_interval and (t % r.eval_interval == 0 or t == o.total_steps):
                validate()
            if out is not None and r.checkpoint_every and t % r.checkpoint_every == 0:
                trainer.save(out / f"ckpt_{t}.sctd")
        if out is not None:
            trainer.save(out / "final.sctd")
    finally:
        if metrics_fh:
            metrics_fh.close()
            val_fh.close()
    return result
