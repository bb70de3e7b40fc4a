"""Diagnostics: multiply-accumulate accounting, semantic drift and layer probing.

MAC convention: one multiply plus one add counts as one MAC.  Reports are in
MACs, not ``2 * FLOPs``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import MASK_ID, N_SPECIAL, PAD_ID, MaskedBatch, encode, pad_sequences
from .errors import ConfigError, InputError, NumericError
from .model import Encoder, ModelConfig

CORRUPTIONS = ("none", "mask", "drop")


# ---------------------------------------------------------------------------
# MAC accounting
# ---------------------------------------------------------------------------


def _ceil(x: float) -> int:
    return int(math.ceil(x - 1e-9))


@dataclass
class LayerCost:
    layer: int
    tokens: int
    qkvo: int
    scores: int
    context: int
    ffn: int

    @property
    def total(self) -> int:
        return self.qkvo + self.scores + self.context + self.ffn


def layer_cost(layer: int, n: int, d: int, ffn_dim: int) -> LayerCost:
    """MACs of one encoder block over ``n`` active tokens."""
    return LayerCost(
        layer=layer,
        tokens=n,
        qkvo=4 * n * d * d,
        scores=n * n * d,
        context=n * n * d,
        ffn=2 * n * d * ffn_dim,
    )


def head_cost(n_pred: int, d: int, vocab_size: int) -> int:
    return n_pred * (d * d + d * vocab_size)


def embedding_cost(n: int, d: int) -> int:
    # token + position sum: one accumulate per element
    return n * d


def path_layer_costs(config: ModelConfig, seq_len: int, kept: Optional[int]) -> List[LayerCost]:
    """Per-layer costs; ``kept=None`` is the full-sequence path."""
    out = []
    for i in range(1, config.n_layers + 1):
        n = kept if (kept is not None and config.is_dropped(i)) else seq_len
        out.append(layer_cost(i, n, config.d_model, config.ffn_dim))
    return out


@dataclass
class FlopReport:
    seq_len: int
    keep_ratio: float
    kept_tokens: int
    n_pred: int
    baseline_layers: List[LayerCost]
    drop_layers: List[LayerCost]
    embedding: int
    head: int
    unit: str = "MAC (1 multiply + 1 add)"

    @property
    def baseline_total(self) -> int:
        return sum(c.total for c in self.baseline_layers) + self.embedding + self.head

    @property
    def drop_total(self) -> int:
        return sum(c.total for c in self.drop_layers) + self.embedding + self.head

    @property
    def reduction(self) -> float:
        return 1.0 - self.drop_total / self.baseline_total

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(baseline_total=self.baseline_total, drop_total=self.drop_total,
                 reduction=self.reduction)
        return d

    def table(self) -> str:
        rows = [("layer", "tokens(base)", "MACs(base)", "tokens(drop)", "MACs(drop)")]
        for b, dr in zip(self.baseline_layers, self.drop_layers):
            rows.append((str(b.layer), str(b.tokens), f"{b.total:,}", str(dr.tokens), f"{dr.total:,}"))
        rows.append(("embedding", "", f"{self.embedding:,}", "", f"{self.embedding:,}"))
        rows.append(("head", str(self.n_pred), f"{self.head:,}", str(self.n_pred), f"{self.head:,}"))
        rows.append(("total", "", f"{self.baseline_total:,}", "", f"{self.drop_total:,}"))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        lines = [f"# unit: {self.unit}; seq_len={self.seq_len} keep_ratio={self.keep_ratio}"]
        for r in rows:
            lines.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
        lines.append(f"reduction: {self.reduction:.4f}")
        return "\n".join(lines)


def flop_count(config: ModelConfig, keep_ratio: Optional[float] = None,
               seq_len: Optional[int] = None, mask_rate: float = 0.15) -> FlopReport:
    """Analytic forward MACs of the full-sequence path versus the token-drop path.

    Dropped layers run on ``ceil(keep_ratio * seq_len)`` tokens; the MLM head
    runs on ``ceil(mask_rate * seq_len)`` predicted positions on both paths.
    """
    keep = config.keep_ratio if keep_ratio is None else keep_ratio
    if not 0.0 < keep <= 1.0:
        raise ConfigError(f"keep_ratio must lie in (0, 1], got {keep}")
    s = config.max_seq if seq_len is None else seq_len
    kept = _ceil(keep * s)
    n_pred = _ceil(mask_rate * s)
    return FlopReport(
        seq_len=s,
        keep_ratio=keep,
        kept_tokens=kept,
        n_pred=n_pred,
        baseline_layers=path_layer_costs(config, s, None),
        drop_layers=path_layer_costs(config, s, kept),
        embedding=embedding_cost(s, config.d_model),
        head=head_cost(n_pred, config.d_model, config.vocab_size),
    )


def step_macs(config: ModelConfig, batch_size: int, seq_len: int, kept_width: Optional[int],
              n_masked: int, sc_step: bool = False) -> int:
    """Forward MACs actually executed by one training step on a padded batch."""
    d, V = config.d_model, config.vocab_size
    emb = batch_size * embedding_cost(seq_len, d)
    if kept_width is None:
        layers = sum(c.total for c in path_layer_costs(config, seq_len, None))
        return emb + batch_size * layers + head_cost(n_masked, d, V)
    drop = sum(c.total for c in path_layer_costs(config, seq_len, kept_width))
    total = emb + batch_size * drop + head_cost(n_masked, d, V)
    if sc_step:
        full = sum(c.total for c in path_layer_costs(config, seq_len, None))
        # baseline final + both penultimate head passes
        total += batch_size * full + 3 * head_cost(n_masked, d, V)
    return total


# ---------------------------------------------------------------------------
# sentence representations and semantic drift
# ---------------------------------------------------------------------------


def sentence_representations(encoder: Encoder, ids, layer: Optional[int] = None) -> np.ndarray:
    """Mean over real positions of hidden state ``layer`` (default: last) per row."""
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    batch = MaskedBatch.unmasked(ids)
    with T.no_grad():
        out = encoder.forward_full(batch, collect=layer is not None)
    h = out.final.data if layer is None else out.activations[layer].data
    real = batch.attention_mask[..., None].astype(np.float64)
    return (h.astype(np.float64) * real).sum(axis=1) / real.sum(axis=1)


def all_layer_representations(encoder: Encoder, ids) -> List[np.ndarray]:
    """Mean-pooled representations for hidden states 0..n_layers."""
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    batch = MaskedBatch.unmasked(ids)
    with T.no_grad():
        out = encoder.forward_full(batch, collect=True)
    real = batch.attention_mask[..., None].astype(np.float64)
    return [(a.data.astype(np.float64) * real).sum(axis=1) / real.sum(axis=1) for a in out.activations]


def cosine(u, v) -> float:
    """Cosine similarity; exactly 1.0 for bit-identical inputs."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    uu, vv = float(u @ u), float(v @ v)
    if uu == 0.0 or vv == 0.0:
        raise NumericError("cosine of a zero-norm vector")
    # sqrt(x*x) == x in IEEE arithmetic, so identical vectors give exactly 1
    return float(np.clip((u @ v) / math.sqrt(uu * vv), -1.0, 1.0))


def semantic_drift(encoder: Encoder, original_ids, corrupted_ids) -> float:
    """Cosine between mean-pooled final-layer representations of two id sequences."""
    a = np.asarray(original_ids, dtype=np.int64).reshape(-1)
    b = np.asarray(corrupted_ids, dtype=np.int64).reshape(-1)
    width = max(int((a != PAD_ID).sum()), int((b != PAD_ID).sum()))
    rows = pad_sequences([a[a != PAD_ID], b[b != PAD_ID]], width)
    ra = sentence_representations(encoder, rows[:1])[0]
    rb = ra if np.array_equal(rows[0], rows[1]) else sentence_representations(encoder, rows[1:])[0]
    return cosine(ra, rb)


def corrupt(ids, kind: str, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Mask (``[MASK]`` substitution) or drop (deletion) ``round(rate * n)`` ordinary tokens."""
    if kind not in CORRUPTIONS:
        raise ConfigError(f"corruption must be one of {CORRUPTIONS}, got {kind!r}")
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"rate must lie in [0, 1], got {rate}")
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    ids = ids[ids != PAD_ID]
    eligible = np.flatnonzero(ids >= N_SPECIAL)
    k = int(round(rate * eligible.size))
    if kind == "none" or k == 0:
        return ids.copy()
    chosen = rng.choice(eligible, size=k, replace=False)
    if kind == "mask":
        out = ids.copy()
        out[chosen] = MASK_ID
        return out
    return np.delete(ids, chosen)


@dataclass
class DriftReport:
    snapshot: str
    corruption: str
    rate: float
    cosines: List[float]
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        arr = np.asarray(self.cosines, dtype=np.float64)
        self.mean = float(arr.mean()) if arr.size else float("nan")
        self.std = float(arr.std()) if arr.size else float("nan")

    def to_json(self) -> str:
        return json.dumps({"snapshot": self.snapshot, "corruption": self.corruption, "rate": self.rate,
                           "mean": self.mean, "std": self.std, "n": len(self.cosines),
                           "cosines": self.cosines})


def drift_report(encoder: Encoder, id_rows: Sequence[Sequence[int]], corruption: str, rate: float,
                 seed: int = 0, snapshot: str = "") -> DriftReport:
    rng = np.random.default_rng(seed)
    originals = [np.asarray(r, dtype=np.int64) for r in id_rows]
    corrupted = [corrupt(r, corruption, rate, rng) for r in originals]
    clean = [r[r != PAD_ID] for r in originals]
    ra = sentence_representations(encoder, pad_sequences(clean))
    same = [np.array_equal(a, b) for a, b in zip(clean, corrupted)]
    rb = ra if all(same) else sentence_representations(encoder, pad_sequences(corrupted))
    cosines = [cosine(ra[i], ra[i] if same[i] else rb[i]) for i in range(len(clean))]
    return DriftReport(snapshot, corruption, rate, cosines)


def drift_curve(checkpoints: Sequence, sentences: Sequence[str], corruption: str, rate: float,
                seed: int = 0, max_len: Optional[int] = None) -> List[DriftReport]:
    """One DriftReport per checkpoint, each encoder frozen at that snapshot."""
    from .checkpoint import load_encoder

    if not checkpoints:
        raise InputError("drift_curve needs at least one checkpoint")
    reports = []
    for path in checkpoints:
        encoder, vocab = load_encoder(path)
        width = max_len or encoder.config.max_seq
        rows = [encode(s, vocab, width, pad=False) for s in sentences]
        reports.append(drift_report(encoder, rows, corruption, rate, seed, snapshot=str(path)))
    return reports


def write_jsonl(records: Iterable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write((r if isinstance(r, str) else r.to_json()) + "\n")


# ---------------------------------------------------------------------------
# probing
# ---------------------------------------------------------------------------


@dataclass
class ProbeResult:
    accuracy: float
    majority_baseline: float


@dataclass
class ProbeReport:
    layers: List[int]
    accuracies: List[float]
    majority_baseline: float

    def to_jsonl(self) -> List[str]:
        return [json.dumps({"layer": l, "accuracy": a, "majority_baseline": self.majority_baseline})
                for l, a in zip(self.layers, self.accuracies)]


def _split(n: int, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(0.8 * n))
    return perm[:cut], perm[cut:]


def probe(layer_reps, labels, epochs: int = 200, seed: int = 0, lr: float = 0.1) -> ProbeResult:
    """Held-out accuracy of a linear probe on an 80/20 seeded split.

    The majority baseline predicts the most frequent training label.
    """
    from .estimators import LinearProbe

    X = np.asarray(layer_reps, dtype=np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise InputError("probing needs at least two classes")
    if counts.min() < 20:
        raise InputError("probing needs at least 20 examples per class")
    tr, te = _split(len(y), seed)
    clf = LinearProbe(lr=lr, epochs=epochs, seed=seed).fit(X[tr], y[tr])
    acc = float(np.mean(clf.predict(X[te]) == y[te]))
    tr_classes, tr_counts = np.unique(y[tr], return_counts=True)
    majority = tr_classes[np.argmax(tr_counts)]
    return ProbeResult(acc, float(np.mean(y[te] == majority)))


def probe_layers(encoder: Encoder, id_rows, labels, layers: Optional[Sequence[int]] = None,
                 epochs: int = 200, seed: int = 0) -> ProbeReport:
    """Probe mean-pooled hidden states; ``layers=None`` probes every state 0..n_layers."""
    reps = all_layer_representations(encoder, pad_sequences(id_rows))
    layers = list(range(len(reps))) if layers is None else list(layers)
    results = [probe(reps[i], labels, epochs=epochs, seed=seed) for i in layers]
    return ProbeReport(layers, [r.accuracy for r in results], results[0].majority_baseline)
