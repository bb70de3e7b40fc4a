"""Post-LN transformer MLM encoder with a full-sequence path and a token-drop path."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .data import MaskedBatch
from .errors import ConfigError, ContractError, DimensionError, InputError
from .router import BatchPlan, RoutingPlan

_NEG = -1e30


@dataclass
class ModelConfig:
    """Encoder hyper-parameters.

    Layers are numbered 1..n_layers; hidden state 0 is the embedding output.
    On the drop path layers ``drop_start+1 .. drop_end`` see only the kept
    tokens and the sequence is merged back before layer ``drop_end + 1``.
    """

    vocab_size: int
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    ffn_dim: Optional[int] = None
    max_seq: int = 128
    drop_start: Optional[int] = None
    drop_end: Optional[int] = None
    keep_ratio: float = 0.5
    dtype: str = "float32"
    ln_eps: Optional[float] = None
    init_std: float = 0.02

    def __post_init__(self):
        if self.n_layers < 2:
            raise ConfigError("n_layers must be at least 2 to have a drop range and a merge layer")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.d_model
        if self.drop_start is None:
            self.drop_start = max(self.n_layers // 2 - 1, 0)
        if self.drop_end is None:
            self.drop_end = self.n_layers - 1
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.ln_eps is None:
            self.ln_eps = 1e-12 if self.dtype == "float64" else 1e-5
        if not 0 <= self.drop_start < self.drop_end <= self.n_layers - 1:
            raise ConfigError(
                f"need 0 <= drop_start < drop_end <= n_layers - 1, got "
                f"drop_start={self.drop_start}, drop_end={self.drop_end}, n_layers={self.n_layers}"
            )
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ConfigError(f"keep_ratio must lie in (0, 1], got {self.keep_ratio}")
        if self.vocab_size < 6 or self.max_seq < 3:
            raise ConfigError("vocab_size must be >= 6 and max_seq >= 3")

    def to_dict(self) -> dict:
        return asdict(self)

    def is_dropped(self, layer: int) -> bool:
        return self.drop_start < layer <= self.drop_end


@dataclass
class EncoderOutput:
    final: T.Tensor
    penultimate: T.Tensor
    activations: Optional[List[T.Tensor]] = None
    plan: Optional[BatchPlan] = None


def init_params(config: ModelConfig, seed: int = 0) -> Dict[str, T.Tensor]:
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    d, f, v = config.d_model, config.ffn_dim, config.vocab_size
    params: Dict[str, np.ndarray] = {}

    def normal(*shape):
        return rng.normal(0.0, config.init_std, size=shape).astype(dt)

    params["tok_emb"] = normal(v, d)
    params["pos_emb"] = normal(config.max_seq, d)
    params["emb_ln.g"] = np.ones(d, dt)
    params["emb_ln.b"] = np.zeros(d, dt)
    for i in range(1, config.n_layers + 1):
        p = f"layers.{i}."
        for name in ("q", "k", "v", "o"):
            params[p + name + ".w"] = normal(d, d)
            params[p + name + ".b"] = np.zeros(d, dt)
        params[p + "ln1.g"] = np.ones(d, dt)
        params[p + "ln1.b"] = np.zeros(d, dt)
        params[p + "ffn1.w"] = normal(d, f)
        params[p + "ffn1.b"] = np.zeros(f, dt)
        params[p + "ffn2.w"] = normal(f, d)
        params[p + "ffn2.b"] = np.zeros(d, dt)
        params[p + "ln2.g"] = np.ones(d, dt)
        params[p + "ln2.b"] = np.zeros(d, dt)
    params["head.dense.w"] = normal(d, d)
    params["head.dense.b"] = np.zeros(d, dt)
    params["head.ln.g"] = np.ones(d, dt)
    params["head.ln.b"] = np.zeros(d, dt)
    params["head.bias"] = np.zeros(v, dt)
    return {k: T.Tensor(a, requires_grad=True, name=k) for k, a in params.items()}


def _key_bias(valid: np.ndarray, dtype) -> np.ndarray:
    return np.where(valid, 0.0, _NEG).astype(dtype)[:, None, None, :]


class Encoder:
    """Parameters plus the two forward paths and the tied MLM head."""

    def __init__(self, config: ModelConfig, params: Optional[Dict[str, T.Tensor]] = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    # -- parameter plumbing ---------------------------------------------
    def parameters(self) -> List[T.Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise ContractError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise DimensionError(f"{k}: expected {p.shape}, got {state[k].shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    # -- building blocks -------------------------------------------------
    def embed(self, batch: MaskedBatch) -> T.Tensor:
        """Token + absolute position embeddings, layer-normalised (hidden state 0)."""
        cfg, P = self.config, self.params
        ids = np.asarray(batch.token_ids)
        B, L = ids.shape
        if L > cfg.max_seq:
            raise InputError(f"sequence length {L} exceeds max_seq {cfg.max_seq}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise InputError(f"token ids must lie in [0, {cfg.vocab_size})")
        x = T.embedding(P["tok_emb"], ids) + T.index_select(P["pos_emb"], np.arange(L))
        return T.layer_norm(x, P["emb_ln.g"], P["emb_ln.b"], cfg.ln_eps)

    def layer(self, i: int, x: T.Tensor, key_valid: np.ndarray) -> T.Tensor:
        """One post-LN transformer block on ``x`` of shape [B, n, d]."""
        cfg, P = self.config, self.params
        p = f"layers.{i}."
        B, n, d = x.shape
        h, dh = cfg.n_heads, d // cfg.n_heads
        x2 = x.reshape(B * n, d)

        def heads(t):
            return t.reshape(B, n, h, dh).transpose(0, 2, 1, 3)

        def dense(t, name):
            return T.linear(t, P[p + name + ".w"], P[p + name + ".b"])

        q = heads(dense(x2, "q") * (1.0 / np.sqrt(dh)))
        k = dense(x2, "k").reshape(B, n, h, dh).transpose(0, 2, 3, 1)
        v = heads(dense(x2, "v"))
        scores = q @ k
        if not key_valid.all():
            scores = scores + _key_bias(key_valid, x.dtype)
        att = T.softmax(scores, axis=-1)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B * n, d)
        h1 = T.layer_norm(x2 + dense(ctx, "o"), P[p + "ln1.g"], P[p + "ln1.b"], cfg.ln_eps)
        f = dense(T.gelu(dense(h1, "ffn1")), "ffn2")
        out = T.layer_norm(h1 + f, P[p + "ln2.g"], P[p + "ln2.b"], cfg.ln_eps)
        return out.reshape(B, n, d)

    def mlm_head(self, hidden: T.Tensor) -> T.Tensor:
        """Dense + GELU + LayerNorm, then projection tied to the token embeddings."""
        cfg, P = self.config, self.params
        if hidden.shape[-1] != cfg.d_model:
            raise DimensionError(f"mlm_head: hidden size {hidden.shape[-1]} != d_model {cfg.d_model}")
        z = T.gelu(T.linear(hidden, P["head.dense.w"], P["head.dense.b"]))
        z = T.layer_norm(z, P["head.ln.g"], P["head.ln.b"], cfg.ln_eps)
        return z @ P["tok_emb"].T + P["head.bias"]

    # -- forward paths ---------------------------------------------------
    def forward_full(self, batch: MaskedBatch, x0: Optional[T.Tensor] = None,
                     collect: bool = False) -> EncoderOutput:
        """Every layer sees the whole sequence; padding is masked out of attention."""
        l = self.config.n_layers
        x = self.embed(batch) if x0 is None else x0
        acts = [x] if collect else None
        valid = np.asarray(batch.attention_mask, dtype=bool)
        penult = x
        for i in range(1, l + 1):
            if i == l:
                penult = x
            x = self.layer(i, x, valid)
            if collect:
                acts.append(x)
        return EncoderOutput(final=x, penultimate=penult, activations=acts)

    def forward_with_drop(self, batch: MaskedBatch, plan: Union[BatchPlan, Sequence[RoutingPlan]],
                          x0: Optional[T.Tensor] = None, collect: bool = False) -> EncoderOutput:
        """Token-drop path: dropped rows stay frozen at hidden state ``drop_start``.

        ``penultimate`` is the full-length input of the last layer: kept rows
        from layer ``n_layers - 1`` merged with the frozen dropped rows.
        """
        cfg = self.config
        l = cfg.n_layers
        if not isinstance(plan, BatchPlan):
            plan = BatchPlan.stack(list(plan))
        B, L = batch.shape
        if plan.index.shape[0] != B or any(p.length != L for p in plan.plans):
            raise ContractError(f"routing plan does not match batch of shape {batch.shape}")
        valid = np.asarray(batch.attention_mask, dtype=bool)

        x = self.embed(batch) if x0 is None else x0
        acts = [x] if collect else None
        for i in range(1, cfg.drop_start + 1):
            x = self.layer(i, x, valid)
            if collect:
                acts.append(x)
        frozen = x
        kept = T.batch_gather(frozen, plan.index)
        for i in range(cfg.drop_start + 1, cfg.drop_end + 1):
            kept = self.layer(i, kept, plan.valid)
            if collect:
                acts.append(kept)
        x = T.scatter_rows(frozen, kept, plan.index, plan.valid)
        penult = x
        for i in range(cfg.drop_end + 1, l + 1):
            if i == l:
                penult = x
            x = self.layer(i, x, valid)
            if collect:
                acts.append(x)
        return EncoderOutput(final=x, penultimate=penult, activations=acts, plan=plan)

    # -- helpers ---------------------------------------------------------
    def masked_rows(self, hidden: T.Tensor, batch: MaskedBatch) -> T.Tensor:
        """Hidden rows at masked positions, flattened to [n_masked, d]."""
        B, L, d = hidden.shape
        flat = np.flatnonzero(np.asarray(batch.mask_positions).reshape(-1))
        return T.index_select(hidden.reshape(B * L, d), flat)

    def masked_logits(self, hidden: T.Tensor, batch: MaskedBatch) -> T.Tensor:
        return self.mlm_head(self.masked_rows(hidden, batch))


def masked_labels(batch: MaskedBatch) -> np.ndarray:
    labels = np.asarray(batch.labels).reshape(-1)
    return labels[np.flatnonzero(np.asarray(batch.mask_positions).reshape(-1))]
