"""scikit-learn compatible wrappers.

``LinearProbe`` is the classifier used by the probing analysis.
``MaskedLMEncoder`` wraps pretraining behind ``fit``/``transform`` so a frozen
encoder can drop into an sklearn pipeline as a sentence featuriser.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .config import MODES, TrainConfig
from .data import encode, fixed_batches, pad_sequences
from .errors import ConfigError


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression trained by full-batch gradient descent.

    Features are standardised with training statistics (zero-variance columns
    are left unscaled). Training is deterministic given ``seed``.

    Parameters
    ----------
    lr : float
        Step size.
    epochs : int
        Number of full-batch updates.
    l2 : float
        Ridge penalty on the weights (not the bias).
    seed : int
        Seed for the weight initialisation.
    """

    def __init__(self, lr: float = 0.1, epochs: int = 200, l2: float = 0.0, seed: int = 0):
        self.lr = lr
        self.epochs = epochs
        self.l2 = l2
        self.seed = seed

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        if self.lr <= 0 or self.epochs < 0 or self.l2 < 0:
            raise ValueError("lr must be positive, epochs and l2 non-negative")
        self.classes_, codes = np.unique(y, return_inverse=True)
        self.mean_ = X.mean(axis=0)
        scale = X.std(axis=0)
        self.scale_ = np.where(scale > 0, scale, 1.0)
        Z = (X - self.mean_) / self.scale_

        n, k = Z.shape[0], self.classes_.size
        rng = np.random.default_rng(self.seed)
        W = rng.normal(0.0, 0.01, size=(Z.shape[1], k))
        b = np.zeros(k)
        onehot = np.eye(k)[codes]
        for _ in range(self.epochs):
            P = _softmax(Z @ W + b)
            G = (P - onehot) / n
            W -= self.lr * (Z.T @ G + self.l2 * W)
            b -= self.lr * G.sum(axis=0)
        self.coef_, self.intercept_ = W, b
        return self

    def _logits(self, X):
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def decision_function(self, X):
        """Class scores; a single margin column for binary problems, as sklearn expects."""
        z = self._logits(X)
        return z[:, 1] - z[:, 0] if z.shape[1] == 2 else z

    def predict_proba(self, X):
        return _softmax(self._logits(X))

    def predict(self, X):
        z = self._logits(X)
        return self.classes_[np.argmax(z, axis=1)]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class MaskedLMEncoder(TransformerMixin, BaseEstimator):
    """Pretrain a small encoder on raw sentences; transform to mean-pooled vectors.

    ``fit`` runs the full training loop in the chosen ``mode``; ``transform``
    returns final-layer representations averaged over real tokens; ``score``
    is the negative full-path MLM loss on a seeded corruption of ``X``.
    """

    def __init__(self, mode: str = "sctd", n_layers: int = 4, d_model: int = 128, n_heads: int = 4,
                 keep_ratio: float = 0.5, interval: Optional[int] = 10, weight: float = 0.05,
                 steps: int = 500, batch_size: int = 32, peak_lr: float = 1e-3, max_len: int = 64,
                 vocab_size: int = 8000, seed: int = 0):
        self.mode = mode
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.keep_ratio = keep_ratio
        self.interval = interval
        self.weight = weight
        self.steps = steps
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.max_len = max_len
        self.vocab_size = vocab_size
        self.seed = seed

    def _config(self) -> TrainConfig:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        return TrainConfig.from_dict({
            "model": {"n_layers": self.n_layers, "d_model": self.d_model, "n_heads": self.n_heads,
                      "keep_ratio": self.keep_ratio, "max_seq": self.max_len},
            "schedule": {"mode": self.mode, "interval": self.interval, "weight": self.weight},
            "optimizer": {"total_steps": self.steps, "batch_size": self.batch_size,
                          "peak_lr": self.peak_lr, "seed": self.seed},
            "data": {"max_len": self.max_len, "vocab_size": self.vocab_size, "val_fraction": 0.0},
            "run": {"eval_interval": 0, "eval_batches": 0, "record_timing": False},
        })

    def fit(self, X, y=None):
        from .trainer import prepare_data, train

        sentences = _sentences(X)
        config = self._config()
        result = train(config, prepare_data(config, sentences, val_lines=[]))
        self.config_ = config
        self.encoder_ = result.trainer.encoder
        self.vocab_ = result.trainer.vocab
        self.history_ = result.metrics
        return self

    def _ids(self, X):
        return [encode(s, self.vocab_, self.max_len, pad=False) for s in _sentences(X)]

    def transform(self, X):
        from .analysis import sentence_representations

        check_is_fitted(self, "encoder_")
        return sentence_representations(self.encoder_, pad_sequences(self._ids(X)))

    def score(self, X, y=None):
        from .trainer import Trainer

        check_is_fitted(self, "encoder_")
        trainer = Trainer(self.config_, self.vocab_, encoder=self.encoder_)
        batches = fixed_batches(self._ids(X), self.batch_size, self.seed, len(self.vocab_))
        return -trainer.evaluate(batches)


def _sentences(X):
    if isinstance(X, str):
        raise ValueError("expected an iterable of sentences, got a single string")
    out = [str(s) for s in X]
    if not out:
        raise ValueError("no sentences given")
    return out
