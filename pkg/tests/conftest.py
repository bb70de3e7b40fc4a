import numpy as np
import pytest

from sctd.config import TrainConfig
from sctd.corpus import generate
from sctd.data import BatchSampler
from sctd.model import Encoder, ModelConfig


def tiny_model_config(**kw):
    base = dict(vocab_size=40, n_layers=4, d_model=16, n_heads=2, max_seq=24, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def random_sequences(n, vocab_size, seed=0, lo=4, hi=20):
    """[CLS] ordinary* [SEP] rows of varying length."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(lo, hi))
        out.append([2] + list(rng.integers(5, vocab_size, size=k - 2)) + [3])
    return out


def sample_batch(vocab_size=40, batch_size=6, seed=0, t=1, mask_rate=0.3, **kw):
    seqs = random_sequences(30, vocab_size, seed, **kw)
    return BatchSampler(seqs, batch_size, seed, vocab_size, mask_rate).batch(t)


def tiny_train_config(**sections):
    raw = {
        "model": {"n_layers": 4, "d_model": 32, "n_heads": 2, "max_seq": 32},
        "schedule": {"mode": "sctd", "interval": 10},
        "optimizer": {"total_steps": 20, "batch_size": 16, "seed": 0},
        "data": {"max_len": 32, "vocab_size": 400, "val_fraction": 0.1},
        "run": {"eval_interval": 10, "eval_batches": 2, "record_timing": False},
    }
    for k, v in sections.items():
        raw[k].update(v)
    return TrainConfig.from_dict(raw)


@pytest.fixture(scope="session")
def toy_sentences():
    return [s.text for s in generate(1500, seed=11)]


@pytest.fixture
def tiny_encoder():
    return Encoder(tiny_model_config(), seed=1)


def numeric_grad(f, x, h=1e-6):
    """Central differences of the scalar ``f()`` w.r.t. array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


# -- acceptance reporting ----------------------------------------------------------

_VERDICTS = {}
_LINES = {}


def record(n, ok, detail):
    """Verdict for acceptance criterion ``n``; printed in the session summary."""
    _VERDICTS[n] = (bool(ok), detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}", flush=True)
    assert ok, f"criterion {n}: {detail}"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    n, title = marker.args
    ok, detail = _VERDICTS.get(n, (False, None))
    if rep.failed:
        ok = False
        if detail is None:
            detail = str(rep.longrepr).strip().splitlines()[-1]
    _LINES[n] = f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
