import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.utils.estimator_checks import check_estimator

from sctd.errors import ConfigError
from sctd.estimators import LinearProbe, MaskedLMEncoder


def test_linear_probe_passes_sklearn_checks():
    check_estimator(LinearProbe(epochs=50))


def test_linear_probe_learns_a_linear_rule():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((300, 4))
    y = np.where(X[:, 0] - 2 * X[:, 2] > 0, "pos", "neg")
    clf = LinearProbe(epochs=300, lr=0.5).fit(X, y)
    assert clf.score(X, y) > 0.95
    assert set(clf.classes_) == {"neg", "pos"}
    np.testing.assert_allclose(clf.predict_proba(X).sum(1), 1.0)


def test_linear_probe_is_deterministic_and_clonable():
    rng = np.random.default_rng(1)
    X, y = rng.standard_normal((60, 3)), rng.integers(0, 3, 60)
    a = LinearProbe(seed=3).fit(X, y).coef_
    b = clone(LinearProbe(seed=3)).fit(X, y).coef_
    np.testing.assert_array_equal(a, b)
    assert LinearProbe(lr=0.2).get_params()["lr"] == 0.2


def test_linear_probe_validates_input():
    with pytest.raises(NotFittedError):
        LinearProbe().predict(np.ones((2, 2)))
    with pytest.raises(ValueError):
        LinearProbe().fit(np.ones((3, 2)), [0, 1])
    with pytest.raises(ValueError):
        LinearProbe().fit(np.ones((3, 2)), [0.5, 1.5, 2.5])


@pytest.fixture(scope="module")
def fitted(toy_sentences):
    return MaskedLMEncoder(mode="sctd", n_layers=2, d_model=16, n_heads=2, steps=15, batch_size=8,
                           max_len=24, vocab_size=300, interval=5).fit(toy_sentences[:300])


def test_encoder_fit_transform_shapes(fitted, toy_sentences):
    Z = fitted.transform(toy_sentences[300:310])
    assert Z.shape == (10, 16) and np.isfinite(Z).all()
    assert len(fitted.history_) == 15
    assert [m["t"] for m in fitted.history_ if m["mode"] == "sc"] == [5, 10, 15]


def test_encoder_score_is_negative_loss(fitted, toy_sentences):
    s = fitted.score(toy_sentences[300:400])
    assert s < 0 and np.isfinite(s)


def test_encoder_in_a_pipeline(toy_sentences):
    from sctd.corpus import generate

    gold = generate(200, seed=21)
    X = [g.text for g in gold]
    y = [g.tense for g in gold]
    pipe = make_pipeline(MaskedLMEncoder(n_layers=2, d_model=16, n_heads=2, steps=5, batch_size=8, max_len=24,
                                         vocab_size=300, mode="tokendrop"),
                         LinearProbe(epochs=50))
    pipe.fit(X, y)
    assert pipe.predict(X[:5]).shape == (5,)


def test_encoder_checks_arguments():
    with pytest.raises(ConfigError):
        MaskedLMEncoder(mode="bogus").fit(["a b c"])
    with pytest.raises(ValueError):
        MaskedLMEncoder().fit("a single string")
    with pytest.raises(NotFittedError):
        MaskedLMEncoder().transform(["a"])
