from dataclasses import replace

import numpy as np
import pytest

from conftest import block_corpus, block_survival
from survtopics.corpus import PatientRecord, Vocabulary, build_corpus
from survtopics.inference import Hyperparams, TrainConfig, TrainedModel, train
from survtopics.predict import infer_heldout_topics, predict_risk, predict_topics
from survtopics.survival import BaselineHazard, hazard_ratio


@pytest.fixture(scope="module")
def fitted():
    c = block_corpus(n_patients=60, seed=11)
    time, event = block_survival(c, seed=11)
    m = train(c, (time, event), config=TrainConfig(K=2, variant="mixehr_surv", seed=0, max_sweeps=200))
    return c, m


def _fake_model(phi, alpha, w=None, baseline=None):
    K, V = phi.shape
    vocab = Vocabulary(0, "m", tuple(f"v{i}" for i in range(V)))
    return TrainedModel(TrainConfig(K=K, variant="mixehr"), (vocab,),
                        Hyperparams(np.asarray(alpha, float), [np.ones(V)]), [np.asarray(phi, float)],
                        w=w, baseline=baseline)


def _record(words, counts):
    return PatientRecord("x", (np.asarray(words, np.int64),), (np.asarray(counts, np.int64),))


def test_single_topic():
    m = _fake_model(np.array([[0.2, 0.8]]), [1.0])
    r = infer_heldout_topics(m, _record([0, 1], [2, 3]))
    np.testing.assert_array_equal(r.gamma_bar, [1.0])
    np.testing.assert_array_equal(r.theta, [1.0])


def test_exclusive_word_pins_topic():
    phi = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5]])
    m = _fake_model(phi, [1.0, 1.0])
    r = infer_heldout_topics(m, _record([0], [3]))
    np.testing.assert_array_equal(r.gamma_bar, [1.0, 0.0])


def test_zero_token_patient_flagged():
    m = _fake_model(np.array([[0.5, 0.5], [0.5, 0.5]]), [1.0, 3.0], w=np.array([1.0, 0.0]))
    r = infer_heldout_topics(m, _record([], []), prior_row=[0.5, 0.5])
    assert r.flagged
    np.testing.assert_allclose(r.gamma_bar, [0.25, 0.75])
    np.testing.assert_allclose(r.theta, [0.25, 0.75])
    assert r.hazard_ratio == pytest.approx(np.exp(0.25))


def test_history_monotone_and_deterministic(fitted):
    c, m = fitted
    for j in range(5):
        r = infer_heldout_topics(m, c.patient(j))
        h = np.array(r.history)
        assert (np.diff(h) >= -1e-6 * np.abs(h[:-1])).all()
        assert r.gamma_bar.sum() == pytest.approx(1.0, abs=1e-9)
        assert r.theta.sum() == pytest.approx(1.0, abs=1e-9)
        again = infer_heldout_topics(m, c.patient(j))
        np.testing.assert_array_equal(r.gamma_bar, again.gamma_bar)


def test_training_patient_theta_close(fitted):
    c, m = fitted
    pred = predict_topics(m, c)
    tv = 0.5 * np.abs(pred.theta - m.train_gamma_bar).sum(axis=1)
    assert tv.max() < 0.05


def test_hazard_ratio_composition(fitted):
    c, m = fitted
    pred = predict_risk(m, c)
    np.testing.assert_allclose(pred.hazard_ratio, hazard_ratio(m.w, pred.gamma_bar), rtol=0)
    a, b = np.argmax(pred.hazard_ratio), np.argmin(pred.hazard_ratio)
    ts = np.linspace(0, m.baseline.event_times[-1] * 1.1, 50)
    assert (pred.curve(a)(ts) <= pred.curve(b)(ts)).all()


def test_zero_coefficient_curves(fitted):
    c, m = fitted
    m0 = replace(m, w=np.zeros(2))
    pred = predict_risk(m0, c.subset([0, 1, 2]))
    ts = m.baseline.event_times
    for curve in pred.curves():
        np.testing.assert_allclose(curve(ts), np.exp(-m.baseline(ts)))


def test_no_survival_head(toy_corpus):
    m = train(toy_corpus, config=TrainConfig(K=2, variant="mixehr", max_sweeps=3))
    with pytest.raises(ValueError, match="no survival head"):
        predict_risk(m, toy_corpus)
    assert predict_topics(m, toy_corpus).hazard_ratio is None


def test_multimodal_gamma_bar_on_simplex():
    c = block_corpus(n_patients=20, n_modalities=2, seed=2)
    m = train(c, config=TrainConfig(K=3, variant="mixehr", max_sweeps=10))
    pred = predict_topics(m, c)
    np.testing.assert_allclose(pred.gamma_bar.sum(axis=1), 1.0, atol=1e-9)


def test_vocabulary_mismatch(fitted):
    from survtopics.corpus import DataError

    _, m = fitted
    other = build_corpus((Vocabulary(0, "m0", ("zz",)),), [("a", 0, 0, 1)])
    with pytest.raises(DataError, match="vocabulary"):
        predict_topics(m, other)


def test_baseline_stored(fitted):
    _, m = fitted
    assert isinstance(m.baseline, BaselineHazard)
