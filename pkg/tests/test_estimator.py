import numpy as np
import pytest
from sklearn.base import clone

from ultrlab import ProductionRanker, UnbiasedRanker
from ultrlab.data import generate_synthetic, normalize_features, split_dataset


@pytest.fixture(scope="module")
def data():
    return normalize_features(*split_dataset(generate_synthetic(80, 12, 5, seed=4)))


def small_ranker(**kw):
    params = dict(n_steps=40, eval_interval=10, batch_size=8, log_sessions=1000, propensity_sessions=3000, hidden=(8,))
    params.update(kw)
    return UnbiasedRanker(**params)


def test_fit_predict_score(data):
    train, valid, test = data
    est = small_ranker(algorithm="dla").fit(train, valid=valid, test=test)
    assert est.n_features_in_ == 5
    assert est.propensity_.shape == (10,) and est.propensity_[0] == 1.0
    scores = est.predict(test[0].features)
    assert scores.shape == (len(test[0].doc_ids),)
    assert est.predict(test.padded.features).shape == test.padded.mask.shape
    assert sorted(est.rank(test[0].features)) == list(range(len(scores)))
    assert est.score(test) == pytest.approx(est.record_.test_mean())


def test_fit_without_valid_holds_out(data):
    est = small_ranker(algorithm="na", ranker="mlp").fit(data[0])
    assert 0.0 <= est.score(data[2]) <= 1.0


def test_clone_and_params():
    est = small_ranker(algorithm="pdgd", paradigm="ons", hyper={"alpha": 0.1})
    c = clone(est)
    assert c.get_params() == est.get_params()
    assert c.set_params(learning_rate=0.2).learning_rate == 0.2


def test_same_seed_same_model(data):
    train, valid, _ = data
    a = small_ranker().fit(train, valid=valid)
    b = small_ranker().fit(train, valid=valid)
    assert a.params_ == b.params_


def test_input_validation(data):
    train, valid, test = data
    with pytest.raises(TypeError):
        small_ranker().fit(np.zeros((3, 5)))
    est = small_ranker(n_steps=0).fit(train, valid=valid)
    with pytest.raises(ValueError):
        est.predict(np.zeros((4, 6)))
    with pytest.raises(Exception):
        small_ranker().predict(np.zeros((4, 5)))


def test_production_ranker(data):
    train, _, test = data
    full = ProductionRanker(fraction=1.0).fit(train)
    weak = ProductionRanker(fraction=0.01).fit(train)
    assert full.coef_.shape == (5,)
    assert full.score(test) > weak.score(test)
