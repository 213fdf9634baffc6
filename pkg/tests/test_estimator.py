import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ffsd.data import synthetic_set
from ffsd.estimator import FFSDClassifier, check_images
from ffsd.exceptions import InvalidInputError

FAST = dict(widths=(4, 8), epochs=2, batch_size=16, milestones=(1,))


@pytest.fixture(scope="module")
def data():
    ds = synthetic_set(3, 60, 8, seed=0, noise=0.5)
    return ds.images, np.array(["a", "b", "c"])[ds.labels]


@pytest.fixture(scope="module")
def fitted(data):
    return FFSDClassifier(**FAST).fit(*data)


def test_params_round_trip():
    est = FFSDClassifier(**FAST, lambda_div=0.5)
    assert est.get_params()["lambda_div"] == 0.5
    c = clone(est)
    assert c.get_params() == est.get_params()
    c.set_params(variant="dml")
    assert c.variant == "dml" and est.variant == "ffsd_full"


def test_fit_predict_shapes(fitted, data):
    X, y = data
    pred = fitted.predict(X)
    assert pred.shape == (60,) and set(pred) <= {"a", "b", "c"}
    p = fitted.predict_proba(X)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-9)
    assert fitted.transform(X).shape == (60, 8)
    assert 0 <= fitted.score(X, y) <= 1
    assert len(fitted.loss_history_) == 2


def test_float_input_matches_uint8(fitted, data):
    X, _ = data
    np.testing.assert_allclose(fitted.decision_function(X.astype(np.float64) / 255), fitted.decision_function(X),
                               atol=1e-5)


def test_predictor_choice(fitted, data):
    X, _ = data
    est = clone(fitted).set_params(predictor="fusion")
    est.__dict__.update({k: v for k, v in fitted.__dict__.items() if k.endswith("_")})
    assert est.decision_function(X).shape == (60, 3)
    est.predictor = "student_5"
    with pytest.raises(InvalidInputError):
        est.predict(X)


def test_variant_without_leader_uses_first_student(data):
    X, y = data
    est = FFSDClassifier(**FAST, variant="dml").fit(X, y)
    z = est.decision_function(X)
    assert z.shape == (60, 3)


def test_validation(fitted, data):
    X, y = data
    with pytest.raises(NotFittedError):
        FFSDClassifier().predict(X)
    with pytest.raises(InvalidInputError):
        fitted.predict(X[:, :, :4, :4])
    with pytest.raises(InvalidInputError):
        check_images(X[:, :2])
    with pytest.raises(InvalidInputError):
        check_images(X.astype(float))  # floats above 1
    with pytest.raises(ValueError):
        check_images(np.full((2, 3, 4, 4), np.nan))
    with pytest.raises(InvalidInputError):
        FFSDClassifier(**FAST).fit(X, np.zeros(60))
    with pytest.raises(InvalidInputError):
        FFSDClassifier(**FAST).fit(X, y[:5])
