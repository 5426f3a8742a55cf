import numpy as np
import pytest
from sklearn.base import clone

from symreg.errors import SymregError
from symreg.estimator import SymbolicRegressor


def _sample_xy(trained_models, idx=0):
    pts = trained_models["train"].points[idx]
    return pts[:, 0:2], pts[:, 2]


def test_get_set_params_round_trip():
    est = SymbolicRegressor(checkpoint="x.ckpt", de_iterations=50, random_state=3)
    params = est.get_params()
    assert params["checkpoint"] == "x.ckpt"
    assert params["de_iterations"] == 50
    cloned = clone(est)
    assert cloned.get_params() == params


def test_fit_predict_on_memorized_sample(trained_models):
    X, y = _sample_xy(trained_models, 0)
    est = SymbolicRegressor(checkpoint=trained_models["ar_ckpt"], random_state=0)
    est.fit(X, y)
    assert isinstance(est.expression_, str) and est.expression_
    assert len(est.constants_) == est.n_constants_
    yhat = est.predict(X)
    assert yhat.shape == y.shape
    assert est.score(X, y) > 0.9


def test_diffusion_checkpoint_also_works(trained_models):
    X, y = _sample_xy(trained_models, 1)
    est = SymbolicRegressor(checkpoint=trained_models["diff_ckpt"], random_state=0)
    est.fit(X, y)
    assert est.score(X, y) >= 0.0  # valid expression, clamped score


def test_unfitted_predict_raises(trained_models):
    from sklearn.exceptions import NotFittedError
    est = SymbolicRegressor(checkpoint=trained_models["ar_ckpt"])
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((3, 2)))


def test_input_validation(trained_models):
    est = SymbolicRegressor(checkpoint=trained_models["ar_ckpt"])
    with pytest.raises(ValueError):
        est.fit(np.zeros((4, 3)), np.zeros(4))  # three features
    with pytest.raises(ValueError):
        est.fit(np.zeros((4, 2)), np.zeros(5))  # length mismatch
    bad = np.zeros((4, 2))
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        est.fit(bad, np.zeros(4))


def test_missing_checkpoint_configuration():
    est = SymbolicRegressor()
    with pytest.raises(SymregError):
        est.fit(np.zeros((4, 2)), np.zeros(4))
