import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from leffa.estimator import LeffaEstimator, SampleSet, check_samples
from leffa.synthdata import SyntheticDataset
from leffa.tensor import DimensionError, ParameterError

SMALL = dict(widths=(16, 16), heads=2, time_dim=16, height=16, width=16, steps=2)


def test_params_round_trip_and_clone():
    est = LeffaEstimator(temperature=0.5, **SMALL)
    params = est.get_params()
    assert params["temperature"] == 0.5 and params["widths"] == (16, 16)
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert est.set_params(lambda_leffa=0.0).lambda_leffa == 0.0


def test_fit_predict_score():
    ds = SyntheticDataset("patch_permutation", 4, seed=0)
    est = LeffaEstimator(**SMALL).fit(ds)
    flows = est.predict(ds)
    assert flows.shape == (4, 16, 16, 2) and np.all(np.abs(flows) <= 1)
    assert est.predict(ds, layer=1).shape == (4, 16, 16, 2)
    samples = ds.render(16, 16)
    assert est.score(samples) == pytest.approx(-est.evaluate(ds).mean_epe)
    with pytest.raises(ParameterError):
        est.predict(ds, layer=2)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        LeffaEstimator().predict(SyntheticDataset("shift", 1))


def test_sample_validation():
    s = SyntheticDataset("shift", 2).render(16, 16)
    bad = s[1].__class__(**{**s[1].__dict__, "mask": np.ones((1, 8, 8), np.float32)})
    with pytest.raises(DimensionError):
        check_samples([s[0], bad])
    with pytest.raises(ParameterError):
        check_samples([])
    with pytest.raises(DimensionError):
        SampleSet(s).render(32, 32)


def test_from_model_wraps_existing_model():
    ds = SyntheticDataset("patch_permutation", 2, seed=0)
    fitted = LeffaEstimator(**SMALL).fit(ds)
    wrapped = LeffaEstimator.from_model(fitted.model_, size=(16, 16))
    np.testing.assert_array_equal(wrapped.predict(ds), fitted.predict(ds))
