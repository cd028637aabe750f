import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hasn.data import synthetic_pairs
from hasn.estimator import HASNSuperResolver
from hasn.validation import nchw_to_hwc

TINY = dict(dim=8, num_blocks=1, dw_kernel=3, total_iters=6, batch=2, lr0=1e-3, patch_hr=32, seed=2)


@pytest.fixture(scope="module")
def images():
    pairs = synthetic_pairs(3, 48, 4, seed=5)
    return [nchw_to_hwc(p.hr) for p in pairs], [nchw_to_hwc(p.lr) for p in pairs]


@pytest.fixture(scope="module")
def fitted(images):
    return HASNSuperResolver(**TINY).fit(images[0])


def test_params_api_and_clone():
    est = HASNSuperResolver(**TINY)
    assert est.get_params()["dim"] == 8
    est.set_params(lr0=5e-4)
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est


def test_predict_before_fit_raises(images):
    with pytest.raises(NotFittedError):
        HASNSuperResolver(**TINY).predict(images[1])


def test_fit_predict_score(fitted, images):
    hr, lr = images
    out = fitted.predict(lr)
    assert isinstance(out, list) and out[0].shape == (48, 48, 3) and out[0].dtype == np.float32
    assert out[0].min() >= 0 and out[0].max() <= 1
    assert np.isfinite(fitted.score(lr, hr))
    assert fitted.n_iter_ == 6 and len(fitted.loss_curve_) == 6


def test_stacked_arrays_and_uint8(fitted, images):
    lr = (np.stack(images[1]) * 255).round().astype(np.uint8)
    out = fitted.predict(lr)
    assert isinstance(out, np.ndarray) and out.shape == (3, 48, 48, 3)


def test_fit_with_explicit_pairs_is_deterministic(images):
    hr, lr = images
    a = HASNSuperResolver(**TINY).fit(lr, hr)
    b = HASNSuperResolver(**TINY).fit(lr, hr)
    assert all(np.array_equal(a.params_[k], b.params_[k]) for k in a.params_)
    with pytest.raises(ValueError):
        HASNSuperResolver(**TINY).fit(lr[:2], hr)


def test_input_validation(fitted):
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((8, 8, 3)))
    assert fitted.predict([np.zeros((8, 8))])[0].shape == (32, 32, 3)  # grayscale is replicated
    with pytest.raises(ValueError):
        fitted.predict([np.zeros((8, 8, 2))])
    with pytest.raises(ValueError):
        fitted.predict([np.full((16, 16, 3), 2.0)])
    with pytest.raises(ValueError):
        fitted.predict([])


def test_checkpoint_round_trip(tmp_path, fitted, images):
    fitted.save(tmp_path / "e.hsnc")
    loaded = HASNSuperResolver.from_checkpoint(tmp_path / "e.hsnc")
    np.testing.assert_array_equal(loaded.predict(images[1])[0], fitted.predict(images[1])[0])


def test_self_ensemble_option(fitted, images):
    est = clone(fitted).set_params(self_ensemble=True)
    est.model_config_, est.params_ = fitted.model_config_, fitted.params_
    assert est.predict(images[1][:1])[0].shape == (48, 48, 3)
