import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mrovseg import MROVSegSegmenter
from mrovseg.errors import ContractError, ShapeError

from conftest import tiny_config


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(0)
    X = rng.random((2, 3, 32, 32))
    y = np.zeros((2, 32, 32), dtype=np.int64)
    y[0, 4:20, 6:22] = 1
    y[1, 10:30, 2:12] = 2
    return X, y


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    est = MROVSegSegmenter(class_names=("bg", "box", "bar"), steps=3, batch_size=2,
                           model_config=tiny_config())
    return est.fit(X, y)


class TestParams:
    def test_clone_roundtrip(self):
        est = MROVSegSegmenter(p=0.75, steps=5, random_state=3)
        c = clone(est)
        assert c.get_params() == est.get_params()
        assert not hasattr(c, "model_")

    def test_set_params(self):
        est = MROVSegSegmenter().set_params(fusion_enabled=False)
        assert est.get_params()["fusion_enabled"] is False


class TestFitPredict:
    def test_not_fitted(self, data):
        with pytest.raises(NotFittedError):
            MROVSegSegmenter().predict(data[0])

    def test_fitted_attributes(self, fitted):
        assert len(fitted.loss_curve_) == 3
        assert list(fitted.classes_) == ["bg", "box", "bar"]
        assert fitted.n_features_in_ == 3 * 32 * 32

    def test_predict_shape(self, fitted, data):
        pred = fitted.predict(data[0])
        assert pred.shape == (2, 32, 32)
        assert pred.min() >= 0 and pred.max() < 3

    def test_predict_new_vocabulary(self, fitted, data):
        pred = fitted.predict(data[0][:1], class_names=["a", "b", "c", "d", "e"])
        assert pred.shape == (1, 32, 32) and pred.max() < 5

    def test_score_range(self, fitted, data):
        s = fitted.score(*data)
        assert 0.0 <= s <= 1.0

    def test_user_config_untouched(self, fitted):
        assert fitted.model_config.p == 0.5
        assert fitted.model_.cfg is not fitted.model_config


class TestValidation:
    def test_bad_image_shape(self, data):
        with pytest.raises(ShapeError):
            MROVSegSegmenter().fit(data[0][:, :2], data[1])

    def test_label_mismatch(self, data):
        with pytest.raises(ShapeError):
            MROVSegSegmenter().fit(data[0], data[1][:, :16])

    def test_label_out_of_range(self, data):
        with pytest.raises(ContractError):
            MROVSegSegmenter(class_names=("bg", "box")).fit(*data)

    def test_float_labels(self, data):
        with pytest.raises(ContractError):
            MROVSegSegmenter(class_names=("a", "b", "c")).fit(data[0], data[1].astype(float))
