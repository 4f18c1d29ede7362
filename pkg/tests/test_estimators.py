"""Scikit-learn facing estimator API."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import cross_val_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from bnwrs.analysis import ggd_sample
from bnwrs.datasets import make_synthetic
from bnwrs.estimators import BNNetClassifier, GeneralizedGaussian, InputSpaceProjection


@pytest.fixture(scope="module")
def clusters():
    return make_synthetic(4, 12, 800, seed=0, separation=3.0)


class TestBNNetClassifier:
    def test_fit_predict_score(self, clusters):
        x, y = clusters
        clf = BNNetClassifier(hidden_layer_sizes=(24,), epochs=6, batch_size=40, seed=0)
        clf.fit(x, y)
        assert clf.score(x, y) > 0.9
        assert clf.predict(x[:5]).shape == (5,)

    def test_labels_can_be_arbitrary(self, clusters):
        x, y = clusters
        labels = np.array(["ant", "bee", "cat", "dog"])[y]
        clf = BNNetClassifier(hidden_layer_sizes=(16,), epochs=4, seed=1).fit(x, labels)
        assert set(clf.predict(x[:20])) <= set(labels)
        assert list(clf.classes_) == ["ant", "bee", "cat", "dog"]

    def test_predict_proba_rows_sum_to_one(self, clusters):
        x, y = clusters
        clf = BNNetClassifier(hidden_layer_sizes=(16,), epochs=3, seed=2).fit(x, y)
        proba = clf.predict_proba(x[:10])
        assert proba.shape == (10, 4)
        assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-12)
        assert (proba >= 0).all()

    def test_unfitted_raises(self, clusters):
        with pytest.raises(NotFittedError):
            BNNetClassifier().predict(clusters[0])

    def test_clone_and_get_params_round_trip(self):
        clf = BNNetClassifier(hidden_layer_sizes=(8, 8), regularizer="wrs",
                              lam=1e-4, tau=20, seed=3)
        cloned = clone(clf)
        assert cloned.get_params() == clf.get_params()

    def test_deterministic_per_seed(self, clusters):
        x, y = clusters
        a = BNNetClassifier(hidden_layer_sizes=(16,), epochs=3, seed=4).fit(x, y)
        b = BNNetClassifier(hidden_layer_sizes=(16,), epochs=3, seed=4).fit(x, y)
        assert np.array_equal(a.decision_function(x[:50]), b.decision_function(x[:50]))

    def test_composes_with_sklearn_pipeline(self, clusters):
        x, y = clusters
        pipe = make_pipeline(
            StandardScaler(),
            BNNetClassifier(hidden_layer_sizes=(16,), epochs=4, seed=5),
        )
        scores = cross_val_score(pipe, x, y, cv=2)
        assert scores.mean() > 0.8

    def test_feature_count_checked(self, clusters):
        x, y = clusters
        clf = BNNetClassifier(hidden_layer_sizes=(8,), epochs=2, seed=6).fit(x, y)
        with pytest.raises(ValueError, match="features"):
            clf.predict(x[:, :5])

    def test_wrs_regularizer_trains(self, clusters):
        x, y = clusters
        clf = BNNetClassifier(hidden_layer_sizes=(16,), regularizer="wrs", tau=10,
                              lam=1e-4, epochs=5, seed=7).fit(x, y)
        assert clf.score(x, y) > 0.85
        from bnwrs.layers import slice_norms

        hidden = clf.network_.hidden_weight_layers()[0][1]
        norms = slice_norms(hidden.weight.data, "dense")
        # rescale fired recently, so norms sit close to unit
        assert np.abs(norms - 1.0).max() < 0.5


class TestGeneralizedGaussian:
    def test_fit_exposes_parameters(self):
        rng = np.random.default_rng(0)
        est = GeneralizedGaussian().fit(rng.standard_normal(20_000))
        assert 1.85 <= est.beta_ <= 2.15
        assert est.n_samples_ == 20_000
        assert np.isfinite(est.log_likelihood_)

    def test_sample_then_refit_recovers_shape(self):
        rng = np.random.default_rng(1)
        est = GeneralizedGaussian().fit(ggd_sample(1.2, size=30_000, rng=rng))
        resampled = est.sample(30_000, random_state=2)
        refit = GeneralizedGaussian().fit(resampled)
        assert abs(refit.beta_ - est.beta_) / est.beta_ < 0.1

    def test_score_is_mean_loglik(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(5_000)
        est = GeneralizedGaussian().fit(x)
        assert est.score(x) == pytest.approx(est.log_likelihood_ / 5_000, rel=1e-9)

    def test_unfitted_raises(self):
        with pytest.raises(NotFittedError):
            GeneralizedGaussian().logpdf([0.0])

    def test_requires_hundred_samples(self):
        with pytest.raises(ValueError):
            GeneralizedGaussian().fit(np.zeros(50))


class TestInputSpaceProjection:
    def test_transform_is_isometric_rotation(self, rng):
        feats = rng.normal(size=(500, 10)) @ rng.normal(size=(10, 10))
        isp = InputSpaceProjection().fit(feats)
        w = rng.normal(size=(7, 10))
        coords = isp.transform(w)
        assert_allclose(np.linalg.norm(coords, axis=1), np.linalg.norm(w, axis=1),
                        rtol=1e-10)
        assert_allclose(isp.inverse_transform(coords), w, atol=1e-10)

    def test_components_orthonormal_and_sorted(self, rng):
        isp = InputSpaceProjection().fit(rng.normal(size=(300, 6)))
        u = isp.components_
        assert np.abs(u @ u.T - np.eye(6)).max() < 1e-10
        assert (np.diff(isp.eigenvalues_) <= 1e-12).all()
        assert (isp.eigenvalues_ >= 0).all()

    def test_concentrates_variance_on_leading_component(self, rng):
        direction = np.array([3.0, 4.0]) / 5.0
        feats = np.outer(rng.normal(size=400) * 5.0, direction)
        feats += 0.01 * rng.normal(size=feats.shape)
        isp = InputSpaceProjection().fit(feats)
        assert isp.eigenvalues_[0] / isp.eigenvalues_[1] > 100
        assert abs(np.abs(isp.components_[0] @ direction) - 1.0) < 1e-3

    def test_unfitted_raises(self, rng):
        with pytest.raises(NotFittedError):
            InputSpaceProjection().transform(rng.normal(size=(3, 4)))
