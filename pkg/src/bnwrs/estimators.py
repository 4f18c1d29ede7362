"""Scikit-learn style estimators wrapping the training and analysis cores.

These are thin ecosystem adapters: ``BNNetClassifier`` turns the training
loop into a ``fit``/``predict`` classifier, ``GeneralizedGaussian`` wraps
the shape-parameter fit, and ``InputSpaceProjection`` exposes the
feature-covariance eigenbasis as a transformer.  All hyperparameters are
stored verbatim so ``get_params``/``set_params``/``clone`` behave as
usual.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_X_y

from . import analysis
from .layers import build_network
from .optim import LrSchedule
from .regularize import RegularizerConfig
from .runner import Trainer
from .tensor import no_grad
from .validation import as_float_matrix, as_sample_vector

__all__ = ["BNNetClassifier", "GeneralizedGaussian", "InputSpaceProjection"]


def _check_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit first"
        )


class BNNetClassifier(ClassifierMixin, BaseEstimator):
    """Batch-normalized MLP classifier trained with the package optimizers.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Widths of the BN-ReLU hidden layers.
    optimizer : {"sgd", "sgdm", "adam", "adamw", "adamp"}
    lr : float
        Initial learning rate; divided by ``1/lr_decay_factor`` at each
        epoch in ``lr_decay_epochs``.
    momentum : float
        Momentum for sgdm, beta1 for the adam family.
    regularizer : {"none", "wd", "wrs", "wrs_ic"}
    lam : float
        Decay coefficient (on weights and gamma for "wd", on the
        batchnorm parameters for the rescaling modes).
    tau : int
        Rescale period in optimizer steps for the rescaling modes.
    weight_standardize : bool
        Use weight-standardized hidden layers.
    seed : int
        Drives initialization and batch shuffling; fits are deterministic.

    Attributes
    ----------
    classes_ : ndarray of the distinct labels seen in fit.
    network_ : the trained network.
    history_ : per-epoch training records.
    """

    def __init__(self, hidden_layer_sizes=(64, 64), optimizer="sgdm", lr=0.1,
                 momentum=0.9, beta2=0.999, eps=1e-8, regularizer="none",
                 lam=0.0, tau=10, normalize_output_layer=True, epochs=10,
                 batch_size=32, lr_decay_epochs=(), lr_decay_factor=0.1,
                 bn_epsilon=1e-12, bn_momentum=0.1, weight_standardize=False,
                 seed=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.beta2 = beta2
        self.eps = eps
        self.regularizer = regularizer
        self.lam = lam
        self.tau = tau
        self.normalize_output_layer = normalize_output_layer
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_decay_epochs = lr_decay_epochs
        self.lr_decay_factor = lr_decay_factor
        self.bn_epsilon = bn_epsilon
        self.bn_momentum = bn_momentum
        self.weight_standardize = weight_standardize
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        self.n_features_in_ = X.shape[1]
        arch = {
            "kind": "mlp",
            "hidden": list(self.hidden_layer_sizes),
            "weight_standardize": self.weight_standardize,
        }
        self.network_ = build_network(
            arch, (X.shape[1],), len(self.classes_), seed=self.seed,
            bn_epsilon=self.bn_epsilon, bn_momentum=self.bn_momentum,
        )
        schedule = LrSchedule(self.lr, tuple(self.lr_decay_epochs), self.lr_decay_factor)
        reg = RegularizerConfig(
            mode=self.regularizer, lam=self.lam, tau=self.tau,
            normalize_output_layer=self.normalize_output_layer,
        )
        trainer = Trainer(
            self.network_, self.optimizer, schedule, reg, seed=self.seed,
            momentum=self.momentum, beta2=self.beta2, epsilon=self.eps,
        )
        trainer.train(X, y_idx, None, None, epochs=self.epochs,
                      batch_size=self.batch_size)
        self.history_ = trainer.history
        return self

    def decision_function(self, X):
        _check_fitted(self, "network_")
        X = as_float_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        with no_grad():
            logits = self.network_.forward(X, mode="eval")
        return logits.data

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class GeneralizedGaussian(BaseEstimator):
    """Generalized-Gaussian shape/scale/location fit.

    The location is pinned at the sample median and the shape recovered
    by moment matching (see :func:`bnwrs.analysis.fit_ggd`).

    Attributes
    ----------
    beta_ : shape parameter (2 is Gaussian, 1 Laplacian, lower = heavier tails)
    alpha_ : scale parameter
    mu_ : location (sample median)
    log_likelihood_ : total log likelihood of the training samples
    """

    def fit(self, X, y=None):
        x = as_sample_vector(X, min_samples=100, name="X")
        fit = analysis.fit_ggd(x)
        self.beta_ = fit.beta
        self.alpha_ = fit.alpha
        self.mu_ = fit.mu
        self.n_samples_ = fit.n_samples
        self.log_likelihood_ = fit.log_likelihood
        return self

    def logpdf(self, X):
        _check_fitted(self, "beta_")
        x = np.asarray(X, dtype=np.float64)
        return analysis.ggd_logpdf(x, self.beta_, self.alpha_, self.mu_)

    def pdf(self, X):
        return np.exp(self.logpdf(X))

    def score(self, X, y=None):
        """Mean log likelihood per sample."""
        return float(self.logpdf(as_sample_vector(X)).mean())

    def sample(self, size: int = 1, random_state: Optional[int] = None):
        _check_fitted(self, "beta_")
        rng = np.random.default_rng(random_state)
        return analysis.ggd_sample(self.beta_, self.alpha_, self.mu_, size=size, rng=rng)


class InputSpaceProjection(TransformerMixin, BaseEstimator):
    """Orthonormal change of basis into a feature set's covariance eigenbasis.

    ``fit`` estimates ``E[h h^T] - mu mu^T`` from feature rows and
    eigendecomposes it; ``transform`` expresses row vectors (weight
    slices) in that basis.  Unlike PCA the transform does not center or
    whiten: it is a pure rotation, so norms are preserved.

    Attributes
    ----------
    mean_ : feature mean
    eigenvalues_ : covariance spectrum, non-increasing, clipped at zero
    components_ : eigenvectors as rows, aligned with ``eigenvalues_``
    """

    def fit(self, X, y=None):
        X = as_float_matrix(X)
        n, d = X.shape
        if d > analysis.MAX_FEATURE_DIM:
            raise ValueError(f"feature dimension {d} exceeds {analysis.MAX_FEATURE_DIM}")
        mean = X.mean(axis=0)
        sigma = X.T @ X / n - np.outer(mean, mean)
        sigma = 0.5 * (sigma + sigma.T)
        values, vectors = np.linalg.eigh(sigma)
        order = np.argsort(values)[::-1]
        self.mean_ = mean
        self.eigenvalues_ = np.clip(values[order], 0.0, None)
        self.components_ = vectors[:, order].T
        self.n_features_in_ = d
        return self

    def transform(self, X):
        _check_fitted(self, "components_")
        X = as_float_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return X @ self.components_.T

    def inverse_transform(self, X):
        _check_fitted(self, "components_")
        return as_float_matrix(X) @ self.components_
