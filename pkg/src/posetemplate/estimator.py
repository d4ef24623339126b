"""scikit-learn style wrapper around :func:`~posetemplate.fit.fit_pose`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_is_fitted, check_part_maps_batch
from .fit import FitConfig, fit_pose
from .losses import LossConfig
from .template import canonical_human_template


class TemplatePoseEstimator(TransformerMixin, BaseEstimator):
    """Fit per-part affine transforms of a body template to part heatmaps.

    Each sample in ``X`` (shape ``(n_samples, K, H, W)``) is fitted
    independently.  There is nothing to learn across samples, so ``fit``
    stores the per-sample results of the last call and ``predict`` /
    ``transform`` run a fresh fit on whatever they are given.

    Attributes set by ``fit``: ``transforms_`` ``(n_samples, K, 6)``,
    ``keypoints_`` ``(n_samples, n_keypoints, 2)``, ``keypoint_ids_``,
    ``results_`` (list of :class:`~posetemplate.fit.FitResult`).
    """

    def __init__(self, template=None, resolution=128, lambda1=1.0, lambda2=1.0, boundary_b=1.0,
                 recon_features="identity", learning_rate=1e-4, lr_final=None, beta1=0.9, beta2=0.999,
                 epsilon=1e-8, max_iters=2000, convergence_tol=1e-8, seed=0, init_noise=0.0):
        self.template = template
        self.resolution = resolution
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.boundary_b = boundary_b
        self.recon_features = recon_features
        self.learning_rate = learning_rate
        self.lr_final = lr_final
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.max_iters = max_iters
        self.convergence_tol = convergence_tol
        self.seed = seed
        self.init_noise = init_noise

    @classmethod
    def from_config(cls, config: FitConfig, template=None) -> TemplatePoseEstimator:
        loss = config.loss
        return cls(template=template, resolution=config.resolution, lambda1=loss.lambda1, lambda2=loss.lambda2,
                   boundary_b=loss.boundary_b, recon_features=loss.recon_features,
                   learning_rate=config.learning_rate, lr_final=config.lr_final, beta1=config.beta1,
                   beta2=config.beta2, epsilon=config.epsilon, max_iters=config.max_iters,
                   convergence_tol=config.convergence_tol, seed=config.seed, init_noise=config.init_noise)

    def fit_config(self) -> FitConfig:
        return FitConfig(
            learning_rate=self.learning_rate, lr_final=self.lr_final, beta1=self.beta1, beta2=self.beta2,
            epsilon=self.epsilon, max_iters=self.max_iters, convergence_tol=self.convergence_tol,
            seed=self.seed, init_noise=self.init_noise, resolution=self.resolution,
            loss=LossConfig(self.lambda1, self.lambda2, self.boundary_b, self.recon_features))

    def _template(self):
        return canonical_human_template() if self.template is None else self.template

    def _fit_all(self, X):
        template = self._template()
        X = check_part_maps_batch(X, template.n_parts, self.resolution)
        config = self.fit_config()
        return template, [fit_pose(template, x, config) for x in X]

    def fit(self, X, y=None):
        template, results = self._fit_all(X)
        self.results_ = results
        self.transforms_ = np.stack([r.params.reshape(-1, 6) for r in results])
        self.keypoints_ = np.stack([np.array([xy for _, xy in r.keypoints]).reshape(-1, 2) for r in results])
        self.keypoint_ids_ = list(template.keypoint_ids)
        self.n_parts_ = template.n_parts
        return self

    def predict(self, X) -> np.ndarray:
        """Keypoints for every sample, shape ``(n_samples, n_keypoints, 2)``."""
        check_is_fitted(self)
        _, results = self._fit_all(X)
        return np.stack([np.array([xy for _, xy in r.keypoints]).reshape(-1, 2) for r in results])

    def transform(self, X) -> np.ndarray:
        """Flat transform parameters per sample, shape ``(n_samples, 6 K)``."""
        check_is_fitted(self)
        _, results = self._fit_all(X)
        return np.stack([r.params for r in results])

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).keypoints_

    def fit_transform(self, X, y=None, **fit_params) -> np.ndarray:
        return self.fit(X).transforms_.reshape(len(self.results_), -1)

    def score(self, X, y) -> float:
        """Negative mean joint distance (percent of image size) against keypoints ``y``."""
        pred = self.predict(X)
        y = np.asarray(y, dtype=float).reshape(pred.shape)
        return -float(np.mean(np.linalg.norm(pred - y, axis=-1)) / 2.0 * 100.0)
