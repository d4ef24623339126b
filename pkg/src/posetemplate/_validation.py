"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np

from .render import PartMaps


def check_part_maps_batch(X, n_parts: int, resolution: int | None = None) -> np.ndarray:
    """Coerce ``X`` to a float array of shape ``(n_samples, K, H, W)``.

    Accepts a single :class:`PartMaps`, a list of them, or array-likes of
    rank 3 (one sample) or 4.
    """
    if isinstance(X, PartMaps):
        X = X.data[None]
    elif isinstance(X, (list, tuple)) and X and all(isinstance(x, PartMaps) for x in X):
        X = np.stack([x.data for x in X])
    X = np.asarray(X, dtype=float)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected part maps of shape (n_samples, K, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no samples given")
    if X.shape[1] != n_parts:
        raise ValueError(f"expected {n_parts} channels, got {X.shape[1]}")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"part maps must be square, got {X.shape[2]}x{X.shape[3]}")
    if resolution is not None and X.shape[2] != resolution:
        raise ValueError(f"expected resolution {resolution}, got {X.shape[2]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("part maps contain non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("part map values must lie in [0, 1]")
    return X


def check_is_fitted(estimator, attributes=("transforms_",)) -> None:
    from sklearn.exceptions import NotFittedError

    if not all(hasattr(estimator, a) for a in attributes):
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call 'fit' first")
