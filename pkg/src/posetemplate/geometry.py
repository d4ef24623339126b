"""Affine transform algebra over 2D points and Gaussians.

A transform holds the six free coefficients of a 3x3 homogeneous matrix
whose last row is fixed to ``(0, 0, 1)``::

    [[a11, a12, tx],
     [a21, a22, ty],
     [  0,   0,  1]]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SINGULAR_DET = 1e-12


class SingularTransformError(ValueError):
    """Raised when a transform's linear block is (numerically) singular."""

    def __init__(self, det: float, part: str | None = None):
        self.det = det
        self.part = part
        where = f" for part {part!r}" if part is not None else ""
        super().__init__(f"singular affine transform{where}: |det A| = {abs(det):.3e}")


@dataclass(frozen=True)
class AffineTransform:
    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    @classmethod
    def identity(cls) -> AffineTransform:
        return cls()

    @classmethod
    def translation(cls, tx: float, ty: float) -> AffineTransform:
        return cls(tx=float(tx), ty=float(ty))

    @classmethod
    def rotation(cls, angle: float, center=(0.0, 0.0)) -> AffineTransform:
        """Counter-clockwise rotation by ``angle`` radians about ``center``."""
        return cls.similarity(angle, 1.0, center)

    @classmethod
    def scaling(cls, sx: float, sy: float | None = None, center=(0.0, 0.0)) -> AffineTransform:
        sy = sx if sy is None else sy
        cx, cy = center
        return cls(float(sx), 0.0, 0.0, float(sy), cx - sx * cx, cy - sy * cy)

    @classmethod
    def similarity(cls, angle: float, scale: float, center=(0.0, 0.0)) -> AffineTransform:
        """Rotation by ``angle`` and isotropic ``scale`` with ``center`` held fixed."""
        c, s = np.cos(angle) * scale, np.sin(angle) * scale
        cx, cy = center
        return cls(float(c), float(-s), float(s), float(c),
                   float(cx - (c * cx - s * cy)), float(cy - (s * cx + c * cy)))

    @classmethod
    def from_matrix(cls, m) -> AffineTransform:
        m = np.asarray(m, dtype=float)
        if m.shape == (3, 3):
            m = m[:2]
        if m.shape != (2, 3):
            raise ValueError(f"expected a 2x3 or 3x3 matrix, got shape {m.shape}")
        return cls(*(float(v) for v in (m[0, 0], m[0, 1], m[1, 0], m[1, 1], m[0, 2], m[1, 2])))

    @classmethod
    def from_params(cls, p) -> AffineTransform:
        a11, a12, a21, a22, tx, ty = (float(v) for v in p)
        return cls(a11, a12, a21, a22, tx, ty)

    @property
    def params(self) -> np.ndarray:
        return np.array([self.a11, self.a12, self.a21, self.a22, self.tx, self.ty])

    @property
    def linear(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @property
    def offset(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a11, self.a12, self.tx],
                         [self.a21, self.a22, self.ty],
                         [0.0, 0.0, 1.0]])

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21


@dataclass(frozen=True)
class Gaussian2:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(2)
        cov = np.asarray(self.cov, dtype=float).reshape(2, 2)
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("covariance must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def axis_aligned(cls, mean, variance) -> Gaussian2:
        return cls(mean, np.diag(np.asarray(variance, dtype=float)))


def apply_point(t: AffineTransform, p):
    """Map a point (or an ``(..., 2)`` array of points) through ``t``."""
    p = np.asarray(p, dtype=float)
    x, y = p[..., 0], p[..., 1]
    return np.stack([t.a11 * x + t.a12 * y + t.tx, t.a21 * x + t.a22 * y + t.ty], axis=-1)


def transform_gaussian(t: AffineTransform, g: Gaussian2) -> Gaussian2:
    if abs(t.det) < SINGULAR_DET:
        raise SingularTransformError(t.det)
    a = t.linear
    cov = a @ g.cov @ a.T
    return Gaussian2(apply_point(t, g.mean), 0.5 * (cov + cov.T))


def compose(outer: AffineTransform, inner: AffineTransform) -> AffineTransform:
    """Return the transform that applies ``inner`` first, then ``outer``."""
    return AffineTransform.from_matrix(outer.matrix @ inner.matrix)


def invert(t: AffineTransform) -> AffineTransform:
    if abs(t.det) < SINGULAR_DET:
        raise SingularTransformError(t.det)
    return AffineTransform.from_matrix(np.linalg.inv(t.matrix))


def params_to_transforms(params) -> list[AffineTransform]:
    p = np.asarray(params, dtype=float).reshape(-1, 6)
    return [AffineTransform.from_params(row) for row in p]


def transforms_to_params(transforms) -> np.ndarray:
    if len(transforms) == 0:
        return np.zeros(0)
    return np.concatenate([t.params for t in transforms])


def identity_params(n_parts: int) -> np.ndarray:
    return np.tile(AffineTransform.identity().params, n_parts)
