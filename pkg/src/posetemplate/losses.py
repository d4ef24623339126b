"""Fitting objective: reconstruction, anchor-connectivity and frame-boundary terms.

``total = recon + lambda1 * anchor + lambda2 * boundary``
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .render import PartMaps, _as_params, _Raster


class IdentityFeatures:
    """Compare heatmaps pixel by pixel; the reconstruction term becomes a plain L1."""

    name = "identity"
    block = 1

    def __call__(self, maps: np.ndarray) -> np.ndarray:
        return maps

    def backward(self, grad: np.ndarray, shape) -> np.ndarray:
        return grad

    def __repr__(self):
        return "IdentityFeatures()"


class BlurPyramidFeatures:
    """Stack the raw maps with Gaussian-blurred copies at several pixel scales.

    The blurred levels give overlapping support between parts that are far
    from their targets.  Each blur is a symmetric zero-padded convolution, so
    the operator is its own adjoint.
    """

    def __init__(self, sigmas=(1.0, 2.0, 4.0, 8.0), include_identity: bool = True):
        self.sigmas = tuple(float(s) for s in sigmas)
        self.include_identity = include_identity
        if any(s <= 0 for s in self.sigmas):
            raise ValueError("blur sigmas must be positive")

    @property
    def name(self) -> str:
        return "blur:" + ",".join(f"{s:g}" for s in self.sigmas)

    def _blur(self, maps, sigma):
        return gaussian_filter(maps, sigma=(0.0, sigma, sigma), mode="constant", cval=0.0)

    def __call__(self, maps: np.ndarray) -> np.ndarray:
        levels = [maps] if self.include_identity else []
        levels += [self._blur(maps, s) for s in self.sigmas]
        return np.stack(levels)

    def backward(self, grad: np.ndarray, shape) -> np.ndarray:
        out = grad[0].copy() if self.include_identity else np.zeros(shape)
        offset = 1 if self.include_identity else 0
        for i, s in enumerate(self.sigmas):
            out += self._blur(grad[offset + i], s)
        return out

    def __repr__(self):
        return f"BlurPyramidFeatures(sigmas={self.sigmas}, include_identity={self.include_identity})"


class PoolPyramidFeatures:
    """Concatenate block sums of the maps over ``f x f`` pixel blocks for several ``f``.

    Factor 1 is the raw map.  Coarse levels let a part that has drifted off its
    target still see it.  Factors that do not divide the resolution are skipped.
    """

    def __init__(self, factors=(1, 2, 4, 8, 16)):
        self.factors = tuple(int(f) for f in factors)
        if not self.factors or any(f < 1 for f in self.factors):
            raise ValueError("pool factors must be positive integers")

    @property
    def name(self) -> str:
        return "pool:" + ",".join(str(f) for f in self.factors)

    @property
    def block(self) -> int:
        return math.lcm(*self.factors)

    def _active(self, shape):
        k, h, w = shape
        return [f for f in self.factors if h % f == 0 and w % f == 0]

    def __call__(self, maps: np.ndarray) -> np.ndarray:
        k, h, w = maps.shape
        levels, current, size = [], maps, 1
        for f in sorted(self._active(maps.shape)):
            if f % size:
                current, size = maps, 1
            s = f // size
            if s > 1:
                kk, hh, ww = current.shape
                current = current.reshape(kk, hh // s, s, ww // s, s).sum(axis=(2, 4))
            size = f
            levels.append(current.ravel())
        return np.concatenate(levels)

    def backward(self, grad: np.ndarray, shape) -> np.ndarray:
        k, h, w = shape
        out = np.zeros(shape)
        start = 0
        for f in sorted(self._active(shape)):
            n = k * (h // f) * (w // f)
            g = grad[start:start + n].reshape(k, h // f, 1, w // f, 1)
            out.reshape(k, h // f, f, w // f, f)[...] += g
            start += n
        return out

    def __repr__(self):
        return f"PoolPyramidFeatures(factors={self.factors})"


def make_features(spec):
    """Build a feature extractor from ``"identity"``, ``"pool:f1,f2,..."``, ``"blur:s1,s2,..."`` or pass one through."""
    if spec is None:
        return IdentityFeatures()
    if not isinstance(spec, str):
        return spec
    if spec == "identity":
        return IdentityFeatures()
    if spec.startswith("pool:"):
        return PoolPyramidFeatures([int(s) for s in spec[5:].split(",") if s])
    if spec.startswith("blur:"):
        return BlurPyramidFeatures([float(s) for s in spec[5:].split(",") if s])
    raise ValueError(f"unknown feature extractor {spec!r}")


def features_name(features) -> str:
    return features if isinstance(features, str) else getattr(features, "name", repr(features))


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    boundary_b: float = 1.0
    recon_features: object = "identity"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.boundary_b <= 0:
            raise ValueError("boundary_b must be positive")

    @property
    def features(self):
        return make_features(self.recon_features)

    def to_dict(self) -> dict:
        return {"lambda1": self.lambda1, "lambda2": self.lambda2, "boundary_b": self.boundary_b,
                "recon_features": features_name(self.recon_features)}


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    anchor: float
    boundary: float
    total: float = field(default=float("nan"))

    @classmethod
    def combine(cls, recon, anchor, boundary, config: LossConfig) -> LossBreakdown:
        total = recon + config.lambda1 * anchor + config.lambda2 * boundary
        return cls(float(recon), float(anchor), float(boundary), float(total))


def transformed_anchors(template, params: np.ndarray) -> np.ndarray:
    """Every anchor mapped through its owning part's transform, shape ``(n_anchors, 2)``."""
    p = params[template.anchor_owner]
    pts = template.anchor_points
    return np.stack([p[:, 0] * pts[:, 0] + p[:, 1] * pts[:, 1] + p[:, 4],
                     p[:, 2] * pts[:, 0] + p[:, 3] * pts[:, 1] + p[:, 5]], axis=1)


def anchor_loss(template, transforms) -> float:
    """Mean squared distance between the two transformed anchors of every pair."""
    rows = template.pair_rows
    if len(rows) == 0:
        return 0.0
    a = transformed_anchors(template, _as_params(transforms, template.n_parts))
    diff = a[rows[:, 0]] - a[rows[:, 1]]
    return float(np.mean(np.sum(diff * diff, axis=1)))


def boundary_loss(template, transforms, boundary_b: float = 1.0) -> float:
    """Sum of ``|coordinate|`` over transformed anchor coordinates outside ``[-B, B]``."""
    if boundary_b <= 0:
        raise ValueError("boundary_b must be positive")
    a = np.abs(transformed_anchors(template, _as_params(transforms, template.n_parts)))
    return float(np.sum(np.where(a > boundary_b, a, 0.0)))


def _maps_array(maps) -> np.ndarray:
    return maps.data if isinstance(maps, PartMaps) else np.asarray(maps, dtype=float)


def reconstruction_loss(rendered, target, features=None) -> float:
    """Mean absolute difference between the feature maps of ``rendered`` and ``target``."""
    r, t = _maps_array(rendered), _maps_array(target)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch: rendered {r.shape} vs target {t.shape}")
    psi = make_features(features)
    return float(np.mean(np.abs(psi(r) - psi(t))))


def total_loss(template, transforms, target, config: LossConfig = LossConfig(), resolution=None) -> LossBreakdown:
    t = _maps_array(target)
    if resolution is not None and t.shape[1] != resolution:
        raise ValueError(f"target resolution {t.shape[1]} does not match {resolution}")
    if t.shape[0] != template.n_parts:
        raise ValueError(f"target has {t.shape[0]} channels, template has {template.n_parts} parts")
    params = _as_params(transforms, template.n_parts)
    rendered = _Raster(template, params, t.shape[1]).values
    return LossBreakdown.combine(
        reconstruction_loss(rendered, t, config.features),
        anchor_loss(template, params),
        boundary_loss(template, params, config.boundary_b),
        config,
    )
