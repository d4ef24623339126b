"""Rasterize templates into K-channel part heatmaps.

Two independent routes produce the same picture: :func:`render_analytic`
evaluates each transformed Gaussian in closed form, while
:func:`render_warped` resamples the canonical channels through the inverse
affine map.  Pixel ``i`` of an ``H``-pixel axis sits at normalized
coordinate ``(2 i + 1) / H - 1``.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import SINGULAR_DET, AffineTransform, SingularTransformError, transforms_to_params

PMAP_MAGIC = b"PMAP"
_HEADER = struct.Struct("<4sIII")
DEFAULT_RESOLUTION = 128
MIN_RESOLUTION = 8
WINDOW_RADIUS = 7.0
DENSE_RESOLUTION = 32


class PartMapsFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PartMaps:
    """One sample's stack of part heatmaps, shape ``(K, H, W)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3:
            raise ValueError(f"part maps must be (K, H, W), got shape {data.shape}")
        if data.shape[1] != data.shape[2]:
            raise ValueError(f"part maps must be square, got {data.shape[1]}x{data.shape[2]}")
        if not np.all(np.isfinite(data)):
            raise ValueError("part maps contain non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("part map values must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        return isinstance(other, PartMaps) and np.array_equal(self.data, other.data)

    def to_bytes(self) -> bytes:
        k, h, w = self.shape
        return _HEADER.pack(PMAP_MAGIC, k, h, w) + self.data.astype("<f4").tobytes(order="C")

    @classmethod
    def from_bytes(cls, buf: bytes) -> PartMaps:
        if len(buf) < _HEADER.size:
            raise PartMapsFormatError("truncated PMAP header")
        magic, k, h, w = _HEADER.unpack_from(buf)
        if magic != PMAP_MAGIC:
            raise PartMapsFormatError(f"bad PMAP magic {magic!r}")
        expected = _HEADER.size + 4 * k * h * w
        if len(buf) != expected:
            raise PartMapsFormatError(f"PMAP payload size {len(buf)} does not match header ({expected} bytes)")
        data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(k, h, w)
        try:
            return cls(data.astype(float))
        except ValueError as exc:
            raise PartMapsFormatError(str(exc)) from exc


def write_part_maps(path, maps: PartMaps) -> None:
    with open(path, "wb") as fh:
        fh.write(maps.to_bytes())


def read_part_maps(path) -> PartMaps:
    with open(path, "rb") as fh:
        return PartMaps.from_bytes(fh.read())


def pixel_centers(resolution: int) -> np.ndarray:
    return (2.0 * np.arange(resolution) + 1.0) / resolution - 1.0


def _as_params(transforms, n_parts: int) -> np.ndarray:
    if isinstance(transforms, np.ndarray):
        params = np.asarray(transforms, dtype=float).reshape(-1, 6)
    else:
        params = transforms_to_params(list(transforms)).reshape(-1, 6)
    if params.shape[0] != n_parts:
        raise ValueError(f"expected {n_parts} transforms, got {params.shape[0]}")
    return params


def _check_resolution(resolution: int) -> int:
    resolution = int(resolution)
    if resolution < MIN_RESOLUTION:
        raise ValueError(f"resolution must be at least {MIN_RESOLUTION}, got {resolution}")
    return resolution


def _transformed_gaussians(template, params):
    """Means ``(K, 2)``, precisions ``(K, 2, 2)`` and linear blocks of the warped parts."""
    a = params[:, :4].reshape(-1, 2, 2)
    det = a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] * a[:, 1, 0]
    bad = np.flatnonzero(np.abs(det) < SINGULAR_DET)
    if bad.size:
        raise SingularTransformError(float(det[bad[0]]), template.parts[bad[0]].id)
    mean = np.einsum("kij,kj->ki", a, template.means) + params[:, 4:]
    # (A diag(v) A^T)^-1 = A^-T diag(1/v) A^-1
    a_inv = np.linalg.inv(a)
    precision = np.einsum("kji,kj,kjl->kil", a_inv, 1.0 / template.variances, a_inv)
    return mean, precision, a


class _Raster:
    """Per-pixel quantities shared by the forward pass and its gradient.

    Each part is evaluated only inside the pixel window where its Mahalanobis
    radius is at most ``WINDOW_RADIUS``; outside, values are below 1e-10 and
    stored as exact zeros.  Small grids are evaluated for all parts at once
    and masked, large grids part by part inside each window.
    """

    def __init__(self, template, params, resolution):
        self.template = template
        self.resolution = resolution
        c = pixel_centers(resolution)
        mean, precision, self.a = _transformed_gaussians(template, params)
        # C = P^-1; axis-aligned half extents of the radius-r ellipse are r * sqrt(C_ii)
        det = precision[:, 0, 0] * precision[:, 1, 1] - precision[:, 0, 1] ** 2
        half_x = WINDOW_RADIUS * np.sqrt(precision[:, 1, 1] / det)
        half_y = WINDOW_RADIUS * np.sqrt(precision[:, 0, 0] / det)
        c0, c1 = _pixel_spans(mean[:, 0] - half_x, mean[:, 0] + half_x, resolution)
        r0, r1 = _pixel_spans(mean[:, 1] - half_y, mean[:, 1] + half_y, resolution)
        self._spans = (r0, r1, c0, c1)
        self.windows = [
            (slice(a, b), slice(c, d)) if a < b and c < d else None
            for a, b, c, d in zip(r0.tolist(), r1.tolist(), c0.tolist(), c1.tolist())
        ]
        self.dense = resolution <= DENSE_RESOLUTION
        if self.dense:
            self._init_dense(c, mean, precision)
        else:
            self._init_windowed(c, mean, precision)

    def _init_dense(self, c, mean, precision):
        n = self.resolution
        idx = np.arange(n)
        r0, r1, c0, c1 = (x[:, None] for x in self._spans)
        mask = (((idx >= r0) & (idx < r1))[:, :, None]) & (((idx >= c0) & (idx < c1))[:, None, :])
        dx = c[None, None, :] - mean[:, 0, None, None]
        dy = c[None, :, None] - mean[:, 1, None, None]
        p = precision[:, :, :, None, None]
        self.ux = p[:, 0, 0] * dx + p[:, 0, 1] * dy
        self.uy = p[:, 1, 0] * dx + p[:, 1, 1] * dy
        self.values = np.where(mask, np.exp(-0.5 * (dx * self.ux + dy * self.uy)), 0.0)

    def _init_windowed(self, c, mean, precision):
        self.values = np.zeros((self.template.n_parts, self.resolution, self.resolution))
        self.parts = []
        for k, win in enumerate(self.windows):
            if win is None:
                self.parts.append(None)
                continue
            rows, cols = win
            dx = c[None, cols] - mean[k, 0]
            dy = c[rows, None] - mean[k, 1]
            p = precision[k]
            ux = p[0, 0] * dx + p[0, 1] * dy
            uy = p[1, 0] * dx + p[1, 1] * dy
            v = np.exp(-0.5 * (dx * ux + dy * uy))
            self.values[k, rows, cols] = v
            self.parts.append((ux, uy, v))

    def vjp(self, upstream: np.ndarray) -> np.ndarray:
        """Pull an upstream gradient on the maps back to ``(K, 6)`` parameter gradients.

        With ``u = P d`` and ``w = mu + S A^T u`` the map derivatives are
        ``dv/dA_ij = v u_i w_j`` and ``dv/dt_i = v u_i``.
        """
        s = self.template.variances
        mu = self.template.means
        if self.dense:
            a = self.a[:, :, :, None, None]
            g = upstream * self.values
            gx, gy = g * self.ux, g * self.uy
            wx = mu[:, 0, None, None] + s[:, 0, None, None] * (a[:, 0, 0] * self.ux + a[:, 1, 0] * self.uy)
            wy = mu[:, 1, None, None] + s[:, 1, None, None] * (a[:, 0, 1] * self.ux + a[:, 1, 1] * self.uy)
            axes = (1, 2)
            return np.stack([(gx * wx).sum(axis=axes), (gx * wy).sum(axis=axes),
                             (gy * wx).sum(axis=axes), (gy * wy).sum(axis=axes),
                             gx.sum(axis=axes), gy.sum(axis=axes)], axis=1)
        out = np.zeros((self.template.n_parts, 6))
        for k, (win, part) in enumerate(zip(self.windows, self.parts)):
            if win is None:
                continue
            ux, uy, v = part
            g = upstream[k, win[0], win[1]] * v
            gx, gy = g * ux, g * uy
            a = self.a[k]
            wx = mu[k, 0] + s[k, 0] * (a[0, 0] * ux + a[1, 0] * uy)
            wy = mu[k, 1] + s[k, 1] * (a[0, 1] * ux + a[1, 1] * uy)
            out[k] = (np.sum(gx * wx), np.sum(gx * wy), np.sum(gy * wx), np.sum(gy * wy),
                      np.sum(gx), np.sum(gy))
        return out


def _pixel_spans(lo, hi, resolution: int):
    """Start and stop arrays of the pixels whose centers fall in ``[lo, hi]``, elementwise."""
    first = np.ceil((lo + 1.0) * (resolution / 2.0) - 0.5)
    last = np.floor((hi + 1.0) * (resolution / 2.0) - 0.5)
    return np.clip(first, 0, resolution).astype(int), np.clip(last + 1, 0, resolution).astype(int)


def render_analytic(template, transforms, resolution: int = DEFAULT_RESOLUTION) -> PartMaps:
    """Evaluate every transformed part Gaussian (peak amplitude 1) on the pixel grid."""
    resolution = _check_resolution(resolution)
    raster = _Raster(template, _as_params(transforms, template.n_parts), resolution)
    return PartMaps(raster.values)


def _bilinear_zero(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``image`` at fractional pixel indices, reading 0 outside it."""
    h, w = image.shape
    padded = np.zeros((h + 2, w + 2))
    padded[1:-1, 1:-1] = image
    # out-of-range samples are clamped onto the zero border ring
    r = np.clip(rows + 1.0, 0.0, h + 1.0)
    c = np.clip(cols + 1.0, 0.0, w + 1.0)
    r0 = np.clip(np.floor(r).astype(int), 0, h)
    c0 = np.clip(np.floor(c).astype(int), 0, w)
    fr, fc = r - r0, c - c0
    return ((1 - fr) * (1 - fc) * padded[r0, c0] + (1 - fr) * fc * padded[r0, c0 + 1]
            + fr * (1 - fc) * padded[r0 + 1, c0] + fr * fc * padded[r0 + 1, c0 + 1])


def render_warped(template, transforms, resolution: int = DEFAULT_RESOLUTION) -> PartMaps:
    """Warp pre-rendered canonical channels through each part's transform."""
    resolution = _check_resolution(resolution)
    params = _as_params(transforms, template.n_parts)
    canonical = _Raster(template, np.tile(AffineTransform.identity().params, (template.n_parts, 1)),
                        resolution).values
    c = pixel_centers(resolution)
    px, py = np.meshgrid(c, c)
    out = np.empty_like(canonical)
    for k, p in enumerate(params):
        t = AffineTransform.from_params(p)
        if abs(t.det) < SINGULAR_DET:
            raise SingularTransformError(t.det, template.parts[k].id)
        inv = np.linalg.inv(t.linear)
        qx = inv[0, 0] * (px - t.tx) + inv[0, 1] * (py - t.ty)
        qy = inv[1, 0] * (px - t.tx) + inv[1, 1] * (py - t.ty)
        cols = (qx + 1.0) * resolution / 2.0 - 0.5
        rows = (qy + 1.0) * resolution / 2.0 - 0.5
        out[k] = _bilinear_zero(canonical[k], rows, cols)
    return PartMaps(np.clip(out, 0.0, 1.0))


def part_colors(n_parts: int) -> np.ndarray:
    """Fixed, evenly spaced hues; one RGB triple in ``[0, 1]`` per part."""
    return np.array([colorsys.hsv_to_rgb(k / n_parts, 0.85, 1.0) for k in range(n_parts)])


def composite_overlay(maps: PartMaps, background=None, colors=None) -> np.ndarray:
    """Blend part colors over a grayscale background, strongest part wins per pixel.

    Returns an ``(H, W, 3)`` float image in ``[0, 1]``.  ``colors`` defaults to
    :func:`part_colors`.  Ties between parts resolve to the lower channel index.
    """
    k, h, w = maps.shape
    if background is None:
        background = np.zeros((h, w))
    background = np.asarray(background, dtype=float)
    if background.shape != (h, w):
        raise ValueError(f"background shape {background.shape} does not match maps ({h}, {w})")
    if k == 0:
        return np.repeat(background[..., None], 3, axis=2)
    alpha = maps.data.max(axis=0)
    winner = maps.data.argmax(axis=0)
    palette = part_colors(k) if colors is None else np.asarray(colors, dtype=float).reshape(k, 3)
    color = palette[winner]
    return (1.0 - alpha)[..., None] * background[..., None] + alpha[..., None] * color


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
