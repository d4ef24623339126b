"""Closed-form gradients of the fitting objective and a finite-difference oracle.

Parameters are a flat vector of ``6 K`` values ordered
``(a11, a12, a21, a22, tx, ty)`` per part, parts in template order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import (
    LossBreakdown,
    LossConfig,
    _maps_array,
    anchor_loss,
    boundary_loss,
    make_features,
    transformed_anchors,
)
from .render import DENSE_RESOLUTION, _Raster

DEFAULT_STEP = 1e-5


class NonFiniteError(FloatingPointError):
    pass


def _anchor_point_grad(template, params, g_points):
    """Chain per-anchor gradients ``(n_anchors, 2)`` back to ``(K, 6)`` parameters."""
    pts = template.anchor_points
    rows = np.column_stack([g_points[:, 0] * pts[:, 0], g_points[:, 0] * pts[:, 1],
                            g_points[:, 1] * pts[:, 0], g_points[:, 1] * pts[:, 1],
                            g_points[:, 0], g_points[:, 1]])
    out = np.zeros_like(params)
    np.add.at(out, template.anchor_owner, rows)
    return out


def anchor_loss_grad(template, params) -> np.ndarray:
    params = np.asarray(params, dtype=float).reshape(-1, 6)
    rows = template.pair_rows
    g = np.zeros((len(template.anchor_points), 2))
    if len(rows):
        a = transformed_anchors(template, params)
        diff = 2.0 * (a[rows[:, 0]] - a[rows[:, 1]]) / len(rows)
        np.add.at(g, rows[:, 0], diff)
        np.add.at(g, rows[:, 1], -diff)
    return _anchor_point_grad(template, params, g).ravel()


def boundary_loss_grad(template, params, boundary_b: float = 1.0) -> np.ndarray:
    # subgradient 0 exactly on |x| = B
    params = np.asarray(params, dtype=float).reshape(-1, 6)
    a = transformed_anchors(template, params)
    g = np.where(np.abs(a) > boundary_b, np.sign(a), 0.0)
    return _anchor_point_grad(template, params, g).ravel()


def reconstruction_value_and_grad(template, params, target, features=None):
    return ReconstructionObjective(template, target, features).value_and_grad(params)


class Objective:
    """Scalar function of the parameter vector with a closed-form gradient.

    Objectives add and scale: ``2.0 * f + g`` is again an objective.
    """

    def value_and_grad(self, params):
        raise NotImplementedError

    def __call__(self, params) -> float:
        return self.value_and_grad(params)[0]

    def __add__(self, other):
        return _Combination([(1.0, self), (1.0, other)])

    def __rmul__(self, scale):
        return _Combination([(float(scale), self)])


class _Combination(Objective):
    def __init__(self, terms):
        self.terms = terms

    def value_and_grad(self, params):
        value, grad = 0.0, 0.0
        for w, term in self.terms:
            v, g = term.value_and_grad(params)
            value, grad = value + w * v, grad + w * g
        return value, grad


class AnchorObjective(Objective):
    def __init__(self, template):
        self.template = template

    def __call__(self, params):
        return anchor_loss(self.template, np.asarray(params, dtype=float))

    def value_and_grad(self, params):
        return self(params), anchor_loss_grad(self.template, params)


class BoundaryObjective(Objective):
    def __init__(self, template, boundary_b: float = 1.0):
        self.template = template
        self.boundary_b = boundary_b

    def __call__(self, params):
        return boundary_loss(self.template, np.asarray(params, dtype=float), self.boundary_b)

    def value_and_grad(self, params):
        return self(params), boundary_loss_grad(self.template, params, self.boundary_b)

    def near_kink(self, params, step: float) -> bool:
        """True if any transformed anchor coordinate is within ``2 step`` of ``|x| = B``."""
        a = transformed_anchors(self.template, np.asarray(params, dtype=float).reshape(-1, 6))
        return bool(np.any(np.abs(np.abs(a) - self.boundary_b) <= 2.0 * step))


class ReconstructionObjective(Objective):
    """Reconstruction term evaluated only where rendering or target is nonzero.

    Feature extractors exposing ``block`` (the largest pooling factor) are
    evaluated per channel on the block-aligned box covering the part's render
    window and the target's support; everywhere else both feature maps are
    zero and contribute nothing.  Other extractors, and small grids, use the
    full maps.
    """

    def __init__(self, template, target, features=None):
        self.template = template
        self.target = _maps_array(target)
        self.features = make_features(features)
        k, h, w = self.target.shape
        self.block = getattr(self.features, "block", None)
        # cropping only pays off on large grids
        if self.block is not None and (h % self.block or w % self.block or h <= DENSE_RESOLUTION):
            self.block = None
        if self.block is None:
            self._target_features = self.features(self.target)
            self._size = self._target_features.size
        else:
            self._size = self.features(np.zeros((1, h, w))).size * k
            self._support = [_support_box(ch) for ch in self.target]

    def _residual(self, raster):
        """Yield ``(channel, rows, cols, residual features)``; channel ``None`` means full maps."""
        if self.block is None:
            yield None, None, None, self.features(raster.values) - self._target_features
            return
        b = self.block
        for k, win in enumerate(raster.windows):
            boxes = [box for box in (self._support[k], win) if box]
            if not boxes:
                continue
            r0 = min(r.start for r, _ in boxes) // b * b
            r1 = -(-max(r.stop for r, _ in boxes) // b) * b
            c0 = min(c.start for _, c in boxes) // b * b
            c1 = -(-max(c.stop for _, c in boxes) // b) * b
            rows, cols = slice(r0, r1), slice(c0, c1)
            crop = (raster.values[k, rows, cols] - self.target[k, rows, cols])[None]
            # pooling is linear, so psi(r) - psi(t) = psi(r - t)
            yield k, rows, cols, self.features(crop)

    def _value(self, raster):
        return float(sum(np.abs(res).sum() for _, _, _, res in self._residual(raster)) / self._size)

    def __call__(self, params):
        params = np.asarray(params, dtype=float).reshape(-1, 6)
        return self._value(_Raster(self.template, params, self.target.shape[1]))

    def value_and_grad(self, params):
        params = np.asarray(params, dtype=float).reshape(-1, 6)
        raster = _Raster(self.template, params, self.target.shape[1])
        total = 0.0
        upstream = np.zeros(self.target.shape)
        for k, rows, cols, res in self._residual(raster):
            total += np.abs(res).sum()
            if k is None:
                upstream = self.features.backward(np.sign(res) / self._size, self.target.shape)
            else:
                shape = (1, rows.stop - rows.start, cols.stop - cols.start)
                upstream[k, rows, cols] = self.features.backward(np.sign(res) / self._size, shape)[0]
        return float(total / self._size), raster.vjp(upstream).ravel()

    def kink_signature(self, params):
        """Signs of every residual feature; the term is smooth wherever these stay fixed."""
        params = np.asarray(params, dtype=float).reshape(-1, 6)
        rendered = _Raster(self.template, params, self.target.shape[1]).values
        return np.sign(self.features(rendered) - self.features(self.target)).astype(np.int8)


def _support_box(channel):
    rows = np.flatnonzero(channel.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(channel.any(axis=0))
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


class TotalObjective(Objective):
    """The weighted fitting objective; :meth:`evaluate` also returns the per-term breakdown."""

    def __init__(self, template, target, config: LossConfig = LossConfig()):
        self.template = template
        self.config = config
        self.recon = ReconstructionObjective(template, target, config.features)
        self.anchor = AnchorObjective(template)
        self.boundary = BoundaryObjective(template, config.boundary_b)

    def evaluate(self, params) -> tuple[LossBreakdown, np.ndarray]:
        r, gr = self.recon.value_and_grad(params)
        a, ga = self.anchor.value_and_grad(params)
        b, gb = self.boundary.value_and_grad(params)
        grad = gr + self.config.lambda1 * ga + self.config.lambda2 * gb
        return LossBreakdown.combine(r, a, b, self.config), grad

    def __call__(self, params) -> float:
        params = np.asarray(params, dtype=float)
        return (self.recon(params) + self.config.lambda1 * self.anchor(params)
                + self.config.lambda2 * self.boundary(params))

    def value_and_grad(self, params):
        breakdown, grad = self.evaluate(params)
        return breakdown.total, grad

    def near_kink(self, params, step: float) -> bool:
        return self.boundary.near_kink(params, step)

    def kink_signature(self, params):
        return self.recon.kink_signature(params)


def gradient(objective: Objective, at) -> np.ndarray:
    """Closed-form gradient of ``objective`` at ``at``."""
    at = np.asarray(at, dtype=float).ravel()
    value, grad = objective.value_and_grad(at)
    if not np.isfinite(value):
        raise NonFiniteError(f"objective is not finite at the evaluation point ({value})")
    grad = np.asarray(grad, dtype=float).ravel()
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("gradient has non-finite entries")
    return grad


def finite_diff(objective, at, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences ``(f(p + h e_i) - f(p - h e_i)) / 2h`` for every coordinate."""
    if step <= 0:
        raise ValueError("step must be positive")
    at = np.asarray(at, dtype=float).ravel()
    out = np.empty_like(at)
    for i in range(at.size):
        hi, lo = at.copy(), at.copy()
        hi[i] += step
        lo[i] -= step
        f_hi, f_lo = objective(hi), objective(lo)
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NonFiniteError(f"objective is not finite around coordinate {i}")
        out[i] = (f_hi - f_lo) / (2.0 * step)
    return out


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Per-coordinate ``|a - n| / max(|a|, |n|, floor)``; the floor guards near-zero entries."""
    analytic, numeric = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_gradient(objective, at, step: float = DEFAULT_STEP, tolerance: float = 1e-4, floor: float = 1e-6):
    """Compare :func:`gradient` with :func:`finite_diff` coordinate by coordinate.

    A coordinate whose error exceeds ``tolerance`` is skipped when its stencil
    ``p +/- step e_i`` crosses a kink of the objective (a change in its
    ``kink_signature``); otherwise it counts against the check.  Returns
    ``(max relative error, n_checked, n_skipped)``.
    """
    at = np.asarray(at, dtype=float).ravel()
    analytic = gradient(objective, at)
    signature = getattr(objective, "kink_signature", None)
    center = None
    worst, checked, skipped = 0.0, 0, 0
    for i in range(at.size):
        hi, lo = at.copy(), at.copy()
        hi[i] += step
        lo[i] -= step
        numeric = (objective(hi) - objective(lo)) / (2.0 * step)
        if not np.isfinite(numeric):
            raise NonFiniteError(f"objective is not finite around coordinate {i}")
        err = float(relative_error(analytic[i], numeric, floor))
        if err > tolerance and signature is not None:
            # only mismatches need the (costly) kink test
            center = signature(at) if center is None else center
            if not (np.array_equal(signature(hi), center) and np.array_equal(signature(lo), center)):
                skipped += 1
                continue
        worst = max(worst, err)
        checked += 1
    return worst, checked, skipped


class _SignFlipped(Objective):
    """Negative control: the true value with a negated gradient."""

    def __init__(self, inner):
        self.inner = inner

    def __call__(self, params):
        return self.inner(params)

    def value_and_grad(self, params):
        value, grad = self.inner.value_and_grad(params)
        return value, -grad

    def __getattr__(self, name):
        if name in ("near_kink", "kink_signature"):
            return getattr(self.inner, name)
        raise AttributeError(name)


def random_params(n_parts: int, rng: np.random.Generator, spread: float = 0.15, shift: float = 0.3) -> np.ndarray:
    """Identity plus Gaussian noise on the linear blocks, uniform translations; nonsingular."""
    while True:
        a = np.eye(2)[None] + rng.normal(0.0, spread, size=(n_parts, 2, 2))
        det = a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] * a[:, 1, 0]
        if np.all(np.abs(det) > 0.25):
            break
    t = rng.uniform(-shift, shift, size=(n_parts, 2))
    return np.concatenate([a.reshape(n_parts, 4), t], axis=1).ravel()


@dataclass(frozen=True)
class GradCheckRow:
    term: str
    draws: int
    checked: int
    skipped: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error <= self.tolerance


def run_gradient_check(template, draws: int = 100, seed: int = 0, resolution: int = 16,
                       step: float = DEFAULT_STEP, tolerance: float = 1e-4,
                       features=("identity", "pool:1,2,4,8,16"), fault=None) -> list[GradCheckRow]:
    """Gradient-vs-finite-difference table for every loss term over random draws.

    ``fault="sign-flip"`` negates every analytic gradient (negative control).
    """
    from .losses import LossConfig
    from .render import render_analytic

    rng = np.random.default_rng(seed)
    specs = [("anchor", lambda tgt: AnchorObjective(template)),
             ("boundary", lambda tgt: BoundaryObjective(template, 1.0))]
    specs += [(f"recon[{f}]", lambda tgt, f=f: ReconstructionObjective(template, tgt, f)) for f in features]
    specs += [("total", lambda tgt: TotalObjective(template, tgt, LossConfig(recon_features=features[-1])))]
    rows = []
    for name, build in specs:
        worst, checked, skipped = 0.0, 0, 0
        for _ in range(draws):
            target = render_analytic(template, random_params(template.n_parts, rng), resolution)
            objective = build(target)
            if fault == "sign-flip":
                objective = _SignFlipped(objective)
            near = getattr(objective, "near_kink", None)
            params = random_params(template.n_parts, rng)
            while near is not None and near(params, step):
                params = random_params(template.n_parts, rng)
            w, c, s = check_gradient(objective, params, step, tolerance)
            worst, checked, skipped = max(worst, w), checked + c, skipped + s
        rows.append(GradCheckRow(name, draws, checked, skipped, worst, tolerance))
    return rows


def format_gradient_report(rows) -> str:
    lines = [f"{'term':<28}{'draws':>6}{'checked':>9}{'skipped':>9}{'max rel err':>14}  status"]
    for r in rows:
        lines.append(f"{r.term:<28}{r.draws:>6}{r.checked:>9}{r.skipped:>9}{r.max_rel_error:>14.3e}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
