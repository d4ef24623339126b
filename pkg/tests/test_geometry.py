import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posetemplate.geometry import (
    AffineTransform,
    Gaussian2,
    SingularTransformError,
    apply_point,
    compose,
    identity_params,
    invert,
    params_to_transforms,
    transform_gaussian,
    transforms_to_params,
)

coord = st.floats(-2.0, 2.0, allow_nan=False)


@st.composite
def transforms(draw):
    a = [draw(st.floats(-2.0, 2.0)) for _ in range(4)]
    if abs(a[0] * a[3] - a[1] * a[2]) < 1e-3:
        a = [1.0, 0.0, 0.0, 1.0]
    return AffineTransform(*a, draw(coord), draw(coord))


def test_apply_point_identity():
    np.testing.assert_array_equal(apply_point(AffineTransform.identity(), (0.3, -0.5)), [0.3, -0.5])


def test_apply_point_translation():
    np.testing.assert_allclose(apply_point(AffineTransform.translation(0.1, 0.2), (0.0, 0.0)), [0.1, 0.2])


def test_quarter_turn_maps_x_axis_to_y_axis():
    np.testing.assert_allclose(apply_point(AffineTransform.rotation(np.pi / 2), (1.0, 0.0)), [0.0, 1.0], atol=1e-15)


def test_apply_point_vectorized():
    t = AffineTransform(1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    pts = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, -1.0]])
    expected = pts @ t.linear.T + t.offset
    np.testing.assert_allclose(apply_point(t, pts), expected)


def test_transform_gaussian_identity_and_translation():
    g = Gaussian2([0.2, -0.1], [[0.02, 0.005], [0.005, 0.01]])
    same = transform_gaussian(AffineTransform.identity(), g)
    np.testing.assert_array_equal(same.mean, g.mean)
    np.testing.assert_array_equal(same.cov, g.cov)
    moved = transform_gaussian(AffineTransform.translation(0.3, 0.4), g)
    np.testing.assert_allclose(moved.mean, [0.5, 0.3])
    np.testing.assert_array_equal(moved.cov, g.cov)


def test_quarter_turn_swaps_axis_variances():
    g = Gaussian2.axis_aligned([0.0, 0.0], [0.04, 0.01])
    out = transform_gaussian(AffineTransform.rotation(np.pi / 2), g)
    np.testing.assert_allclose(out.cov, np.diag([0.01, 0.04]), atol=1e-15)


def test_transform_gaussian_matches_sample_statistics(rng):
    # Monte Carlo oracle: push samples through the map and measure them
    g = Gaussian2([0.1, 0.2], [[0.03, 0.01], [0.01, 0.02]])
    t = AffineTransform(1.2, -0.3, 0.4, 0.8, 0.05, -0.1)
    samples = rng.multivariate_normal(g.mean, g.cov, size=400_000)
    mapped = apply_point(t, samples)
    out = transform_gaussian(t, g)
    np.testing.assert_allclose(mapped.mean(axis=0), out.mean, atol=2e-3)
    np.testing.assert_allclose(np.cov(mapped.T), out.cov, atol=2e-3)


def test_singular_transform_rejected():
    with pytest.raises(SingularTransformError):
        transform_gaussian(AffineTransform(1, 2, 2, 4), Gaussian2.axis_aligned([0, 0], [1, 1]))
    with pytest.raises(SingularTransformError):
        invert(AffineTransform(0, 0, 0, 0))


def test_gaussian_rejects_bad_covariance():
    with pytest.raises(ValueError):
        Gaussian2([0, 0], [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError):
        Gaussian2([0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_compose_examples():
    t = AffineTransform(1.1, 0.2, -0.3, 0.9, 0.4, -0.5)
    assert compose(AffineTransform.identity(), t) == t
    both = compose(AffineTransform.translation(0.1, 0), AffineTransform.translation(0.2, 0))
    np.testing.assert_allclose(both.params, AffineTransform.translation(0.3, 0).params, atol=1e-15)


@given(transforms(), transforms(), transforms())
def test_compose_is_associative(a, b, c):
    left = compose(compose(a, b), c)
    right = compose(a, compose(b, c))
    np.testing.assert_allclose(left.params, right.params, atol=1e-12 * (1 + np.abs(left.params).max()))


@given(transforms(), transforms(), coord, coord)
def test_compose_applies_inner_first(outer, inner, x, y):
    # oracle: two successive point maps
    direct = apply_point(outer, apply_point(inner, (x, y)))
    np.testing.assert_allclose(apply_point(compose(outer, inner), (x, y)), direct, atol=1e-11)


@settings(max_examples=50)
@given(transforms(), coord, coord)
def test_invert_round_trip(t, x, y):
    back = apply_point(invert(t), apply_point(t, (x, y)))
    np.testing.assert_allclose(back, [x, y], atol=1e-8)


@given(st.floats(-np.pi, np.pi), st.floats(0.2, 3.0), coord, coord)
def test_similarity_fixes_its_center(angle, scale, cx, cy):
    t = AffineTransform.similarity(angle, scale, (cx, cy))
    np.testing.assert_allclose(apply_point(t, (cx, cy)), [cx, cy], atol=1e-12)
    assert t.det == pytest.approx(scale**2)


def test_scaling_about_center():
    t = AffineTransform.scaling(2.0, 3.0, center=(1.0, 1.0))
    np.testing.assert_allclose(apply_point(t, (1.0, 1.0)), [1.0, 1.0])
    np.testing.assert_allclose(apply_point(t, (2.0, 2.0)), [3.0, 4.0])


def test_param_round_trip():
    p = np.arange(12, dtype=float) + 0.5
    ts = params_to_transforms(p)
    assert len(ts) == 2 and ts[1].a11 == 6.5 and ts[1].ty == 11.5
    np.testing.assert_array_equal(transforms_to_params(ts), p)
    np.testing.assert_array_equal(identity_params(2), [1, 0, 0, 1, 0, 0] * 2)


def test_from_matrix_accepts_homogeneous():
    m = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [0.0, 0.0, 1.0]])
    assert AffineTransform.from_matrix(m) == AffineTransform(1, 2, 4, 5, 3, 6)
    np.testing.assert_array_equal(AffineTransform.from_matrix(m).matrix, m)
    with pytest.raises(ValueError):
        AffineTransform.from_matrix(np.eye(2))
