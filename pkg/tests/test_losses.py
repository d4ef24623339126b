import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posetemplate.geometry import identity_params
from posetemplate.losses import (
    BlurPyramidFeatures,
    IdentityFeatures,
    LossBreakdown,
    LossConfig,
    PoolPyramidFeatures,
    anchor_loss,
    boundary_loss,
    make_features,
    reconstruction_loss,
    total_loss,
)
from posetemplate.render import PartMaps, render_analytic
from posetemplate.template import template_from_dict


def chain(n_pairs):
    """Parts in a row, consecutive ones joined at a shared anchor on the x axis."""
    parts = []
    for i in range(n_pairs + 1):
        anchors = [[0.1 * i, 0.0], [0.1 * (i + 1), 0.0]]
        parts.append({"id": f"p{i}", "mean": [0.1 * i + 0.05, 0.0], "variance": [0.01, 0.01], "anchors": anchors})
    pairs = [{"first": [f"p{i}", 1], "second": [f"p{i + 1}", 0]} for i in range(n_pairs)]
    return template_from_dict({"parts": parts, "anchor_pairs": pairs})


def shifted(template, offsets):
    p = identity_params(template.n_parts).reshape(-1, 6)
    p[:, 4:] = offsets
    return p


def test_anchor_loss_zero_at_canonical(human):
    assert anchor_loss(human, identity_params(human.n_parts)) == 0.0


def test_anchor_loss_single_pair():
    t = chain(1)
    # shared anchor at (0.1, 0); moving the second part by (0.3, 0.4) separates it by 0.5
    assert anchor_loss(t, shifted(t, [[0, 0], [0.3, 0.4]])) == pytest.approx(0.25)


def test_anchor_loss_is_mean_over_pairs():
    t = chain(2)
    p = shifted(t, [[0, 0], [0.3, 0.4], [0.3, 0.5]])  # gaps 0.5 and 0.1
    assert anchor_loss(t, p) == pytest.approx((0.25 + 0.01) / 2)


def test_boundary_loss_examples():
    t = chain(1)
    assert boundary_loss(t, identity_params(2)) == 0.0
    # anchors of p0 at (0,0) and (0.1,0); push p0's far anchor to x = 1.5
    assert boundary_loss(t, shifted(t, [[1.4, 0.0], [0.0, 0.0]])) == pytest.approx(1.5 + 1.4)
    p = shifted(t, [[-2.0, 1.2], [0.0, 0.0]])  # p0 anchors at (-2, 1.2) and (-1.9, 1.2)
    assert boundary_loss(t, p) == pytest.approx(2.0 + 1.2 + 1.9 + 1.2)


def test_boundary_loss_respects_b():
    t = chain(1)
    p = shifted(t, [[0.0, 0.0], [0.0, 0.7]])
    assert boundary_loss(t, p, boundary_b=1.0) == 0.0
    assert boundary_loss(t, p, boundary_b=0.5) == pytest.approx(1.4)


def test_reconstruction_examples(rng):
    r = rng.uniform(size=(3, 8, 8))
    assert reconstruction_loss(PartMaps(r), PartMaps(r)) == 0.0
    assert reconstruction_loss(r, np.zeros_like(r)) == pytest.approx(r.sum() / r.size)


def test_reconstruction_shape_mismatch():
    with pytest.raises(ValueError):
        reconstruction_loss(np.zeros((2, 8, 8)), np.zeros((2, 16, 16)))


def test_total_loss_examples(human, rng):
    ident = identity_params(human.n_parts)
    canon = render_analytic(human, ident, 32)
    assert total_loss(human, ident, canon, LossConfig()).total == 0.0

    p = ident.reshape(-1, 6).copy()
    p[:, 4:] += rng.normal(0, 0.05, size=(human.n_parts, 2))
    own = render_analytic(human, p, 32)
    br = total_loss(human, p, own, LossConfig(lambda1=2.0, lambda2=3.0))
    assert br.recon == 0.0
    assert br.anchor == pytest.approx(anchor_loss(human, p))
    assert br.total == pytest.approx(2.0 * br.anchor + 3.0 * br.boundary)

    off = total_loss(human, p, canon, LossConfig(lambda1=0.0, lambda2=0.0))
    assert off.total == off.recon > 0


def test_breakdown_combine():
    b = LossBreakdown.combine(1.0, 2.0, 3.0, LossConfig(lambda1=0.5, lambda2=0.25))
    assert b.total == pytest.approx(1.0 + 1.0 + 0.75)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda1=-1.0)
    with pytest.raises(ValueError):
        LossConfig(boundary_b=0.0)


def test_make_features():
    assert isinstance(make_features("identity"), IdentityFeatures)
    assert make_features("pool:1,4").factors == (1, 4)
    assert make_features("blur:1.5").sigmas == (1.5,)
    with pytest.raises(ValueError):
        make_features("learned")


def test_pool_levels_are_block_sums(rng):
    x = rng.uniform(size=(2, 8, 8))
    out = PoolPyramidFeatures((1, 2, 4))(x)
    blocks4 = np.array([[[x[k, 4 * i:4 * i + 4, 4 * j:4 * j + 4].sum() for j in range(2)] for i in range(2)]
                        for k in range(2)])
    np.testing.assert_allclose(out[-8:], blocks4.ravel())
    assert out.size == 2 * (64 + 16 + 4)


def test_pool_skips_factors_that_do_not_divide():
    assert PoolPyramidFeatures((1, 3))(np.ones((1, 8, 8))).size == 64


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["pool:1,2,4,8", "pool:2,8", "blur:1,2", "identity"]))
def test_feature_backward_is_adjoint(seed, spec):
    # <F x, y> == <x, F^T y>
    r = np.random.default_rng(seed)
    f = make_features(spec)
    x = r.normal(size=(2, 16, 16))
    fx = f(x)
    y = r.normal(size=fx.shape)
    assert np.vdot(fx, y) == pytest.approx(np.vdot(x, f.backward(y, x.shape)), rel=1e-10, abs=1e-10)


def test_blur_features_shape(rng):
    x = rng.uniform(size=(2, 16, 16))
    assert BlurPyramidFeatures((1.0, 2.0))(x).shape == (3, 2, 16, 16)
    assert BlurPyramidFeatures((1.0,), include_identity=False)(x).shape == (1, 2, 16, 16)
