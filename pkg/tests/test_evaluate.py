import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posetemplate.evaluate import (
    METRIC_NAME,
    SQUARED_METRIC_NAME,
    EvalError,
    group_of,
    keypoints_from_transforms,
    per_sample_distances,
    sample_errors,
    score,
)
from posetemplate.geometry import AffineTransform, apply_point


def test_identity_gives_canonical_keypoints(human):
    kps = keypoints_from_transforms(human, [AffineTransform.identity()] * human.n_parts)
    assert [k for k, _ in kps] == human.keypoint_ids
    np.testing.assert_array_equal([xy for _, xy in kps], human.keypoint_points)


def test_global_translation_shifts_every_keypoint(human):
    kps = keypoints_from_transforms(human, [AffineTransform.translation(0.1, 0.0)] * human.n_parts)
    np.testing.assert_allclose([xy for _, xy in kps], human.keypoint_points + [0.1, 0.0], atol=1e-15)


def test_keypoint_on_anchor_follows_the_anchor(human):
    rng = np.random.default_rng(0)
    ts = [AffineTransform(*rng.normal(size=4) + [1, 0, 0, 1], *rng.normal(size=2) * 0.1)
          for _ in range(human.n_parts)]
    kps = dict(keypoints_from_transforms(human, ts))
    hit = 0
    for kd in human.keypoints:
        part = human.parts[human.part_index[kd.part]]
        for a in part.anchors:
            if np.allclose(a, kd.point, atol=0):
                np.testing.assert_array_equal(kps[kd.id], apply_point(ts[human.part_index[kd.part]], a))
                hit += 1
    assert hit > 0


def sample(points):
    return [(f"k{i}", p) for i, p in enumerate(points)]


def test_perfect_prediction_scores_zero(human):
    gt = [list(zip(human.keypoint_ids, human.keypoint_points))]
    report = score(gt, gt)
    assert report.overall == 0.0
    assert all(v == 0.0 for v in report.per_group.values())


def test_single_offset_is_five_percent():
    gt = [[("left_knee", (0.0, 0.0))]]
    pred = [[("left_knee", (0.06, 0.08))]]
    report = score(pred, gt)
    assert report.overall == pytest.approx(5.0)
    assert report.per_group == {"knees": pytest.approx(5.0)}


def test_squared_metric():
    report = score([[("x", (0.06, 0.08))]], [[("x", (0.0, 0.0))]], squared=True)
    assert report.overall == pytest.approx(25.0)
    assert report.metric == SQUARED_METRIC_NAME
    assert score([[("x", (0, 0))]], [[("x", (0, 0))]]).metric == METRIC_NAME


def test_grouping():
    assert group_of("left_wrist") == "hands"
    assert group_of("right_ankle") == "feet"
    assert group_of("head") == "other"
    assert group_of("nose", {"nose": "face"}) == "face"


@st.composite
def keypoint_sets(draw):
    n_samples = draw(st.integers(1, 4))
    ids = ["left_hip", "right_knee", "left_ankle", "head", "right_wrist", "left_shoulder"]
    pt = st.tuples(st.floats(-1, 1), st.floats(-1, 1))
    preds = [[(k, draw(pt)) for k in ids] for _ in range(n_samples)]
    gts = [[(k, draw(pt)) for k in ids] for _ in range(n_samples)]
    return preds, gts


@settings(max_examples=50)
@given(keypoint_sets(), st.randoms())
def test_score_is_permutation_invariant(data, random):
    preds, gts = data
    base = score(preds, gts).overall
    order = list(range(len(preds)))
    random.shuffle(order)
    shuffled_p = [random.sample(preds[i], len(preds[i])) for i in order]
    shuffled_g = [gts[i] for i in order]
    assert score(shuffled_p, shuffled_g).overall == pytest.approx(base, rel=1e-12, abs=1e-12)


@settings(max_examples=50)
@given(keypoint_sets())
def test_overall_is_count_weighted_group_mean(data):
    preds, gts = data
    report = score(preds, gts)
    distances = per_sample_distances(preds, gts)
    counts = {}
    for d in distances:
        for k in d:
            counts[group_of(k)] = counts.get(group_of(k), 0) + 1
    weighted = sum(report.per_group[g] * n for g, n in counts.items()) / sum(counts.values())
    assert report.overall == pytest.approx(weighted, abs=1e-12)


@settings(max_examples=30)
@given(keypoint_sets(), st.floats(0.1, 10.0))
def test_scale_invariance(data, factor):
    # distances scale with the coordinates; dividing by a proportionally scaled width cancels it
    preds, gts = data
    scaled = [[(k, (x * factor, y * factor)) for k, (x, y) in s] for s in preds]
    scaled_gt = [[(k, (x * factor, y * factor)) for k, (x, y) in s] for s in gts]
    assert score(scaled, scaled_gt).overall / factor == pytest.approx(score(preds, gts).overall, rel=1e-9, abs=1e-12)


def test_sample_errors():
    gt = [[("a", (0, 0)), ("b", (0, 0))], [("a", (0, 0)), ("b", (0, 0))]]
    pred = [[("a", (0.1, 0)), ("b", (0.1, 0))], [("a", (0, 0)), ("b", (0, 0.2))]]
    np.testing.assert_allclose(sample_errors(pred, gt), [5.0, 5.0])


@pytest.mark.parametrize("pred, gt", [
    ([[("a", (0, 0))]], [[("b", (0, 0))]]),
    ([], []),
    ([[("a", (0, 0))]], [[("a", (0, 0))], [("a", (0, 0))]]),
])
def test_score_errors(pred, gt):
    with pytest.raises(EvalError):
        score(pred, gt)


def test_report_serialization():
    report = score([[("left_hip", (0.02, 0.0))]], [[("left_hip", (0.0, 0.0))]])
    doc = json.loads(report.to_json())
    assert doc["overall"] == pytest.approx(1.0)
    assert doc["metric"] == METRIC_NAME
    text = report.to_text()
    assert METRIC_NAME in text and "hips" in text
