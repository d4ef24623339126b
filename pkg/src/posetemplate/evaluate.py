"""Keypoints from fitted transforms, and the joint-distance metric.

Distances are measured in normalized coordinates and reported as a
percentage of the image side, which spans 2 normalized units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .render import _as_params

DOMAIN_WIDTH = 2.0
METRIC_NAME = "mean joint distance, % of image size"
SQUARED_METRIC_NAME = "mean squared joint distance, % of image size squared"

DEFAULT_GROUPS = {
    "left_hip": "hips", "right_hip": "hips",
    "left_knee": "knees", "right_knee": "knees",
    "left_ankle": "feet", "right_ankle": "feet",
    "left_shoulder": "shoulders", "right_shoulder": "shoulders",
    "left_wrist": "hands", "right_wrist": "hands",
}
GROUP_ORDER = ("hips", "knees", "feet", "shoulders", "hands", "other")


class EvalError(ValueError):
    pass


def keypoints_from_transforms(template, transforms) -> list[tuple[str, np.ndarray]]:
    """Each keypoint's defining point mapped through its owning part's transform."""
    params = _as_params(transforms, template.n_parts)
    p = params[template.keypoint_owner]
    pts = template.keypoint_points
    xy = np.stack([p[:, 0] * pts[:, 0] + p[:, 1] * pts[:, 1] + p[:, 4],
                   p[:, 2] * pts[:, 0] + p[:, 3] * pts[:, 1] + p[:, 5]], axis=1)
    return [(k.id, xy[i]) for i, k in enumerate(template.keypoints)]


def group_of(keypoint_id: str, groups=None) -> str:
    return (DEFAULT_GROUPS if groups is None else groups).get(keypoint_id, "other")


@dataclass(frozen=True)
class EvalReport:
    overall: float
    per_group: dict = field(default_factory=dict)
    n_samples: int = 0
    n_keypoints: int = 0
    squared: bool = False

    @property
    def metric(self) -> str:
        return SQUARED_METRIC_NAME if self.squared else METRIC_NAME

    def to_dict(self) -> dict:
        return {"metric": self.metric, "overall": self.overall, "per_group": dict(self.per_group),
                "n_samples": self.n_samples, "n_keypoints": self.n_keypoints}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self) -> str:
        lines = [f"metric: {self.metric}",
                 f"samples: {self.n_samples}  keypoints: {self.n_keypoints}",
                 f"{'all':<12}{self.overall:10.4f}"]
        lines += [f"{name:<12}{value:10.4f}" for name, value in self.per_group.items()]
        return "\n".join(lines) + "\n"


def _as_mapping(sample) -> dict:
    if isinstance(sample, dict):
        return {k: np.asarray(v, dtype=float) for k, v in sample.items()}
    return {k: np.asarray(v, dtype=float) for k, v in sample}


def per_sample_distances(predictions, ground_truth) -> list[dict]:
    """Euclidean keypoint distances (normalized units), one dict per sample."""
    if len(predictions) != len(ground_truth):
        raise EvalError(f"{len(predictions)} predicted samples vs {len(ground_truth)} ground-truth samples")
    if not predictions:
        raise EvalError("nothing to score")
    out = []
    for i, (pred, gt) in enumerate(zip(predictions, ground_truth)):
        pred, gt = _as_mapping(pred), _as_mapping(gt)
        if set(pred) != set(gt):
            raise EvalError(f"sample {i}: keypoint ids differ ({sorted(set(pred) ^ set(gt))})")
        out.append({k: float(np.linalg.norm(pred[k] - gt[k])) for k in gt})
    return out


def score(predictions, ground_truth, groups=None, squared: bool = False) -> EvalReport:
    """Mean joint distance in percent of image size, overall and per keypoint group.

    ``predictions`` and ``ground_truth`` hold one entry per sample, each a
    mapping (or list of pairs) from keypoint id to an ``(x, y)`` point.
    With ``squared`` the mean squared distance is reported instead, in
    percent-of-image-size units squared.
    """
    distances = per_sample_distances(predictions, ground_truth)
    buckets: dict[str, list[float]] = {}
    everything = []
    for sample in distances:
        for kid in sorted(sample):
            d = sample[kid] / DOMAIN_WIDTH * 100.0
            value = d * d if squared else d
            buckets.setdefault(group_of(kid, groups), []).append(value)
            everything.append(value)
    if not everything:
        raise EvalError("no keypoints to score")
    ordered = [g for g in GROUP_ORDER if g in buckets] + sorted(set(buckets) - set(GROUP_ORDER))
    per_group = {g: float(np.mean(buckets[g])) for g in ordered}
    return EvalReport(float(np.mean(everything)), per_group, len(distances),
                      len(everything), squared)


def sample_errors(predictions, ground_truth) -> np.ndarray:
    """Per-sample mean joint distance, percent of image size."""
    return np.array([np.mean(list(d.values())) / DOMAIN_WIDTH * 100.0
                     for d in per_sample_distances(predictions, ground_truth)])
