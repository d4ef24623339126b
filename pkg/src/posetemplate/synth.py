"""Articulated ground-truth poses and their rendered targets.

Poses are built by walking the anchor-pair graph breadth-first from the root
part.  Every child rotates and scales about the anchor that joins it to its
parent, then translates so that anchor lands exactly on the parent's
transformed anchor, so the connectivity constraint holds by construction.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .evaluate import keypoints_from_transforms
from .geometry import AffineTransform, apply_point, compose
from .losses import transformed_anchors
from .render import PartMaps, render_analytic
from .template import serialize_template

MAX_ATTEMPTS = 100


class SamplingExhaustedError(RuntimeError):
    def __init__(self, attempts, index=None):
        self.attempts = attempts
        self.index = index
        where = f" for sample {index}" if index is not None else ""
        super().__init__(f"no in-frame pose found after {attempts} attempts{where}; ranges too wide for the frame")


@dataclass(frozen=True)
class PoseRanges:
    """Sampling limits; rotations in degrees, per-part entries override the defaults."""

    max_rotation: float = 60.0
    scale: tuple[float, float] = (0.85, 1.15)
    root_translation: float = 0.1
    per_part: dict = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = self.scale
        if self.max_rotation < 0 or lo <= 0 or hi < lo or self.root_translation < 0:
            raise ValueError("invalid pose ranges")

    @classmethod
    def zero(cls) -> PoseRanges:
        return cls(max_rotation=0.0, scale=(1.0, 1.0), root_translation=0.0)

    def rotation_for(self, part: str) -> float:
        return float(self.per_part.get(part, {}).get("max_rotation", self.max_rotation))

    def scale_for(self, part: str) -> tuple[float, float]:
        lo, hi = self.per_part.get(part, {}).get("scale", self.scale)
        return float(lo), float(hi)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale"] = list(self.scale)
        return d


@dataclass(frozen=True)
class PoseSample:
    transforms: tuple
    keypoints_gt: tuple
    seed: int
    rotations: dict = field(default_factory=dict, compare=False)


def _traversal(template):
    """Breadth-first ``(part, parent, own anchor, parent anchor)`` order from the root."""
    adj = template.adjacency()
    root = template.root_part
    order = [(root, None, None, None)]
    seen = {root}
    queue = deque([root])
    while queue:
        part = queue.popleft()
        for other, own_idx, other_idx in adj[part]:
            if other not in seen:
                seen.add(other)
                queue.append(other)
                order.append((other, part, other_idx, own_idx))
    if len(seen) != template.n_parts:
        raise ValueError("template anchor-pair graph is not connected")
    return order


def _draw(template, ranges: PoseRanges, rng: np.random.Generator):
    by_id = {p.id: p for p in template.parts}
    transforms: dict[str, AffineTransform] = {}
    rotations: dict[str, float] = {}
    for part, parent, own_idx, parent_idx in _traversal(template):
        max_rot = np.deg2rad(ranges.rotation_for(part))
        lo, hi = ranges.scale_for(part)
        angle = rng.uniform(-max_rot, max_rot)
        scale = rng.uniform(lo, hi)
        rotations[part] = float(np.rad2deg(angle))
        if parent is None:
            shift = rng.uniform(-ranges.root_translation, ranges.root_translation, size=2)
            local = AffineTransform.similarity(angle, scale, by_id[part].mean)
            transforms[part] = compose(AffineTransform.translation(*shift), local)
            continue
        pivot = np.array(by_id[part].anchors[own_idx])
        local = AffineTransform.similarity(angle, scale, pivot)
        target = apply_point(transforms[parent], by_id[parent].anchors[parent_idx])
        moved = apply_point(local, pivot)
        transforms[part] = compose(AffineTransform.translation(*(target - moved)), local)
    return [transforms[p.id] for p in template.parts], rotations


def sample_pose(template, ranges: PoseRanges = PoseRanges(), seed: int = 0, index=None) -> PoseSample:
    """Draw one connected, in-frame pose; rejection-samples up to ``MAX_ATTEMPTS`` times."""
    rng = np.random.default_rng(seed)
    for _ in range(MAX_ATTEMPTS):
        transforms, rotations = _draw(template, ranges, rng)
        params = np.stack([t.params for t in transforms])
        if np.all(np.abs(transformed_anchors(template, params)) <= 1.0):
            kps = tuple((k, tuple(float(v) for v in xy)) for k, xy in keypoints_from_transforms(template, transforms))
            return PoseSample(tuple(transforms), kps, seed, rotations)
    raise SamplingExhaustedError(MAX_ATTEMPTS, index)


def derive_seed(seed: int, index: int) -> int:
    """Independent per-sample seed, identical whether samples are drawn serially or in parallel."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(template, n: int, ranges: PoseRanges = PoseRanges(), resolution: int = 128,
                     seed: int = 0) -> list[tuple[PoseSample, PartMaps]]:
    if n < 1:
        raise ValueError("n must be at least 1")
    out = []
    for i in range(n):
        sample = sample_pose(template, ranges, derive_seed(seed, i), index=i)
        out.append((sample, render_analytic(template, list(sample.transforms), resolution)))
    return out


def template_hash(template) -> str:
    return hashlib.sha256(serialize_template(template).encode("utf-8")).hexdigest()


def keypoints_csv(keypoints) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for kid, (x, y) in keypoints:
        writer.writerow([kid, repr(float(x)), repr(float(y))])
    return buf.getvalue()


def read_keypoints_csv(path) -> list[tuple[str, tuple[float, float]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    out = []
    for row in rows:
        if len(row) != 3:
            raise ValueError(f"{path}: expected 'id,x,y' rows, got {row!r}")
        out.append((row[0], (float(row[1]), float(row[2]))))
    return out


def write_atomic(path, data) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_dataset(directory, template, dataset, ranges: PoseRanges, resolution: int, seed: int) -> None:
    """Write ``NNNN.pmap``, ``NNNN.gt.csv`` and a JSON ``manifest``."""
    os.makedirs(directory, exist_ok=True)
    for i, (sample, maps) in enumerate(dataset):
        write_atomic(os.path.join(directory, f"{i:04d}.pmap"), maps.to_bytes())
        write_atomic(os.path.join(directory, f"{i:04d}.gt.csv"), keypoints_csv(sample.keypoints_gt))
    manifest = {"template_sha256": template_hash(template), "seed": seed, "n": len(dataset),
                "ranges": ranges.to_dict(), "resolution": resolution,
                "sample_seeds": [s.seed for s, _ in dataset]}
    write_atomic(os.path.join(directory, "manifest"), json.dumps(manifest, indent=2) + "\n")
