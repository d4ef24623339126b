"""Part-based body template: Gaussian parts, anchor points, keypoints.

Templates are stored as JSON documents::

    {
      "root": "torso",                       # optional, defaults to the first part
      "parts": [{"id": ..., "label": ..., "mean": [x, y], "variance": [vx, vy],
                 "anchors": [[x, y], ...], "anchor_names": [...]}],
      "anchor_pairs": [{"first": [part, idx], "second": [part, idx]}],
      "keypoints": [{"id": ..., "part": ..., "point": [x, y]}]
    }

All geometry is in normalized image coordinates, ``[-1, 1]^2`` with the
origin at the image center, ``+x`` to the right and ``+y`` down.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

import numpy as np

MAX_ANCHORS = 3
COINCIDENCE_TOL = 1e-9


class TemplateError(ValueError):
    pass


class TemplateSchemaError(TemplateError):
    pass


class TemplateReferenceError(TemplateError):
    pass


class TemplateGeometryError(TemplateError):
    pass


def _in_domain(p) -> bool:
    return all(-1.0 <= v <= 1.0 for v in p)


@dataclass(frozen=True)
class GaussianPart:
    id: str
    mean: tuple[float, float]
    variance: tuple[float, float]
    anchors: tuple[tuple[float, float], ...]
    label: str = ""
    anchor_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not all(v > 0 for v in self.variance):
            raise TemplateGeometryError(f"part {self.id!r}: variance must be strictly positive, got {self.variance}")
        if not 1 <= len(self.anchors) <= MAX_ANCHORS:
            raise TemplateGeometryError(f"part {self.id!r}: needs 1 to {MAX_ANCHORS} anchors, got {len(self.anchors)}")
        if not _in_domain(self.mean) or not all(_in_domain(a) for a in self.anchors):
            raise TemplateGeometryError(f"part {self.id!r}: mean and anchors must lie in [-1, 1]^2")
        if self.anchor_names and len(self.anchor_names) != len(self.anchors):
            raise TemplateSchemaError(f"part {self.id!r}: anchor_names must match anchors in length")


@dataclass(frozen=True)
class AnchorPair:
    first: tuple[str, int]
    second: tuple[str, int]


@dataclass(frozen=True)
class KeypointDef:
    id: str
    part: str
    point: tuple[float, float]


@dataclass(frozen=True)
class Template:
    """Immutable template; construction validates every cross-reference."""

    parts: tuple[GaussianPart, ...]
    anchor_pairs: tuple[AnchorPair, ...]
    keypoints: tuple[KeypointDef, ...] = ()
    root: str | None = None
    description: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.parts:
            raise TemplateSchemaError("template needs at least one part")
        ids = [p.id for p in self.parts]
        if len(set(ids)) != len(ids):
            raise TemplateSchemaError("part ids must be unique")
        index = {pid: i for i, pid in enumerate(ids)}
        if self.root is not None and self.root not in index:
            raise TemplateReferenceError(f"root part {self.root!r} is not defined")
        for pair in self.anchor_pairs:
            for part, idx in (pair.first, pair.second):
                if part not in index:
                    raise TemplateReferenceError(f"anchor pair references undefined part {part!r}")
                if not 0 <= idx < len(self.parts[index[part]].anchors):
                    raise TemplateReferenceError(f"anchor pair references missing anchor {idx} of part {part!r}")
            if pair.first[0] == pair.second[0]:
                raise TemplateReferenceError(f"anchor pair joins part {pair.first[0]!r} to itself")
            a = np.array(self.parts[index[pair.first[0]]].anchors[pair.first[1]])
            b = np.array(self.parts[index[pair.second[0]]].anchors[pair.second[1]])
            if np.linalg.norm(a - b) > COINCIDENCE_TOL:
                raise TemplateGeometryError(
                    f"anchors {pair.first} and {pair.second} do not coincide in the canonical pose")
        kp_ids = [k.id for k in self.keypoints]
        if len(set(kp_ids)) != len(kp_ids):
            raise TemplateSchemaError("keypoint ids must be unique")
        for kp in self.keypoints:
            if kp.part not in index:
                raise TemplateReferenceError(f"keypoint {kp.id!r} references undefined part {kp.part!r}")
            if not _in_domain(kp.point):
                raise TemplateGeometryError(f"keypoint {kp.id!r} must lie in [-1, 1]^2")

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    @property
    def part_ids(self) -> list[str]:
        return [p.id for p in self.parts]

    @property
    def keypoint_ids(self) -> list[str]:
        return [k.id for k in self.keypoints]

    @property
    def root_part(self) -> str:
        return self.root if self.root is not None else self.parts[0].id

    @cached_property
    def part_index(self) -> dict[str, int]:
        return {p.id: i for i, p in enumerate(self.parts)}

    @cached_property
    def means(self) -> np.ndarray:
        return np.array([p.mean for p in self.parts], dtype=float)

    @cached_property
    def variances(self) -> np.ndarray:
        return np.array([p.variance for p in self.parts], dtype=float)

    @cached_property
    def anchor_points(self) -> np.ndarray:
        """All anchors stacked, shape ``(n_anchors, 2)``."""
        return np.array([a for p in self.parts for a in p.anchors], dtype=float)

    @cached_property
    def anchor_owner(self) -> np.ndarray:
        """Owning part index of each row of :attr:`anchor_points`."""
        return np.array([i for i, p in enumerate(self.parts) for _ in p.anchors], dtype=int)

    @cached_property
    def _anchor_offset(self) -> list[int]:
        return list(np.cumsum([0] + [len(p.anchors) for p in self.parts]))

    def anchor_row(self, part: str, idx: int) -> int:
        return int(self._anchor_offset[self.part_index[part]] + idx)

    @cached_property
    def pair_rows(self) -> np.ndarray:
        """``(M, 2)`` rows into :attr:`anchor_points` for every anchor pair."""
        rows = [(self.anchor_row(*p.first), self.anchor_row(*p.second)) for p in self.anchor_pairs]
        return np.array(rows, dtype=int).reshape(-1, 2)

    @cached_property
    def keypoint_points(self) -> np.ndarray:
        return np.array([k.point for k in self.keypoints], dtype=float).reshape(-1, 2)

    @cached_property
    def keypoint_owner(self) -> np.ndarray:
        return np.array([self.part_index[k.part] for k in self.keypoints], dtype=int)

    def adjacency(self) -> dict[str, list[tuple[str, int, int]]]:
        """Neighbours of each part as ``(other part, own anchor idx, other anchor idx)``."""
        adj: dict[str, list[tuple[str, int, int]]] = {p.id: [] for p in self.parts}
        for pair in self.anchor_pairs:
            (pa, ia), (pb, ib) = pair.first, pair.second
            adj[pa].append((pb, ia, ib))
            adj[pb].append((pa, ib, ia))
        return adj

    def is_connected(self) -> bool:
        adj = self.adjacency()
        seen = {self.root_part}
        queue = deque(seen)
        while queue:
            for other, _, _ in adj[queue.popleft()]:
                if other not in seen:
                    seen.add(other)
                    queue.append(other)
        return len(seen) == self.n_parts

    def to_dict(self) -> dict:
        doc: dict = {}
        if self.description:
            doc["description"] = self.description
        if self.root is not None:
            doc["root"] = self.root
        parts = []
        for p in self.parts:
            entry = {"id": p.id, "label": p.label, "mean": list(p.mean), "variance": list(p.variance),
                     "anchors": [list(a) for a in p.anchors]}
            if p.anchor_names:
                entry["anchor_names"] = list(p.anchor_names)
            parts.append(entry)
        doc["parts"] = parts
        doc["anchor_pairs"] = [{"first": list(a.first), "second": list(a.second)} for a in self.anchor_pairs]
        doc["keypoints"] = [{"id": k.id, "part": k.part, "point": list(k.point)} for k in self.keypoints]
        return doc


def _vec2(value, what: str) -> tuple[float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise TemplateSchemaError(f"{what}: expected a list of two numbers, got {value!r}")
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
            raise TemplateSchemaError(f"{what}: expected finite numbers, got {value!r}")
        out.append(float(v))
    return out[0], out[1]


def _require(obj, key: str, what: str):
    if not isinstance(obj, dict):
        raise TemplateSchemaError(f"{what}: expected an object, got {type(obj).__name__}")
    if key not in obj:
        raise TemplateSchemaError(f"{what}: missing field {key!r}")
    return obj[key]


def _ref(value, what: str) -> tuple[str, int]:
    if (not isinstance(value, (list, tuple)) or len(value) != 2 or not isinstance(value[0], str)
            or isinstance(value[1], bool) or not isinstance(value[1], int)):
        raise TemplateSchemaError(f"{what}: expected [part_id, anchor_index], got {value!r}")
    return value[0], value[1]


def template_from_dict(doc: dict) -> Template:
    if not isinstance(doc, dict):
        raise TemplateSchemaError("template document must be an object")
    unknown = set(doc) - {"parts", "anchor_pairs", "keypoints", "root", "description"}
    if unknown:
        raise TemplateSchemaError(f"unknown top-level keys: {sorted(unknown)}")
    raw_parts = _require(doc, "parts", "template")
    raw_pairs = _require(doc, "anchor_pairs", "template")
    raw_kps = doc.get("keypoints", [])
    for name, value in (("parts", raw_parts), ("anchor_pairs", raw_pairs), ("keypoints", raw_kps)):
        if not isinstance(value, list):
            raise TemplateSchemaError(f"{name} must be a list")

    parts = []
    for i, rp in enumerate(raw_parts):
        where = f"parts[{i}]"
        pid = _require(rp, "id", where)
        if not isinstance(pid, str) or not pid:
            raise TemplateSchemaError(f"{where}.id must be a non-empty string")
        anchors = _require(rp, "anchors", where)
        if not isinstance(anchors, list):
            raise TemplateSchemaError(f"{where}.anchors must be a list")
        names = rp.get("anchor_names", [])
        if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
            raise TemplateSchemaError(f"{where}.anchor_names must be a list of strings")
        label = rp.get("label", "")
        if not isinstance(label, str):
            raise TemplateSchemaError(f"{where}.label must be a string")
        parts.append(GaussianPart(
            id=pid,
            label=label,
            mean=_vec2(_require(rp, "mean", where), f"{where}.mean"),
            variance=_vec2(_require(rp, "variance", where), f"{where}.variance"),
            anchors=tuple(_vec2(a, f"{where}.anchors[{j}]") for j, a in enumerate(anchors)),
            anchor_names=tuple(names),
        ))

    pairs = [AnchorPair(_ref(_require(rp, "first", f"anchor_pairs[{i}]"), f"anchor_pairs[{i}].first"),
                        _ref(_require(rp, "second", f"anchor_pairs[{i}]"), f"anchor_pairs[{i}].second"))
             for i, rp in enumerate(raw_pairs)]

    keypoints = []
    for i, rk in enumerate(raw_kps):
        where = f"keypoints[{i}]"
        kid, part = _require(rk, "id", where), _require(rk, "part", where)
        if not isinstance(kid, str) or not isinstance(part, str):
            raise TemplateSchemaError(f"{where}: id and part must be strings")
        keypoints.append(KeypointDef(kid, part, _vec2(_require(rk, "point", where), f"{where}.point")))

    root = doc.get("root")
    if root is not None and not isinstance(root, str):
        raise TemplateSchemaError("root must be a part id")
    return Template(tuple(parts), tuple(pairs), tuple(keypoints), root=root,
                    description=str(doc.get("description", "")))


def parse_template(text: str) -> Template:
    """Parse and validate template-file contents."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TemplateSchemaError(f"template is not valid JSON: {exc}") from exc
    return template_from_dict(doc)


def serialize_template(template: Template) -> str:
    return json.dumps(template.to_dict(), indent=2) + "\n"


def load_template(path) -> Template:
    with open(path, encoding="utf-8") as fh:
        return parse_template(fh.read())


def canonical_human_template() -> Template:
    """The shipped 18-part T-pose template."""
    text = resources.files("posetemplate.data").joinpath("canonical_human.json").read_text(encoding="utf-8")
    return parse_template(text)
