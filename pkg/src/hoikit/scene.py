"""Scene domain model: label spaces, ground truth, detections, and dataset files.

The on-disk dataset format is line-delimited text. The first line carries the
label space, each following line one scene, encoded as plain key/value JSON
trees. Integers round-trip byte-exactly and reals are written with 17
significant digits, so saving and reloading a valid dataset reproduces every
field bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .geometry import Box, iou

FORMAT_VERSION = 1

# detection scores live in the open interval (0, 1); files holding boundary
# values are clamped on load so the logistic suppression weight stays defined
SCORE_CLAMP = 1e-6

N_KEYPOINTS = 17

Keypoint = tuple[float, float, int]


class DatasetError(ValueError):
    """Base class for dataset file and invariant problems."""


class ParseError(DatasetError):
    """Malformed record in a dataset file."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True)
class Violation:
    """A single invariant violation, locating the entity that breaks it."""

    scene: str
    entity: str
    invariant: str

    def __str__(self) -> str:
        return f"{self.scene}: {self.entity}: {self.invariant}"


class ValidationError(DatasetError):
    """Raised when loading data whose invariants do not hold."""

    def __init__(self, violations: Sequence[Violation]):
        self.violations = tuple(violations)
        head = "; ".join(str(v) for v in self.violations[:3])
        more = f" (+{len(self.violations) - 3} more)" if len(self.violations) > 3 else ""
        super().__init__(f"{len(self.violations)} invariant violation(s): {head}{more}")


@dataclass(frozen=True)
class HOILabelSpace:
    """Verb and object vocabularies plus the ordered list of HOI categories.

    ``hoi_categories`` holds ``(verb_index, object_index)`` pairs; their order
    defines the score-vector layout everywhere. Object class ids are offset by
    one against ``objects``: class id 0 is reserved for humans, so class id
    ``c`` maps to ``objects[c - 1]``.
    """

    verbs: tuple[str, ...]
    objects: tuple[str, ...]
    hoi_categories: tuple[tuple[int, int], ...]

    @property
    def n_categories(self) -> int:
        return len(self.hoi_categories)

    def object_class_of(self, category_id: int) -> int:
        return self.hoi_categories[category_id][1] + 1

    def category_label(self, category_id: int) -> str:
        vi, oi = self.hoi_categories[category_id]
        return f"{self.verbs[vi]} {self.objects[oi]}"

    def categories_for_object_class(self, class_id: int) -> tuple[int, ...]:
        return tuple(
            i for i, (_, oi) in enumerate(self.hoi_categories) if oi == class_id - 1
        )


@dataclass(frozen=True)
class GroundTruthInstance:
    """A true scene instance; humans carry 17 keypoints, all carry a latent vector."""

    box: Box
    class_id: int
    keypoints: tuple[Keypoint, ...] | None = None
    latent: tuple[float, ...] | None = None


@dataclass(frozen=True)
class Detection:
    """A simulated detector output."""

    box: Box
    class_id: int
    score: float
    keypoints: tuple[Keypoint, ...] | None = None
    latent: tuple[float, ...] | None = None


@dataclass(frozen=True)
class GroundTruthPair:
    """An annotated interacting human/object pair with its HOI category ids."""

    human_box: Box
    object_box: Box
    object_class: int
    hoi_ids: frozenset[int]


@dataclass(frozen=True)
class SceneRecord:
    image_id: str
    width: int
    height: int
    gt_instances: tuple[GroundTruthInstance, ...]
    gt_pairs: tuple[GroundTruthPair, ...]
    detections: tuple[Detection, ...]


@dataclass(frozen=True)
class DatasetBundle:
    """A named dataset: one label space shared by its train and test splits."""

    name: str
    space: HOILabelSpace
    train: tuple[SceneRecord, ...]
    test: tuple[SceneRecord, ...]

    def split(self, name: str) -> tuple[SceneRecord, ...]:
        if name == "train":
            return self.train
        if name == "test":
            return self.test
        raise KeyError(f"unknown split {name!r}")


def derive_interactiveness_label(
    human: Detection,
    obj: Detection,
    scene: SceneRecord,
    iou_threshold: float = 0.5,
) -> int:
    """Binary interactiveness of a detected pair, read off the HOI annotations.

    Returns 1 iff some ground-truth pair of the same object class overlaps the
    candidate on both boxes with IoU at or above the threshold. Matching is
    strictly joint: a pair that matches a ground-truth human box only, or an
    object box only, stays negative.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    if human.class_id != 0:
        raise ValueError(f"expected a human detection, got class_id {human.class_id}")
    if obj.class_id < 1:
        raise ValueError(f"expected an object detection, got class_id {obj.class_id}")
    for pair in scene.gt_pairs:
        if pair.object_class != obj.class_id:
            continue
        if iou(human.box, pair.human_box) >= iou_threshold and (
            iou(obj.box, pair.object_box) >= iou_threshold
        ):
            return 1
    return 0


def matched_hoi_ids(
    human: Detection,
    obj: Detection,
    scene: SceneRecord,
    iou_threshold: float = 0.5,
) -> frozenset[int]:
    """Union of HOI category ids over every ground-truth pair the candidate matches."""
    ids: set[int] = set()
    for pair in scene.gt_pairs:
        if pair.object_class != obj.class_id:
            continue
        if iou(human.box, pair.human_box) >= iou_threshold and (
            iou(obj.box, pair.object_box) >= iou_threshold
        ):
            ids.update(pair.hoi_ids)
    return frozenset(ids)


# ---------------------------------------------------------------------------
# validation


def _check_box(box: Box, width: int, height: int, scene: str, entity: str) -> list[Violation]:
    out = []
    if not (box.x1 < box.x2 and box.y1 < box.y2):
        out.append(Violation(scene, entity, "box: requires x1 < x2 and y1 < y2"))
    if not (0 <= box.x1 and box.x2 <= width and 0 <= box.y1 and box.y2 <= height):
        out.append(Violation(scene, entity, "box: coordinates outside image bounds"))
    return out


def _check_keypoints(
    keypoints: tuple[Keypoint, ...] | None,
    class_id: int,
    scene: str,
    entity: str,
) -> list[Violation]:
    out = []
    if class_id == 0 and keypoints is None:
        out.append(Violation(scene, entity, "keypoints: required for humans"))
    if class_id != 0 and keypoints is not None:
        out.append(Violation(scene, entity, "keypoints: only humans carry keypoints"))
    if keypoints is not None:
        if len(keypoints) != N_KEYPOINTS:
            out.append(
                Violation(scene, entity, f"keypoints: expected {N_KEYPOINTS}, got {len(keypoints)}")
            )
        for k, (x, y, v) in enumerate(keypoints):
            if v not in (0, 1):
                out.append(Violation(scene, entity, f"keypoints[{k}]: visible flag must be 0 or 1"))
            if not (math.isfinite(x) and math.isfinite(y)):
                out.append(Violation(scene, entity, f"keypoints[{k}]: non-finite coordinate"))
    return out


def validate_space(space: HOILabelSpace) -> list[Violation]:
    where = "<label space>"
    out: list[Violation] = []
    if len(set(space.hoi_categories)) != len(space.hoi_categories):
        out.append(Violation(where, "hoi_categories", "entries must be unique"))
    for i, (vi, oi) in enumerate(space.hoi_categories):
        if not 0 <= vi < len(space.verbs):
            out.append(Violation(where, f"hoi_categories[{i}]", "verb index out of range"))
        if not 0 <= oi < len(space.objects):
            out.append(Violation(where, f"hoi_categories[{i}]", "object index out of range"))
    return out


def validate_scene(scene: SceneRecord, space: HOILabelSpace) -> list[Violation]:
    sid = scene.image_id
    out: list[Violation] = []
    if scene.width <= 0 or scene.height <= 0:
        out.append(Violation(sid, "image", "width and height must be positive"))
    for i, inst in enumerate(scene.gt_instances):
        entity = f"gt_instances[{i}]"
        out += _check_box(inst.box, scene.width, scene.height, sid, entity)
        out += _check_keypoints(inst.keypoints, inst.class_id, sid, entity)
        if inst.class_id < 0:
            out.append(Violation(sid, entity, "class_id must be >= 0"))
    for i, det in enumerate(scene.detections):
        entity = f"detections[{i}]"
        out += _check_box(det.box, scene.width, scene.height, sid, entity)
        out += _check_keypoints(det.keypoints, det.class_id, sid, entity)
        if det.class_id < 0:
            out.append(Violation(sid, entity, "class_id must be >= 0"))
        if not 0.0 < det.score < 1.0:
            out.append(Violation(sid, entity, "score strictly inside (0,1)"))
    for i, pair in enumerate(scene.gt_pairs):
        entity = f"gt_pairs[{i}]"
        out += _check_box(pair.human_box, scene.width, scene.height, sid, entity + ".human_box")
        out += _check_box(pair.object_box, scene.width, scene.height, sid, entity + ".object_box")
        if not pair.hoi_ids:
            out.append(Violation(sid, entity, "hoi_ids must be non-empty"))
        for hid in sorted(pair.hoi_ids):
            if not 0 <= hid < space.n_categories:
                out.append(Violation(sid, entity, f"hoi_ids: {hid} out of range"))
            elif space.object_class_of(hid) != pair.object_class:
                out.append(
                    Violation(sid, entity, f"hoi_ids: category {hid} object class mismatch")
                )
    return out


def validate_dataset(
    space: HOILabelSpace, scenes: Sequence[SceneRecord]
) -> list[Violation]:
    """Every invariant violation in the dataset; empty iff the dataset is valid."""
    out = validate_space(space)
    seen: set[str] = set()
    for scene in scenes:
        if scene.image_id in seen:
            out.append(Violation(scene.image_id, "image_id", "duplicate image_id"))
        seen.add(scene.image_id)
        out += validate_scene(scene, space)
    return out


# ---------------------------------------------------------------------------
# serialization

def format_real(value: float) -> str:
    """A real with 17 significant digits; parses back to the identical double."""
    if not math.isfinite(value):
        raise ValueError(f"non-finite real {value!r} cannot be serialized")
    return format(float(value), ".17g")


def encode_record(value) -> str:
    """Encode a key/value tree as one line of JSON with 17-digit reals."""
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format_real(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(encode_record(v) for v in value) + "]"
    if isinstance(value, dict):
        items = (f"{json.dumps(str(k))}:{encode_record(v)}" for k, v in value.items())
        return "{" + ",".join(items) + "}"
    raise TypeError(f"cannot encode {type(value).__name__} in a dataset record")


def _box_record(box: Box) -> list[float]:
    return [box.x1, box.y1, box.x2, box.y2]


def _instance_record(inst: GroundTruthInstance) -> dict:
    return {
        "box": _box_record(inst.box),
        "class_id": inst.class_id,
        "keypoints": None if inst.keypoints is None else [list(k) for k in inst.keypoints],
        "latent": None if inst.latent is None else list(inst.latent),
    }


def _detection_record(det: Detection) -> dict:
    rec = _instance_record(
        GroundTruthInstance(det.box, det.class_id, det.keypoints, det.latent)
    )
    rec["score"] = det.score
    return rec


def scene_record_tree(scene: SceneRecord) -> dict:
    return {
        "image_id": scene.image_id,
        "width": scene.width,
        "height": scene.height,
        "gt_instances": [_instance_record(i) for i in scene.gt_instances],
        "gt_pairs": [
            {
                "human_box": _box_record(p.human_box),
                "object_box": _box_record(p.object_box),
                "object_class": p.object_class,
                "hoi_ids": sorted(p.hoi_ids),
            }
            for p in scene.gt_pairs
        ],
        "detections": [_detection_record(d) for d in scene.detections],
    }


def save_dataset(path: str | Path, space: HOILabelSpace, scenes: Iterable[SceneRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "verbs": list(space.verbs),
        "objects": list(space.objects),
        "hoi_categories": [list(c) for c in space.hoi_categories],
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(encode_record(header) + "\n")
        for scene in scenes:
            fh.write(encode_record(scene_record_tree(scene)) + "\n")


def _require(record: dict, key: str, line_number: int):
    if key not in record:
        raise ParseError(f"missing field {key!r}", line_number)
    return record[key]


def _parse_box(raw, line_number: int) -> Box:
    if not isinstance(raw, list) or len(raw) != 4:
        raise ParseError("box must be a list of four reals", line_number)
    return Box(*(float(v) for v in raw))


def _parse_keypoints(raw, line_number: int) -> tuple[Keypoint, ...] | None:
    if raw is None:
        return None
    if not isinstance(raw, list):
        raise ParseError("keypoints must be a list or null", line_number)
    kps = []
    for item in raw:
        if not isinstance(item, list) or len(item) != 3:
            raise ParseError("keypoint must be [x, y, visible]", line_number)
        kps.append((float(item[0]), float(item[1]), int(item[2])))
    return tuple(kps)


def _parse_latent(raw, line_number: int) -> tuple[float, ...] | None:
    if raw is None:
        return None
    if not isinstance(raw, list):
        raise ParseError("latent must be a list or null", line_number)
    return tuple(float(v) for v in raw)


def _parse_scene(record: dict, line_number: int) -> SceneRecord:
    instances = []
    for raw in _require(record, "gt_instances", line_number):
        instances.append(
            GroundTruthInstance(
                box=_parse_box(_require(raw, "box", line_number), line_number),
                class_id=int(_require(raw, "class_id", line_number)),
                keypoints=_parse_keypoints(raw.get("keypoints"), line_number),
                latent=_parse_latent(raw.get("latent"), line_number),
            )
        )
    pairs = []
    for raw in _require(record, "gt_pairs", line_number):
        pairs.append(
            GroundTruthPair(
                human_box=_parse_box(_require(raw, "human_box", line_number), line_number),
                object_box=_parse_box(_require(raw, "object_box", line_number), line_number),
                object_class=int(_require(raw, "object_class", line_number)),
                hoi_ids=frozenset(int(h) for h in _require(raw, "hoi_ids", line_number)),
            )
        )
    detections = []
    for raw in _require(record, "detections", line_number):
        score = float(_require(raw, "score", line_number))
        score = min(max(score, SCORE_CLAMP), 1.0 - SCORE_CLAMP)
        detections.append(
            Detection(
                box=_parse_box(_require(raw, "box", line_number), line_number),
                class_id=int(_require(raw, "class_id", line_number)),
                score=score,
                keypoints=_parse_keypoints(raw.get("keypoints"), line_number),
                latent=_parse_latent(raw.get("latent"), line_number),
            )
        )
    return SceneRecord(
        image_id=str(_require(record, "image_id", line_number)),
        width=int(_require(record, "width", line_number)),
        height=int(_require(record, "height", line_number)),
        gt_instances=tuple(instances),
        gt_pairs=tuple(pairs),
        detections=tuple(detections),
    )


def load_dataset(path: str | Path) -> tuple[HOILabelSpace, tuple[SceneRecord, ...]]:
    """Load and validate one dataset file.

    Raises ``ParseError`` (with the offending line number) on malformed
    records and ``ValidationError`` when a record parses but breaks a type
    invariant. Detection scores at the closed boundary are clamped into
    ``(0, 1)`` before validation.
    """
    path = Path(path)
    scenes: list[SceneRecord] = []
    space: HOILabelSpace | None = None
    with path.open("r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid record: {exc.msg}", line_number) from None
            if not isinstance(record, dict):
                raise ParseError("record must be a key/value object", line_number)
            if space is None:
                version = _require(record, "format_version", line_number)
                if version != FORMAT_VERSION:
                    raise ParseError(f"unsupported format_version {version!r}", line_number)
                space = HOILabelSpace(
                    verbs=tuple(str(v) for v in _require(record, "verbs", line_number)),
                    objects=tuple(str(o) for o in _require(record, "objects", line_number)),
                    hoi_categories=tuple(
                        (int(c[0]), int(c[1]))
                        for c in _require(record, "hoi_categories", line_number)
                    ),
                )
            else:
                scenes.append(_parse_scene(record, line_number))
    if space is None:
        raise ParseError("dataset file is empty (no label space)", 1)
    violations = validate_dataset(space, scenes)
    if violations:
        raise ValidationError(violations)
    return space, tuple(scenes)


def save_bundle(root: str | Path, bundle: DatasetBundle) -> Path:
    root = Path(root) / bundle.name
    save_dataset(root / "train.jsonl", bundle.space, bundle.train)
    save_dataset(root / "test.jsonl", bundle.space, bundle.test)
    return root


def load_bundle(root: str | Path, name: str | None = None) -> DatasetBundle:
    """Load a dataset directory holding ``train.jsonl`` and ``test.jsonl``."""
    root = Path(root)
    space_train, train = load_dataset(root / "train.jsonl")
    space_test, test = load_dataset(root / "test.jsonl")
    if space_train != space_test:
        raise ValidationError(
            [Violation("<bundle>", root.name, "train/test label spaces differ")]
        )
    return DatasetBundle(name=name or root.name, space=space_train, train=train, test=test)
