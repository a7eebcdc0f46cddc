"""Scenes as sets of bounding boxes with gold referring-expression annotations.

Datasets are JSON Lines files, one scene per line::

    {"version": 1, "id": "s00012", "width": 320, "height": 320,
     "expression": ["red", "ball", "left", "of", "blue", "cube"],
     "parse": "(NP (NP (JJ red) (NN ball)) (PP ...))",
     "boxes": [{"id": 0, "xmin": 4.0, "ymin": 10.0, "xmax": 60.0, "ymax": 52.0,
                "features": [0.02, ...]}, ...],
     "target_id": 3, "supporting_ids": [5]}

Every invariant is checked at load time; nothing is repaired silently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

SCHEMA_VERSION = 1
SPATIAL_DIM = 5


class SceneError(ValueError):
    pass


class SchemaVersionMismatch(SceneError):
    pass


class InvariantViolation(SceneError):
    def __init__(self, message: str, record: int | None = None):
        where = f"record {record}: " if record is not None else ""
        super().__init__(where + message)
        self.record = record


class DegenerateBox(SceneError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    id: int
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    features: tuple[float, ...] = ()

    @property
    def center(self) -> tuple[float, float]:
        return (self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


@dataclass(frozen=True)
class Scene:
    id: str
    width: float
    height: float
    boxes: tuple[BoundingBox, ...]
    expression: tuple[str, ...] = ()
    parse: str = ""
    target_id: int | None = None
    supporting_ids: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        validate_scene(self)

    @property
    def box_ids(self) -> list[int]:
        return [b.id for b in self.boxes]

    def index_of(self, box_id: int) -> int:
        for k, b in enumerate(self.boxes):
            if b.id == box_id:
                return k
        raise KeyError(box_id)

    def box(self, box_id: int) -> BoundingBox:
        return self.boxes[self.index_of(box_id)]

    @property
    def feature_dim(self) -> int:
        return len(self.boxes[0].features) if self.boxes else 0

    def visual_matrix(self) -> np.ndarray:
        return np.array([b.features for b in self.boxes], dtype=np.float64).reshape(len(self.boxes), -1)

    def spatial_matrix(self) -> np.ndarray:
        return np.array([spatial_features(b, self.width, self.height) for b in self.boxes])


def validate_scene(scene: Scene) -> None:
    if not (scene.width > 0 and scene.height > 0):
        raise InvariantViolation(f"image size must be positive, got {scene.width}x{scene.height}")
    if not scene.boxes:
        raise InvariantViolation("scene has no boxes")
    ids = [b.id for b in scene.boxes]
    if len(set(ids)) != len(ids):
        raise InvariantViolation(f"duplicate box ids {ids}")
    dim = len(scene.boxes[0].features)
    for b in scene.boxes:
        if not (b.xmin < b.xmax and b.ymin < b.ymax):
            raise InvariantViolation(f"box {b.id} has xmin>=xmax or ymin>=ymax")
        if b.xmin < 0 or b.ymin < 0 or b.xmax > scene.width or b.ymax > scene.height:
            raise InvariantViolation(f"box {b.id} lies outside the {scene.width}x{scene.height} image")
        if len(b.features) != dim:
            raise InvariantViolation(f"box {b.id} has {len(b.features)} features, expected {dim}")
        if not all(np.isfinite(b.features)):
            raise InvariantViolation(f"box {b.id} has non-finite features")
    if scene.target_id is not None and scene.target_id not in ids:
        raise InvariantViolation(f"target {scene.target_id} is not a box")
    missing = set(scene.supporting_ids) - set(ids)
    if missing:
        raise InvariantViolation(f"supporting ids {sorted(missing)} are not boxes")
    if scene.target_id is not None and scene.target_id in scene.supporting_ids:
        raise InvariantViolation("target listed among supporting objects")


def spatial_features(box: BoundingBox, image_w: float, image_h: float) -> list[float]:
    """Normalized corners plus relative area."""
    if not (box.xmax > box.xmin and box.ymax > box.ymin):
        raise DegenerateBox(f"box {box.id} has zero width or height")
    area = (box.xmax - box.xmin) * (box.ymax - box.ymin)
    return [box.xmin / image_w, box.ymin / image_h, box.xmax / image_w, box.ymax / image_h,
            area / (image_w * image_h)]


def scene_to_dict(scene: Scene) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "id": scene.id,
        "width": scene.width,
        "height": scene.height,
        "expression": list(scene.expression),
        "parse": scene.parse,
        "boxes": [
            {"id": b.id, "xmin": b.xmin, "ymin": b.ymin, "xmax": b.xmax, "ymax": b.ymax,
             "features": list(b.features)}
            for b in scene.boxes
        ],
        "target_id": scene.target_id,
        "supporting_ids": sorted(scene.supporting_ids),
    }


def scene_from_dict(d: dict, record: int | None = None) -> Scene:
    if d.get("version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"record {record}: schema version {d.get('version')!r}, expected {SCHEMA_VERSION}")
    try:
        boxes = tuple(
            BoundingBox(int(b["id"]), float(b["xmin"]), float(b["ymin"]), float(b["xmax"]), float(b["ymax"]),
                        tuple(float(v) for v in b.get("features", ())))
            for b in d["boxes"]
        )
        return Scene(
            id=str(d["id"]),
            width=float(d["width"]),
            height=float(d["height"]),
            boxes=boxes,
            expression=tuple(d.get("expression", ())),
            parse=d.get("parse", ""),
            target_id=None if d.get("target_id") is None else int(d["target_id"]),
            supporting_ids=frozenset(int(i) for i in d.get("supporting_ids", ())),
        )
    except InvariantViolation as e:
        raise InvariantViolation(str(e), record) from None
    except (KeyError, TypeError, ValueError) as e:
        raise InvariantViolation(f"malformed record ({e})", record) from None


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), sort_keys=True, separators=(",", ":"))


def save_dataset(scenes: Iterable[Scene], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for scene in scenes:
            f.write(dumps_scene(scene))
            f.write("\n")


def load_dataset(path) -> list[Scene]:
    scenes = []
    with open(path, encoding="utf-8") as f:
        for k, line in enumerate(f):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise InvariantViolation(f"invalid JSON ({e})", k) from None
            scenes.append(scene_from_dict(d, k))
    return scenes


def resolve_split(path, split: str) -> Path:
    """``path`` itself if it is a file, else ``path/<split>.jsonl``."""
    p = Path(path)
    return p / f"{split}.jsonl" if p.is_dir() else p
