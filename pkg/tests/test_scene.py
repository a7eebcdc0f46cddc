import json

import numpy as np
import pytest

from groundnet.scene import (
    BoundingBox,
    InvariantViolation,
    Scene,
    SchemaVersionMismatch,
    dumps_scene,
    load_dataset,
    resolve_split,
    save_dataset,
    scene_to_dict,
)
from groundnet.synthgen import WorldSpec, gen_dataset

from helpers import random_scene


def test_empty_file_loads_empty(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_dataset(path) == []


def test_round_trip_generated(tmp_path):
    scenes = gen_dataset(WorldSpec(seed=3), {"train": 100})["train"]
    path = tmp_path / "d.jsonl"
    save_dataset(scenes, path)
    back = load_dataset(path)
    assert back == scenes
    assert [dumps_scene(s) for s in back] == path.read_text().splitlines()


def test_round_trip_random_floats(tmp_path):
    rng = np.random.default_rng(0)
    scenes = [random_scene(rng, int(rng.integers(1, 6)), scene_id=f"r{k}") for k in range(20)]
    save_dataset(scenes, tmp_path / "r.jsonl")
    assert load_dataset(tmp_path / "r.jsonl") == scenes


def _record(**box):
    b = {"id": 0, "xmin": 1.0, "ymin": 1.0, "xmax": 5.0, "ymax": 5.0, "features": [0.0]}
    b.update(box)
    return {"version": 1, "id": "x", "width": 10, "height": 10, "boxes": [b], "target_id": 0}


def test_inverted_box_names_record(tmp_path):
    good = json.dumps(_record())
    bad = json.dumps(_record(xmin=6.0))
    (tmp_path / "d.jsonl").write_text(good + "\n" + good + "\n" + bad + "\n")
    with pytest.raises(InvariantViolation) as e:
        load_dataset(tmp_path / "d.jsonl")
    assert e.value.record == 2
    assert "xmin>=xmax" in str(e.value)


def test_schema_version_mismatch(tmp_path):
    rec = _record()
    rec["version"] = 2
    (tmp_path / "d.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(SchemaVersionMismatch):
        load_dataset(tmp_path / "d.jsonl")


@pytest.mark.parametrize("kwargs,message", [
    ({"target_id": 7}, "target"),
    ({"supporting_ids": frozenset({0})}, "supporting"),
])
def test_scene_invariants(kwargs, message):
    box = BoundingBox(0, 0, 0, 5, 5, (1.0,))
    with pytest.raises(InvariantViolation, match=message):
        Scene("s", 10, 10, (box,), **({"target_id": 0} | kwargs))


def test_box_outside_image():
    with pytest.raises(InvariantViolation, match="outside"):
        Scene("s", 10, 10, (BoundingBox(0, 0, 0, 11, 5, (1.0,)),))


def test_feature_length_must_agree():
    boxes = (BoundingBox(0, 0, 0, 5, 5, (1.0,)), BoundingBox(1, 0, 0, 5, 5, (1.0, 2.0)))
    with pytest.raises(InvariantViolation, match="features"):
        Scene("s", 10, 10, boxes)


def test_every_record_carries_version():
    rec = scene_to_dict(random_scene(np.random.default_rng(0), 2))
    assert rec["version"] == 1


def test_resolve_split(tmp_path):
    assert resolve_split(tmp_path, "val") == tmp_path / "val.jsonl"
    f = tmp_path / "x.jsonl"
    f.write_text("")
    assert resolve_split(f, "val") == f
