"""Shared builders and independent reference implementations for tests."""

import math

import numpy as np

from groundnet.compiler import INTERSECT, LOCATE, RELATE
from groundnet.modules import GroundNetParams, ModelConfig, Vocabulary, intersect, locate, relate
from groundnet.scene import BoundingBox, Scene, spatial_features

WORDS = ["red", "ball", "left", "blue", "cube", "half", "sandwich", "on", "right", "side", "plate",
         "nearest", "coffee", "mug", "green", "cone", "above"]


def random_scene(rng, n_boxes, visual_dim=4, width=200.0, height=150.0, scene_id="t"):
    boxes = []
    for k in range(n_boxes):
        x0 = rng.uniform(0, width - 20)
        y0 = rng.uniform(0, height - 20)
        x1 = rng.uniform(x0 + 1, width)
        y1 = rng.uniform(y0 + 1, height)
        boxes.append(BoundingBox(k, float(x0), float(y0), float(x1), float(y1),
                                 tuple(float(v) for v in rng.normal(size=visual_dim))))
    return Scene(scene_id, width, height, tuple(boxes), target_id=0)


def random_params(seed, visual_dim=4, size=8, relate_norm="column_softmax"):
    cfg = ModelConfig(hidden=size, embed=size, visual_dim=visual_dim, relate_norm=relate_norm)
    params = GroundNetParams.initialize(Vocabulary(WORDS), cfg, seed)
    rng = np.random.default_rng(seed + 12345)
    for t in params.parameters():
        t.data += rng.normal(scale=0.5, size=t.shape)
    return params


def relate_oracle(scene, text, input_dist, proj, score):
    """Relate output by explicit loops over box pairs, column-normalized."""
    R = len(scene.boxes)
    sp = [spatial_features(b, scene.width, scene.height) for b in scene.boxes]
    S = [[0.0] * R for _ in range(R)]
    for i in range(R):
        for j in range(R):
            r = sp[i] + sp[j]
            z = []
            for e in range(len(text)):
                z.append(sum(proj[e][k] * r[k] for k in range(len(r))) * text[e])
            norm = math.sqrt(sum(v * v for v in z)) + 1e-8
            S[i][j] = sum(score[0][e] * z[e] / norm for e in range(len(z)))
    out = [0.0] * R
    for j in range(R):
        col = [math.exp(S[i][j]) for i in range(R)]
        tot = sum(col)
        for i in range(R):
            out[i] += col[i] / tot * input_dist[j]
    return out


def compose(graph, scene, params, nid=None):
    """Evaluate a graph by direct recursion over node inputs."""
    nid = graph.root if nid is None else nid
    node = graph.nodes[nid]
    if node.kind == LOCATE:
        return locate(node.phrase, scene, params)
    if node.kind == RELATE:
        return relate(node.phrase, scene, compose(graph, scene, params, node.inputs[0]), params)
    assert node.kind == INTERSECT
    return intersect(compose(graph, scene, params, node.inputs[0]), compose(graph, scene, params, node.inputs[1]))
