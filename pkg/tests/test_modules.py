import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groundnet import tensor as T
from groundnet.compiler import compile_ptb
from groundnet.modules import (
    DistributionNotNormalized,
    EmptyPhrase,
    FeatureLengthMismatch,
    GroundNetParams,
    ModelConfig,
    NodeExecutionError,
    VanishingMass,
    Vocabulary,
    attend,
    encode_phrase,
    execute,
    intersect,
    locate,
    nll_loss,
    relate,
    relation_matrix,
)
from groundnet.scene import BoundingBox, DegenerateBox, Scene, spatial_features
from groundnet.selfcheck import check_modules
from groundnet.synthgen import WorldSpec, random_parse
from groundnet.tensor import Tensor, rng_stream

from conftest import SANDWICH_TREE
from helpers import compose, random_params, random_scene, relate_oracle


# -- spatial features -------------------------------------------------------

@pytest.mark.parametrize("box,size,expected", [
    ((64, 48, 320, 240), (640, 480), [0.1, 0.1, 0.5, 0.5, 0.16]),
    ((0, 0, 640, 480), (640, 480), [0, 0, 1, 1, 1]),
    ((0, 0, 1, 1), (100, 100), [0, 0, 0.01, 0.01, 0.0001]),
])
def test_spatial_features(box, size, expected):
    np.testing.assert_allclose(spatial_features(BoundingBox(0, *box), *size), expected, atol=1e-15)


def test_degenerate_box():
    with pytest.raises(DegenerateBox):
        spatial_features(BoundingBox(0, 5, 5, 5, 9), 10, 10)


# -- attend -----------------------------------------------------------------

def test_attend_single_word_is_embedding():
    p = random_params(0)
    out = attend(["ball"], p)
    np.testing.assert_array_equal(out.data, p["embedding"].data[p.vocab.ids(["ball"])[0]])


def test_attend_identical_states_uniform_weights():
    p = random_params(1)
    p["attend.weight"].data[:] = 0.0
    _, _, a = encode_phrase(["ball", "ball"], p)
    np.testing.assert_allclose(a.data, [0.5, 0.5], atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_attend_in_convex_hull(seed):
    p = random_params(seed)
    rng = np.random.default_rng(seed)
    words = list(rng.choice(["red", "ball", "left", "cube", "mug"], size=3))
    out = attend(words, p).data
    emb = p["embedding"].data[p.vocab.ids(words)]
    # solve out = w @ emb with sum(w) = 1 independently of the module's own weights
    A = np.vstack([emb.T, np.ones(3)])
    b = np.concatenate([out, [1.0]])
    w, *_ = np.linalg.lstsq(A, b, rcond=None)
    np.testing.assert_allclose(A @ w, b, atol=1e-10)
    assert np.all(w >= -1e-10)


def test_attend_empty_phrase_uses_null_token():
    p = random_params(2)
    np.testing.assert_array_equal(attend([], p).data, p["embedding"].data[0])
    p.config.null_token = False
    with pytest.raises(EmptyPhrase):
        attend([], p)


def test_unknown_words_map_to_unk():
    p = random_params(3)
    np.testing.assert_array_equal(attend(["zebra"], p).data, attend(["<unk>"], p).data)


def test_attend_state_width():
    p = random_params(4, size=5)
    _, states, a = encode_phrase(["red", "ball", "cube"], p)
    assert states.shape == (3, 20) and a.shape == (3,)


# -- locate -----------------------------------------------------------------

def test_locate_single_box_is_certain():
    rng = np.random.default_rng(0)
    scene = random_scene(rng, 1)
    np.testing.assert_allclose(locate(["red", "ball"], scene, random_params(5)).data, [1.0])


def test_locate_pinned_weights():
    boxes = (BoundingBox(0, 0, 0, 10, 10, (1.0, 0.0)), BoundingBox(1, 20, 20, 30, 30, (0.0, 1.0)))
    scene = Scene("pinned", 100, 100, boxes)
    params = GroundNetParams.initialize(Vocabulary(), ModelConfig(hidden=2, embed=2, visual_dim=2), 0)
    proj = np.zeros((2, 7))
    proj[0, 0] = proj[1, 1] = 1.0
    params["locate.proj"].data[:] = proj
    params["locate.score"].data[:] = [[1.0, 0.0]]
    p = locate(["x"], scene, params, text=Tensor([1.0, 0.0])).data
    # hand computation: scores (1, 0)
    expected = [math.e / (math.e + 1), 1 / (math.e + 1)]
    np.testing.assert_allclose(p, expected, atol=1e-12)
    np.testing.assert_allclose(p, [0.7311, 0.2689], atol=1e-4)


def test_locate_duplicate_boxes_equal():
    b = BoundingBox(0, 10, 10, 40, 40, (0.3, -1.0, 2.0, 0.1))
    scene = Scene("dup", 100, 100, (b, BoundingBox(1, 10, 10, 40, 40, b.features), BoundingBox(2, 50, 50, 90, 70, (1, 1, 1, 1))))
    p = locate(["red", "ball"], scene, random_params(6)).data
    assert p[0] == p[1]


def test_locate_feature_mismatch():
    scene = random_scene(np.random.default_rng(0), 3, visual_dim=3)
    with pytest.raises(FeatureLengthMismatch):
        locate(["ball"], scene, random_params(0, visual_dim=4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_locate_permutation_equivariant(seed, n):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, n)
    perm = rng.permutation(n)
    permuted = Scene(scene.id, scene.width, scene.height, tuple(scene.boxes[k] for k in perm))
    params = random_params(seed % 7)
    p = locate(["red", "ball"], scene, params).data
    q = locate(["red", "ball"], permuted, params).data
    np.testing.assert_allclose(q, p[perm], atol=1e-12)


# -- relate -----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_relate_matches_dense_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 3)
    params = random_params(seed)
    text = attend(["left", "of"], params)
    dist = T.softmax(Tensor(rng.normal(size=3)))
    got = relate(["left", "of"], scene, dist, params).data
    want = relate_oracle(scene, text.data.tolist(), dist.data.tolist(),
                         params["relate.proj"].data.tolist(), params["relate.score"].data.tolist())
    np.testing.assert_allclose(got, want, atol=1e-10, rtol=0)


def test_relate_uniform_columns_give_uniform_output():
    rng = np.random.default_rng(0)
    scene = random_scene(rng, 4)
    params = random_params(0)
    params["relate.score"].data[:] = 0.0
    for _ in range(5):
        dist = T.softmax(Tensor(rng.normal(size=4)))
        np.testing.assert_allclose(relate(["above"], scene, dist, params).data, 0.25, atol=1e-15)


def test_relate_one_hot_selects_column():
    rng = np.random.default_rng(1)
    scene = random_scene(rng, 4)
    params = random_params(1)
    cols = T.softmax(relation_matrix(["nearest"], scene, params), axis=0).data
    for j in range(4):
        onehot = Tensor(np.eye(4)[j])
        np.testing.assert_allclose(relate(["nearest"], scene, onehot, params).data, cols[:, j], atol=1e-15)


def test_relate_rejects_unnormalized_input():
    scene = random_scene(np.random.default_rng(2), 3)
    with pytest.raises(DistributionNotNormalized):
        relate(["left"], scene, Tensor([0.5, 0.5, 0.5]), random_params(0))


def test_relate_renormalize_variant_is_distribution():
    rng = np.random.default_rng(3)
    scene = random_scene(rng, 5)
    params = random_params(3, relate_norm="renormalize")
    out = relate(["left"], scene, T.softmax(Tensor(rng.normal(size=5))), params).data
    assert abs(out.sum() - 1) < 1e-12 and np.all(out > 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_relate_permutation_equivariant(seed, n):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, n)
    perm = rng.permutation(n)
    permuted = Scene(scene.id, scene.width, scene.height, tuple(scene.boxes[k] for k in perm))
    params = random_params(seed % 5)
    dist = T.softmax(Tensor(rng.normal(size=n)))
    p = relate(["left"], scene, dist, params).data
    q = relate(["left"], permuted, Tensor(dist.data[perm]), params).data
    np.testing.assert_allclose(q, p[perm], atol=1e-12)


# -- intersect --------------------------------------------------------------

def test_intersect_examples():
    p = Tensor([0.1, 0.6, 0.3])
    np.testing.assert_allclose(intersect(Tensor(np.full(3, 1 / 3)), p).data, p.data, atol=1e-15)
    np.testing.assert_allclose(intersect(Tensor([0.5, 0.5]), Tensor([0.8, 0.2])).data, [0.8, 0.2], atol=1e-15)


@given(st.integers(0, 10_000))
def test_intersect_commutes_and_keeps_argmax_with_uniform(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    p = T.softmax(Tensor(rng.normal(size=n) * 3))
    q = T.softmax(Tensor(rng.normal(size=n) * 3))
    np.testing.assert_allclose(intersect(p, q).data, intersect(q, p).data, atol=1e-15)
    u = intersect(p, Tensor(np.full(n, 1.0 / n))).data
    assert np.argmax(u) == np.argmax(p.data)


def test_intersect_vanishing_mass():
    with pytest.raises(VanishingMass):
        intersect(Tensor([1.0, 0.0]), Tensor([0.0, 1.0]))


# -- execute ----------------------------------------------------------------

def test_execute_single_locate_one_box():
    scene = random_scene(np.random.default_rng(0), 1)
    g = compile_ptb("(NP (NN ball))")
    res = execute(g, scene, random_params(0))
    np.testing.assert_allclose(res.distribution(g.root), [1.0])


def test_execute_sandwich_equals_manual_calls():
    rng = np.random.default_rng(4)
    scene = random_scene(rng, 4)
    params = random_params(4)
    g = compile_ptb(SANDWICH_TREE)
    res = execute(g, scene, params)
    l_sand = locate(["half", "sandwich"], scene, params)
    l_plate = locate(["plate"], scene, params)
    l_mug = locate(["coffee", "mug"], scene, params)
    inner = intersect(l_plate, relate(["nearest"], scene, l_mug, params))
    root = intersect(l_sand, relate(["on", "right", "side"], scene, inner, params))
    np.testing.assert_allclose(res.distribution(g.root), root.data, atol=1e-10, rtol=0)
    assert len(res.outputs) == 7


def test_execute_deterministic():
    rng = np.random.default_rng(5)
    scene = random_scene(rng, 5)
    g = compile_ptb(SANDWICH_TREE)
    a = execute(g, scene, random_params(5)).distributions
    b = execute(g, scene, random_params(5)).distributions
    assert all(np.array_equal(a[k], b[k]) for k in a)


@pytest.mark.parametrize("seed", range(20))
def test_execute_matches_recursive_composition(seed):
    rng = rng_stream(seed, 0)
    spec = WorldSpec(shapes=["ball", "cube", "cone"], colors=["red", "blue", "green"])
    g = compile_ptb(random_parse(spec, rng, max_depth=3))
    scene = random_scene(np.random.default_rng(seed), int(rng.integers(1, 7)))
    params = random_params(seed)
    res = execute(g, scene, params)
    np.testing.assert_allclose(res.distribution(g.root), compose(g, scene, params).data, atol=1e-10, rtol=0)
    for nid, p in res.distributions.items():
        assert abs(p.sum() - 1) <= 1e-6 and np.all(p >= 0), nid


def test_execute_error_names_node():
    scene = random_scene(np.random.default_rng(0), 3, visual_dim=2)
    g = compile_ptb(SANDWICH_TREE)
    with pytest.raises(NodeExecutionError) as e:
        execute(g, scene, random_params(0))
    assert e.value.node_id == g.topological_order()[0]


def test_unimplemented_attention_variants():
    scene = random_scene(np.random.default_rng(0), 2)
    params = random_params(0)
    params.config.attend_input = "free_form"
    with pytest.raises(NotImplementedError):
        execute(compile_ptb("(NP (NN ball))"), scene, params)


def test_nll_loss_value():
    scene = random_scene(np.random.default_rng(0), 4)
    g = compile_ptb(SANDWICH_TREE)
    res = execute(g, scene, random_params(0))
    assert nll_loss(res, 2).item() == pytest.approx(-math.log(res.distribution(g.root)[2]))


def test_module_gradients_small():
    worst = check_modules(points=2, seed=3)
    assert max(worst.values()) < 1e-4, worst
