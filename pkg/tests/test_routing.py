import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import margin_loss_loop, routing_loop
from xncaps.binarize import binarize, dequantize
from xncaps.routing import (
    LAYERS,
    MarginLoss,
    ProjectorConfig,
    RoutingState,
    affine_predict,
    agreement_update,
    capsfc_forward,
    class_scores,
    coupling,
    dynamic_routing,
    expand,
    margin_loss,
    squash,
    weighted_sum,
    xnidr_forward,
    xnodr_forward,
)
from xncaps.tensor import ShapeError


def make_pred(rng, bs, ci, co, do, dtype=np.float64):
    return rng.normal(size=(bs, ci, co, 1, do)).astype(dtype)


def test_config_validation():
    with pytest.raises(ValueError):
        ProjectorConfig(0, 1, 1, 1)
    with pytest.raises(ValueError):
        ProjectorConfig(1, 1, 1, 1, iterations=True)
    assert ProjectorConfig(128, 10, 8, 16).weight_shape == (128, 10, 8, 16)


def test_expand_shape_and_tiling():
    p = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    I = expand(p, 5)
    assert I.shape == (2, 3, 5, 1, 4)
    for j in range(5):
        np.testing.assert_array_equal(I[:, :, j, 0, :], p)
    assert expand(p, 1).shape == (2, 3, 1, 1, 4)


def test_affine_identity_weights():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(2, 3, 4))
    W = np.broadcast_to(np.eye(4), (3, 2, 4, 4))
    I = expand(p, 2)
    np.testing.assert_allclose(affine_predict(I, W), I, rtol=1e-12)


def test_affine_paper_shape():
    I = np.ones((2, 128, 10, 1, 8), np.float32)
    W = np.ones((128, 10, 8, 16), np.float32)
    assert affine_predict(I, W).shape == (2, 128, 10, 1, 16)
    with pytest.raises(ShapeError):
        affine_predict(I, W[:, :, :4])


@pytest.mark.parametrize(
    "s, want",
    [
        ([0.0, 0.0], [0.0, 0.0]),
        ([1.0, 0.0], [0.5, 0.0]),
        ([3.0, 4.0], [25 / 26 * 0.6, 25 / 26 * 0.8]),
    ],
)
def test_squash_examples(s, want):
    np.testing.assert_allclose(squash(np.array(s)), want, rtol=1e-7, atol=1e-12)


def test_squash_bound_holds_for_huge_inputs():
    for dtype in (np.float32, np.float64):
        v = squash(np.array([1e30, -1e30], dtype))
        assert np.linalg.norm(v.astype(np.float64)) < 1


def test_coupling_examples():
    state = coupling(RoutingState.zeros(1, 2, 10))
    np.testing.assert_allclose(state.coupling, 0.1, rtol=1e-6)
    logits = np.array([0.0, math.log(3)]).reshape(1, 1, 2, 1, 1)
    np.testing.assert_allclose(RoutingState(logits).coupling.ravel(), [0.25, 0.75], rtol=1e-12)


def test_weighted_sum_single_input_capsule():
    rng = np.random.default_rng(1)
    pred = make_pred(rng, 2, 1, 3, 4)
    logits = rng.normal(size=(2, 1, 3, 1, 1))
    state = RoutingState(logits)
    np.testing.assert_allclose(weighted_sum(pred, state), state.coupling * pred, rtol=1e-12)


def test_weighted_sum_identical_predictions():
    rng = np.random.default_rng(2)
    common = rng.normal(size=(1, 1, 4, 1, 3))
    pred = np.broadcast_to(common, (1, 6, 4, 1, 3)).copy()
    s = weighted_sum(pred, RoutingState.zeros(1, 6, 4, np.float64))
    np.testing.assert_allclose(s, common * 6 / 4, rtol=1e-12)


def test_weighted_sum_shape_mismatch():
    with pytest.raises(ShapeError):
        weighted_sum(np.ones((1, 2, 3, 1, 4)), RoutingState.zeros(1, 2, 2))


def test_agreement_zero_v_keeps_logits():
    rng = np.random.default_rng(3)
    state = RoutingState(rng.normal(size=(1, 2, 3, 1, 1)))
    out = agreement_update(state, make_pred(rng, 1, 2, 3, 4), np.zeros((1, 1, 3, 1, 4)))
    np.testing.assert_array_equal(out.logits, state.logits)


def test_xnorized_agreement_needs_binarized_pred():
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError):
        agreement_update(RoutingState.zeros(1, 2, 3), make_pred(rng, 1, 2, 3, 4), np.ones((1, 1, 3, 1, 4)), True)


def test_xnorized_agreement_exact_on_dequantized():
    rng = np.random.default_rng(5)
    pred = dequantize(binarize(make_pred(rng, 2, 3, 4, 5), -1))
    v = dequantize(binarize(rng.normal(size=(2, 1, 4, 1, 5)), -1))
    state = RoutingState.zeros(2, 3, 4, np.float64)
    xn = agreement_update(state, pred, v, True, binarize(pred, -1))
    full = agreement_update(state, pred, v)
    np.testing.assert_allclose(xn.logits, full.logits, rtol=1e-5, atol=1e-12)


def test_one_iteration_is_squash_of_uniform_sum():
    rng = np.random.default_rng(6)
    pred = make_pred(rng, 2, 3, 4, 5)
    v = dynamic_routing(pred, ProjectorConfig(3, 4, 1, 5, iterations=1))
    np.testing.assert_allclose(v, squash(pred.sum(axis=1, keepdims=True) / 4), rtol=1e-12)


@pytest.mark.parametrize("iterations", [1, 2, 5])
def test_single_output_capsule(iterations):
    rng = np.random.default_rng(7)
    pred = make_pred(rng, 2, 3, 1, 4)
    v = dynamic_routing(pred, ProjectorConfig(3, 1, 1, 4, iterations))
    np.testing.assert_allclose(v, squash(pred.sum(axis=1, keepdims=True)), rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_routing_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    pred = make_pred(rng, 1, 3, 2, 3)
    v = dynamic_routing(pred, ProjectorConfig(3, 2, 4, 3, iterations=3))
    np.testing.assert_allclose(v[:, 0, :, 0, :], routing_loop(pred[:, :, :, 0, :], 3), atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_xnidr_routing_matches_float_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    pred = make_pred(rng, 2, 3, 2, 3)
    v = dynamic_routing(pred, ProjectorConfig(3, 2, 4, 3, iterations=3), xnorized_agreement=True)
    want = routing_loop(pred[:, :, :, 0, :], 3, xnorized=True)
    np.testing.assert_allclose(v[:, 0, :, 0, :], want, atol=1e-6)


def test_xnidr_one_iteration_equals_full_precision():
    rng = np.random.default_rng(8)
    p = rng.normal(size=(2, 3, 4)).astype(np.float32)
    W = rng.normal(size=(3, 2, 4, 3)).astype(np.float32)
    cfg = ProjectorConfig(3, 2, 4, 3, iterations=1)
    np.testing.assert_array_equal(xnidr_forward(p, W, cfg), capsfc_forward(p, W, cfg))


def test_literal_reset_makes_iterations_identical():
    rng = np.random.default_rng(9)
    p = rng.normal(size=(2, 3, 4))
    W = rng.normal(size=(3, 2, 4, 3))
    reset = xnidr_forward(p, W, ProjectorConfig(3, 2, 4, 3, 3), reset_logits_each_iteration=True)
    np.testing.assert_array_equal(reset, capsfc_forward(p, W, ProjectorConfig(3, 2, 4, 3, 1)))
    assert not np.allclose(reset, xnidr_forward(p, W, ProjectorConfig(3, 2, 4, 3, 3)))


def test_xnodr_equals_capsfc_on_pm_alpha_inputs():
    rng = np.random.default_rng(10)
    ci, co, di, do = 3, 2, 4, 3
    # +-alpha primaries with both signs per capsule; W likewise along dim_in
    p = np.where(rng.random((2, ci, di)) > 0.5, 1.0, -1.0)
    p[..., 0], p[..., 1] = 1.0, -1.0
    p *= rng.uniform(0.5, 2.0, (2, ci, 1))
    W = np.where(rng.random((ci, co, di, do)) > 0.5, 1.0, -1.0)
    W[:, :, 0], W[:, :, 1] = 1.0, -1.0
    W *= rng.uniform(0.5, 2.0, (ci, co, 1, do))
    cfg = ProjectorConfig(ci, co, di, do)
    np.testing.assert_allclose(xnodr_forward(p, W, cfg), capsfc_forward(p, W, cfg), rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("name", sorted(LAYERS))
def test_layer_output_shape_and_bound(name):
    rng = np.random.default_rng(11)
    cfg = ProjectorConfig(5, 3, 4, 6)
    p = rng.normal(size=(2, 5, 4)).astype(np.float32) * 10
    W = rng.normal(size=cfg.weight_shape).astype(np.float32)
    v = LAYERS[name](p, W, cfg)
    assert v.shape == (2, 1, 3, 1, 6)
    assert v.dtype == np.float32
    assert np.all(class_scores(v) < 1)


@pytest.mark.parametrize("name", sorted(LAYERS))
def test_layers_reject_bad_shapes(name):
    cfg = ProjectorConfig(5, 3, 4, 6)
    with pytest.raises(ShapeError):
        LAYERS[name](np.ones((2, 5, 3)), np.ones(cfg.weight_shape), cfg)
    with pytest.raises(ShapeError):
        LAYERS[name](np.ones((2, 5, 4)), np.ones((5, 3, 4, 5)), cfg)


def test_routing_is_deterministic():
    rng = np.random.default_rng(12)
    pred = make_pred(rng, 3, 8, 4, 5, np.float32)
    cfg = ProjectorConfig(8, 4, 1, 5)
    for flag in (False, True):
        assert dynamic_routing(pred, cfg, flag).tobytes() == dynamic_routing(pred.copy(), cfg, flag).tobytes()


def test_class_scores_examples():
    assert np.all(class_scores(np.zeros((1, 1, 3, 1, 2))) == 0)
    v = np.zeros((1, 1, 2, 1, 2))
    v[0, 0, 0, 0] = [0.6, 0.8]
    np.testing.assert_allclose(class_scores(v), [[1.0, 0.0]])


@given(st.floats(0, 2 * math.pi), st.floats(0.01, 0.99))
def test_class_scores_rotation_invariant(theta, r):
    v = np.zeros((1, 1, 1, 1, 2))
    v[..., :] = [r, 0.0]
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    np.testing.assert_allclose(class_scores(v @ rot.T), [[r]], rtol=1e-12)


def test_margin_loss_examples():
    t = np.array([[1.0, 0.0, 0.0]])
    assert margin_loss(np.array([[0.9, 0.1, 0.1]]), t) == 0.0
    assert margin_loss(np.zeros((1, 3)), t) == pytest.approx(0.81)
    with pytest.raises(ShapeError):
        margin_loss(np.zeros((1, 3)), np.zeros((1, 2)))


@given(
    hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=st.floats(0, 0.999)),
    st.data(),
)
def test_margin_loss_matches_loop_and_is_nonnegative(scores, data):
    labels = data.draw(hnp.arrays(np.float64, scores.shape, elements=st.sampled_from([0.0, 1.0])))
    loss = MarginLoss(0.8, 0.2, 0.3)
    value = loss(scores, labels)
    assert value >= 0
    assert value == pytest.approx(margin_loss_loop(scores, labels, 0.8, 0.2, 0.3), rel=1e-12, abs=1e-15)
