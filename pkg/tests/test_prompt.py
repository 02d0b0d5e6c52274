import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_dictionary, seeds, table_encoder
from descdet import descriptors as ds
from descdet import prompt
from descdet.config import WorldSpec
from descdet.errors import DimMismatchError, FormatError, InvalidBoxError
from descdet.prompt import Box, MetaNetParams
from descdet.scoring import Snapshot
from descdet.sim import generate_world, sample_batch, text_encoder_for
from oracles import finite_difference_grads, reference_loss

box_coord = st.floats(0, 90, allow_nan=False)


def test_enlarge_box_examples():
    b = Box(10, 10, 20, 20)
    assert prompt.enlarge_box(b, 0, 0, 100, 100) == b
    assert prompt.enlarge_box(b, 5, 5, 100, 100) == Box(5, 5, 25, 25)
    assert prompt.enlarge_box(Box(2, 2, 20, 20), 5, 5, 100, 100).x1 == 0
    with pytest.raises(InvalidBoxError):
        prompt.enlarge_box(Box(20, 2, 10, 20), 1, 1, 100, 100)
    with pytest.raises(InvalidBoxError):
        prompt.enlarge_box(b, -1, 0, 100, 100)


@given(box_coord, box_coord, st.floats(1, 10), st.floats(1, 10), st.floats(0, 50), st.floats(0, 50), st.floats(0, 20))
def test_enlarge_box_monotone(x, y, w, h, m, n, extra):
    b = Box(x, y, x + w, y + h)
    small = prompt.enlarge_box(b, m, n, 100, 100)
    big = prompt.enlarge_box(b, m + extra, n + extra, 100, 100)
    assert small.contains(b) and big.contains(small)
    assert Box(0, 0, 100, 100).contains(big)


def test_meta_forward_examples():
    theta = prompt.init_params(6, seed=3)
    np.testing.assert_array_equal(prompt.meta_forward(theta, np.ones(6)), np.zeros(6))
    toy = MetaNetParams(np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))
    np.testing.assert_allclose(prompt.meta_forward(toy, [0.5, -0.5]), [0.46212, -0.46212], atol=1e-5)
    with pytest.raises(DimMismatchError):
        prompt.meta_forward(toy, [1, 2, 3])


def test_default_hidden():
    assert prompt.init_params(16).hidden == 8
    assert prompt.init_params(3).hidden == 2


def test_prompted_feature():
    np.testing.assert_array_equal(prompt.prompted_feature([0.3, 0.4], [0, 0]), [0.3, 0.4])
    np.testing.assert_array_equal(prompt.prompted_feature([1, 0], [0, 1]), [1, 1])


def two_way():
    return ds.init_dictionary(["a", "b"], {"a": ["up"], "b": ["down"]}, table_encoder({"up": [1, 0], "down": [-1, 0]}))


def test_classification_loss_examples():
    d = two_way()
    assert prompt.classification_loss(d, [1, 0], "a", 1, tau=1.0) == pytest.approx(0.12693, abs=1e-5)
    assert prompt.classification_loss(d, [0, 1], "a", 1, tau=1.0) == pytest.approx(np.log(2))
    assert prompt.classification_loss(d, [1, 0], "a", 1, tau=1e-3) < 1e-12


@given(seeds, st.integers(1, 3))
def test_classification_loss_matches_reference(seed, n_sel):
    rng = np.random.default_rng(seed)
    d = random_dictionary(rng, 4, 5, 5)
    v = rng.standard_normal(5)
    got = prompt.classification_loss(d, v, "c2", n_sel, tau=0.3)
    assert got == pytest.approx(reference_loss(d, v, "c2", n_sel, 0.3), rel=1e-9, abs=1e-12)


def random_theta(rng, dim, hidden, scale=0.5):
    return MetaNetParams(
        rng.normal(0, scale, (hidden, dim)), rng.normal(0, scale, hidden), rng.normal(0, scale, (dim, hidden)), rng.normal(0, scale, dim)
    )


def test_grad_matches_finite_differences_small():
    rng = np.random.default_rng(0)
    d = random_dictionary(rng, 2, 3, 3)
    theta = random_theta(rng, 3, 2)
    R, Rctx = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
    _, grads, _ = prompt.loss_and_grad(theta, Snapshot(d), R, Rctx, ["c1"], 2, 0.5)
    fd, _ = finite_difference_grads(theta, d, R, Rctx, ["c1"], 2, 0.5)
    for g, f in zip(grads.arrays(), fd.arrays()):
        np.testing.assert_allclose(g, f, rtol=1e-4, atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_grad_matches_finite_differences_softmax_phi(seed):
    rng = np.random.default_rng(seed)
    d = random_dictionary(rng, 3, 4, 4)
    theta = random_theta(rng, 4, 2)
    R, Rctx = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    labels = ["c0", "c2", "c1"]
    _, grads, _ = prompt.loss_and_grad(theta, Snapshot(d), R, Rctx, labels, 2, 0.5, phi_mode="softmax")
    fd, _ = finite_difference_grads(theta, d, R, Rctx, labels, 2, 0.5, phi_mode="softmax")
    for g, f in zip(grads.arrays(), fd.arrays()):
        np.testing.assert_allclose(g, f, rtol=1e-4, atol=1e-7)


def test_grad_vanishes_at_zero_loss():
    d = two_way()
    theta = prompt.init_params(2, 2, seed=0)
    batch = [prompt.Proposal(Box(0, 0, 5, 5), np.array([1.0, 0.0]), np.array([0.3, 0.2]), "a")]
    grads = prompt.grad_theta(theta, d, batch, 1, tau=1e-3)
    for g in grads.arrays():
        assert np.abs(g).max() < 1e-12


def test_duplicated_batch_gives_same_mean_gradient():
    rng = np.random.default_rng(5)
    d = random_dictionary(rng, 3, 3, 4)
    theta = random_theta(rng, 4, 2)
    p = prompt.Proposal(Box(0, 0, 5, 5), rng.standard_normal(4), rng.standard_normal(4), "c1")
    one = prompt.grad_theta(theta, d, [p], 2, 0.2)
    two = prompt.grad_theta(theta, d, [p, p], 2, 0.2)
    for a, b in zip(one.arrays(), two.arrays()):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_sgd_step_examples():
    theta = MetaNetParams(np.ones((1, 1)), np.ones(1), np.ones((1, 1)), np.ones(1))
    g = MetaNetParams(*(2 * a for a in theta.arrays()))
    assert prompt.params_allclose(prompt.sgd_step(theta, g, 0.0), theta, atol=0)
    zero = MetaNetParams(*(0 * a for a in theta.arrays()))
    assert prompt.params_allclose(prompt.sgd_step(theta, zero, 0.3), theta, atol=0)
    assert prompt.sgd_step(theta, g, 0.1).W1[0, 0] == pytest.approx(0.8)
    with pytest.raises(ValueError):
        prompt.sgd_step(theta, g, -1.0)


def test_training_lowers_loss_on_a_fixed_batch():
    spec = WorldSpec(dim=8, n_categories=4, n_base=3, descriptors_per_category=4)
    for seed in range(5):
        world = generate_world(WorldSpec(**{**spec.__dict__, "seed": seed}))
        d = ds.init_dictionary(world.categories, world.phrases, text_encoder_for(world))
        snap = Snapshot(d)
        R, Rctx, labels = prompt.stack_batch(sample_batch(world, world.base, 32, seed))
        theta = prompt.init_params(8, seed=seed)
        first, _, _ = prompt.loss_and_grad(theta, snap, R, Rctx, labels, 2, 0.07, world.base)
        for _ in range(200):
            loss, grads, _ = prompt.loss_and_grad(theta, snap, R, Rctx, labels, 2, 0.07, world.base)
            theta = prompt.sgd_step(theta, grads, 0.01)
        assert loss < first


def test_checkpoint_round_trip(tmp_path):
    theta = random_theta(np.random.default_rng(2), 5, 3)
    path = tmp_path / "meta.json"
    prompt.save_checkpoint(theta, path, step=7, lr=0.01, tau=0.07)
    back, meta = prompt.load_checkpoint(path)
    assert prompt.params_allclose(theta, back, atol=0.0)
    assert meta == {"step": 7, "lr": 0.01, "tau": 0.07}


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "meta.json"
    path.write_text("{not json")
    with pytest.raises(FormatError):
        prompt.load_checkpoint(path)
    path.write_text('{"version": 1}')
    with pytest.raises(FormatError, match="missing"):
        prompt.load_checkpoint(path)
