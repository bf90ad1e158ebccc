import math

import numpy as np
import pytest

from oracles import central_difference, dense_tree_matrix, product_state, relative_error
from qforest.data_io import ImageDataset, cyclic_shift, pixel_features
from qforest.errors import DataError, DegenerateInputError, DivergenceError, ShapeError
from qforest.ftn import (
    FTNClassifier,
    TrainConfig,
    canonicalize_ftn,
    evaluate,
    ftn_forward,
    loss_and_grad,
    measurement_map,
    predict,
    softmax_nll,
    train_ftn,
)


def separable_toy(n=64, seed=0):
    """Two classes of 2x2 images: dark (class 0) and bright (class 1)."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    images = np.where(labels[:, None, None, None] == 1, 0.6, 0.0) + 0.4 * rng.random((n, 2, 2, 1))
    return ImageDataset(images, labels, 2)


@pytest.mark.parametrize("y,expect", [((1, 0), (1, 0)), ((1, 1), (0.5, 0.5)), ((3, 4), (0.36, 0.64))])
def test_measurement_map_examples(y, expect):
    np.testing.assert_allclose(measurement_map(np.array(y, float)), expect, atol=1e-15)


def test_measurement_map_properties():
    y = np.random.default_rng(0).normal(size=(100, 8))
    p = measurement_map(y)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(p, measurement_map(-y))


def test_measurement_map_zero_raises():
    with pytest.raises(DegenerateInputError):
        measurement_map(np.zeros(2))


def test_parameter_count():
    m = FTNClassifier.random(16, 1, 10)
    assert m.num_parameters() == 255 * 8 * 10 + 2 * 100 + 10
    m3 = FTNClassifier.random(8, 3, 10)
    assert m3.num_parameters() == 63 * 512 * 10 + 8 * 100 + 10


def test_zero_head_gives_zero_logits():
    m = FTNClassifier.random(4, 1, 3, seed=1)
    m.head_w[:] = 0
    x = np.random.default_rng(0).random((5, 4, 4, 1))
    np.testing.assert_array_equal(ftn_forward(m, x), 0.0)


def test_dense_oracle_pipeline():
    m = FTNClassifier.random(2, 1, 2, seed=2, shifts=[(0, 0), (1, 1)])
    img = np.random.default_rng(2).random((2, 2, 1))
    feats = []
    for t, (dv, dh) in enumerate(m.shifts):
        shifted = cyclic_shift(img, dv, dh)
        leaves = [pixel_features(shifted[r, c]) for r, c in m.topology.leaf_order]
        W = dense_tree_matrix([T[t] for T in m.levels])
        y = W @ product_state(leaves)
        feats.append(y**2 / np.sum(y**2))
    expect = m.head_w @ np.concatenate(feats) + m.head_b
    np.testing.assert_allclose(ftn_forward(m, img), expect, atol=1e-12)


def test_tree_permutation_symmetry():
    m = FTNClassifier.random(4, 1, 3, seed=3)
    perm = [2, 0, 1]
    cols = np.concatenate([np.arange(2 * t, 2 * t + 2) for t in perm])
    p = FTNClassifier(
        m.topology, [T[perm] for T in m.levels], [m.shifts[t] for t in perm],
        m.head_w[:, cols], m.head_b, 3,
    )
    x = np.random.default_rng(3).random((4, 4, 4, 1))
    np.testing.assert_allclose(ftn_forward(p, x), ftn_forward(m, x), atol=1e-13)


def test_shape_mismatch():
    m = FTNClassifier.random(4, 1, 3)
    with pytest.raises(ShapeError):
        ftn_forward(m, np.zeros((8, 8, 1)))


def test_uniform_logits_loss_is_log_d():
    nll, _ = softmax_nll(np.zeros((3, 7)), np.array([0, 3, 6]))
    np.testing.assert_allclose(nll, math.log(7), rtol=0, atol=1e-15)


def test_saturated_logits_loss_vanishes():
    nll, _ = softmax_nll(np.array([[0.0, 30.0]]), np.array([1]))
    assert 0 < nll[0] < 1e-12


def test_label_out_of_range():
    m = FTNClassifier.random(2, 1, 2)
    with pytest.raises(DataError):
        loss_and_grad(m, np.zeros((1, 2, 2, 1)), [2])


def test_gradient_finite_differences():
    rng = np.random.default_rng(4)
    m = FTNClassifier.random(4, 1, 3, seed=4)
    x = rng.random((6, 4, 4, 1))
    y = rng.integers(0, 3, 6)
    _, grad = loss_and_grad(m, x, y)
    params, grads = m.parameters(), grad.as_list()
    f = lambda: loss_and_grad(m, x, y)[0]  # noqa: E731
    worst = 0.0
    for _ in range(50):
        p = rng.integers(len(params))
        idx = tuple(rng.integers(s) for s in params[p].shape)
        worst = max(worst, relative_error(grads[p][idx], central_difference(f, params[p], idx)))
    assert worst < 1e-5


def test_predict_rules():
    m = FTNClassifier.random(2, 1, 3, seed=5)
    m.head_w[:] = 0
    m.head_b[:] = [0.1, 0.9, 0.3]
    img = np.full((2, 2, 1), 0.5)
    assert predict(m, img) == 1
    m.head_b[:] = 0.0
    assert predict(m, img) == 0
    x = np.random.default_rng(5).random((10, 2, 2, 1))
    m2 = FTNClassifier.random(2, 1, 3, seed=6)
    np.testing.assert_array_equal(predict(m2, x), np.argmax(ftn_forward(m2, x), axis=1))
    m3 = m2.copy()
    m3.head_b += 4.2
    np.testing.assert_array_equal(predict(m3, x), predict(m2, x))


def test_zero_learning_rate_freezes():
    ds = separable_toy(16)
    m = FTNClassifier.random(2, 1, 2, seed=0)
    trained, log = train_ftn(m, ds, TrainConfig(learning_rate=0.0, epochs=3, batch_size=4))
    for a, b in zip(m.parameters(), trained.parameters()):
        np.testing.assert_array_equal(a, b)
    assert len({row["train_loss"] for row in log}) == 1


def test_separable_toy_reaches_full_accuracy():
    ds = separable_toy(64)
    m = FTNClassifier.random(2, 1, 2, seed=0)
    _, log = train_ftn(m, ds, TrainConfig(learning_rate=0.01, epochs=200, batch_size=16))
    assert log[-1]["train_acc"] == 1.0
    losses = [row["train_loss"] for row in log]
    assert all(b <= 1.05 * a for a, b in zip(losses, losses[1:]))


def test_training_is_deterministic():
    ds = separable_toy(32)
    m = FTNClassifier.random(2, 1, 2, seed=1)
    cfg = TrainConfig(learning_rate=0.01, epochs=3, batch_size=8, seed=4)
    a, la = train_ftn(m, ds, cfg)
    b, lb = train_ftn(m, ds, cfg)
    assert [r["train_loss"] for r in la] == [r["train_loss"] for r in lb]
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p, q)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_checkpoint():
    ds = separable_toy(8)
    m = FTNClassifier.random(2, 1, 2, seed=0)
    m.head_w[:] = np.inf
    with pytest.raises(DivergenceError) as info:
        train_ftn(m, ds, TrainConfig(epochs=1))
    assert info.value.checkpoint is not None


def test_canonical_forest_same_logits():
    m = FTNClassifier.random(4, 1, 4, seed=9)
    c = canonicalize_ftn(m)
    x = np.random.default_rng(9).random((20, 4, 4, 1))
    np.testing.assert_allclose(ftn_forward(c, x), ftn_forward(m, x), atol=1e-10)
    assert c.is_canonical and not m.is_canonical


def test_averaging_init_starts_near_mean_intensity():
    from qforest.ftn import prepare_leaves
    from qforest.ttn import forest_forward

    m = FTNClassifier.random(4, 3, 2, init="averaging", noise=0.0)
    x = np.random.default_rng(1).random((3, 4, 4, 3))
    top = forest_forward(m.levels, prepare_leaves(m, x))[-1][:, :, 0]
    np.testing.assert_allclose(
        top[..., 1] / top[..., 0], np.repeat(x.mean(axis=(1, 2, 3))[:, None], 2, axis=1), atol=1e-12
    )


def test_evaluate_matches_history():
    ds = separable_toy(20)
    trained, log = train_ftn(FTNClassifier.random(2, 1, 2), ds, TrainConfig(epochs=2, batch_size=5))
    loss, acc = evaluate(trained, ds)
    assert abs(loss - log[-1]["train_loss"]) < 1e-12 and acc == log[-1]["train_acc"]
