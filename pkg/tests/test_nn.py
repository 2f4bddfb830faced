"""
Tests for the CNN engine.

    - layer ops on hand-computed examples
    - analytic gradients against central finite differences
    - Adam, training determinism and the default architecture audit
    - QVM1 checkpoints
"""
from math import log

import numpy as np
import pytest

from hqcnn import CheckpointFormatError, ConfigurationError, ShapeError
from hqcnn.nn import (AdamState, HqcnnModel, LayerKind, LayerSpec, TrainConfig, _forward, adam_init, adam_step,
                      backward, conv2d_backward, conv2d_forward, decode_checkpoint, default_layer_specs,
                      dense_backward, dense_forward, dropout, encode_checkpoint, epoch_log_csv, evaluate, forward,
                      load_checkpoint, maxpool2x2_backward, maxpool2x2_forward, parameter_summary, predict_proba,
                      relu, relu_backward, save_checkpoint, softmax_cross_entropy, softmax_cross_entropy_grad, train)
from hqcnn.rng import get_rng

H = 1e-5


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(1e-6, np.abs(a) + np.abs(n))


def numeric_grad(f, x):
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + H
        up = f()
        x[idx] = old - H
        down = f()
        x[idx] = old
        grad[idx] = (up - down) / (2 * H)
    return grad


def tiny_specs(n_classes=2):
    return [
        LayerSpec(LayerKind.QUANV_INPUT),
        LayerSpec(LayerKind.CONV2D, units=3, kernel=2, activation="relu"),
        LayerSpec(LayerKind.MAXPOOL, kernel=2),
        LayerSpec(LayerKind.CONV2D, units=2, kernel=2, activation="relu"),
        LayerSpec(LayerKind.FLATTEN),
        LayerSpec(LayerKind.DENSE, units=5, activation="relu"),
        LayerSpec(LayerKind.DENSE, units=n_classes),
        LayerSpec(LayerKind.SOFTMAX),
    ]


def separable_features(n, seed=0, shape=(14, 14, 4)):
    rng = get_rng(seed)
    labels = np.arange(n) % 2
    signs = np.where(labels == 1, 1.0, -1.0).reshape((n,) + (1,) * len(shape))
    return signs * 0.5 + 0.1 * rng.standard_normal((n,) + shape), labels


# =============================================================================
# Layer ops
# =============================================================================

def test_conv_single_pixel():
    kernels = np.zeros((2, 2, 1, 1))
    kernels[0, 0, 0, 0] = 3.0
    out = conv2d_forward(np.array([[[2.0]]]), kernels, np.array([0.5]))
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == pytest.approx(6.5)


def test_conv_identity_kernel():
    x = get_rng(1).standard_normal((5, 4, 2))
    kernels = np.zeros((2, 2, 2, 2))
    kernels[0, 0] = np.eye(2)
    assert np.allclose(conv2d_forward(x, kernels, np.zeros(2)), x)


def test_conv_same_padding_pads_bottom_right():
    x = np.arange(4.0).reshape(2, 2, 1)
    kernels = np.ones((2, 2, 1, 1))
    out = conv2d_forward(x, kernels, np.zeros(1))[..., 0]
    assert np.array_equal(out, [[0 + 1 + 2 + 3, 1 + 3], [2 + 3, 3]])


def test_conv_shapes_and_channel_check():
    out = conv2d_forward(np.zeros((2, 14, 14, 4)), np.zeros((2, 2, 4, 16)), np.zeros(16))
    assert out.shape == (2, 14, 14, 16)
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((14, 14, 3)), np.zeros((2, 2, 4, 16)), np.zeros(16))


def test_relu():
    assert np.array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    assert not relu(-np.ones((3, 3))).any()
    assert np.array_equal(relu_backward(np.array([-1.0, 0.0, 2.0]), np.ones(3)), [0, 0, 1])


def test_maxpool():
    out, argmax = maxpool2x2_forward(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1))
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 4.0
    assert argmax[0, 0, 0] == 3
    assert maxpool2x2_forward(np.zeros((7, 7, 5)))[0].shape == (3, 3, 5)
    assert maxpool2x2_forward(np.zeros((14, 14, 16)))[0].shape == (7, 7, 16)
    with pytest.raises(ShapeError):
        maxpool2x2_forward(np.zeros((1, 4, 2)))


def test_maxpool_backward_routes_to_argmax():
    x = np.array([[1.0, 5.0, 0.0], [2.0, 3.0, 0.0], [9.0, 9.0, 9.0]]).reshape(3, 3, 1)
    _, argmax = maxpool2x2_forward(x)
    dx = maxpool2x2_backward(np.array([[[7.0]]]), argmax, x.shape)
    expected = np.zeros((3, 3, 1))
    expected[0, 1, 0] = 7.0
    assert np.array_equal(dx, expected)


def test_dense():
    w = np.arange(6.0).reshape(3, 2)
    assert np.allclose(dense_forward(np.array([1.0, 0.0, 2.0]), w, np.array([1.0, -1.0])), [9.0, 10.0])
    with pytest.raises(ShapeError):
        dense_forward(np.ones(4), w, np.zeros(2))


def test_dropout():
    x = get_rng(2).standard_normal(1000)
    assert np.array_equal(dropout(x, 0.2, training=False), x)
    assert np.array_equal(dropout(x, 0.0, training=True, rng=get_rng(0)), x)
    out = dropout(np.ones(100_000), 0.2, training=True, rng=get_rng(3))
    assert abs((out > 0).mean() - 0.8) < 0.04
    assert np.allclose(out[out > 0], 1 / 0.8)
    with pytest.raises(ConfigurationError):
        dropout(x, 1.0, training=True, rng=get_rng(0))


def test_softmax_cross_entropy():
    loss, probs = softmax_cross_entropy(np.array([0.0, 0.0]), 0)
    assert loss == pytest.approx(log(2))
    assert np.allclose(probs, [0.5, 0.5])
    logits = get_rng(4).standard_normal((5, 3))
    labels = np.array([0, 1, 2, 1, 0])
    assert np.allclose(softmax_cross_entropy(logits, labels)[1], softmax_cross_entropy(logits + 100.0, labels)[1])
    assert np.allclose(softmax_cross_entropy(logits, labels)[1].sum(axis=1), 1.0)
    with pytest.raises(ShapeError):
        softmax_cross_entropy(np.array([1.0]), 0)


def test_softmax_gradient_is_probs_minus_onehot():
    logits = get_rng(5).standard_normal(4)
    _, probs = softmax_cross_entropy(logits, 2)
    expected = probs.copy()
    expected[2] -= 1.0
    assert np.allclose(softmax_cross_entropy_grad(probs, 2), expected)
    numeric = numeric_grad(lambda: softmax_cross_entropy(logits, 2)[0], logits)
    assert rel_err(expected, numeric).max() < 1e-4


def test_confident_correct_prediction_has_vanishing_gradient():
    assert np.allclose(softmax_cross_entropy_grad(np.array([[0.0, 1.0]]), [1]), 0.0)


# =============================================================================
# Gradient checks
# =============================================================================

def test_conv_gradients():
    rng = get_rng(6)
    x = rng.standard_normal((2, 4, 3, 2))
    k = rng.standard_normal((2, 2, 2, 3))
    b = rng.standard_normal(3)
    r = rng.standard_normal((2, 4, 3, 3))
    dx, dk, db = conv2d_backward(x, k, r)
    f = lambda: float((conv2d_forward(x, k, b) * r).sum())  # noqa: E731
    assert rel_err(dx, numeric_grad(f, x)).max() < 1e-4
    assert rel_err(dk, numeric_grad(f, k)).max() < 1e-4
    assert rel_err(db, numeric_grad(f, b)).max() < 1e-4


def test_dense_gradients():
    rng = get_rng(7)
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((5, 4))
    b = rng.standard_normal(4)
    r = rng.standard_normal((3, 4))
    dx, dw, db = dense_backward(x, w, r)
    f = lambda: float((dense_forward(x, w, b) * r).sum())  # noqa: E731
    assert rel_err(dx, numeric_grad(f, x)).max() < 1e-4
    assert rel_err(dw, numeric_grad(f, w)).max() < 1e-4
    assert rel_err(db, numeric_grad(f, b)).max() < 1e-4


def test_maxpool_gradients():
    rng = get_rng(8)
    x = rng.standard_normal((2, 5, 4, 3))
    r = rng.standard_normal((2, 2, 2, 3))
    _, argmax = maxpool2x2_forward(x)
    dx = maxpool2x2_backward(r, argmax, x.shape)
    f = lambda: float((maxpool2x2_forward(x)[0] * r).sum())  # noqa: E731
    assert rel_err(dx, numeric_grad(f, x)).max() < 1e-4


def _activation_pattern(model, x):
    """ReLU masks and pool argmaxes; a finite difference that changes them crossed a kink."""
    _, caches = _forward(model, x, model.params, False, None)
    pattern = []
    for spec, cache in zip(model.specs, caches):
        if spec.kind in (LayerKind.CONV2D, LayerKind.DENSE) and spec.activation == "relu":
            pattern.append(cache[1] > 0)
        elif spec.kind is LayerKind.MAXPOOL:
            pattern.append(cache[1])
    return pattern


def _same_pattern(a, b):
    return all(np.array_equal(p, q) for p, q in zip(a, b))


@pytest.mark.parametrize("seed", range(20))
def test_network_gradients(seed):
    rng = get_rng(seed, 99)
    model = HqcnnModel(tiny_specs(), input_shape=(6, 6, 1), seed=seed)
    x = rng.standard_normal((3, 6, 6, 1))
    y = rng.integers(0, 2, size=3)
    _, grads = backward(model, x, y)
    base = _activation_pattern(model, x)
    checked = 0
    for p, g in zip(model.params, grads):
        assert g.shape == p.shape
        for idx in np.ndindex(*p.shape):
            old = p[idx]
            p[idx] = old + H
            up, up_pattern = softmax_cross_entropy(forward(model, x), y)[0], _activation_pattern(model, x)
            p[idx] = old - H
            down, down_pattern = softmax_cross_entropy(forward(model, x), y)[0], _activation_pattern(model, x)
            p[idx] = old
            if not (_same_pattern(base, up_pattern) and _same_pattern(base, down_pattern)):
                continue
            assert rel_err(g[idx], (up - down) / (2 * H)) < 1e-4
            checked += 1
    assert checked > 0.95 * sum(p.size for p in model.params)


def test_duplicated_batch_keeps_mean_gradient():
    rng = get_rng(9)
    model = HqcnnModel(tiny_specs(), input_shape=(6, 6, 1), seed=1)
    x = rng.standard_normal((4, 6, 6, 1))
    y = np.array([0, 1, 1, 0])
    loss, grads = backward(model, x, y)
    loss2, grads2 = backward(model, np.concatenate([x, x]), np.concatenate([y, y]))
    assert loss2 == pytest.approx(loss)
    for g, g2 in zip(grads, grads2):
        assert np.allclose(g, g2, atol=1e-12)


# =============================================================================
# Adam
# =============================================================================

def test_adam_zero_gradient_keeps_params():
    params = [np.array([1.0, -2.0]), np.ones((2, 2))]
    state = adam_init(params)
    new, state = adam_step(params, [np.zeros(2), np.zeros((2, 2))], state)
    assert all(np.array_equal(a, b) for a, b in zip(params, new))
    assert state.step == 1


def test_adam_first_step_magnitude_is_lr():
    params = [np.zeros(3)]
    new, _ = adam_step(params, [np.array([0.5, -2.0, 10.0])], adam_init(params, learning_rate=1e-4))
    assert np.allclose(new[0], [-1e-4, 1e-4, -1e-4], rtol=1e-6)


def test_adam_descends_quadratic():
    w = [np.array([1.0])]
    state = adam_init(w, learning_rate=0.01)
    history = [1.0]
    for _ in range(50):
        w, state = adam_step(w, [2 * w[0]], state)
        history.append(float(w[0][0]))
    assert all(b < a for a, b in zip(history, history[1:]))
    assert history[-1] < 0.6


def test_adam_shape_check():
    with pytest.raises(ShapeError):
        adam_step([np.zeros(2)], [np.zeros(3)], adam_init([np.zeros(2)]))
    assert isinstance(adam_init([np.zeros(2)]), AdamState)


# =============================================================================
# Architecture
# =============================================================================

def test_default_architecture_audit():
    model = HqcnnModel(default_layer_specs(2))
    assert model.parameter_counts() == [272, 1040, 2080, 86700, 30100, 202]
    assert model.total_parameter_count == 120_394


def test_default_shape_chain():
    model = HqcnnModel(default_layer_specs(2))
    chain = [s for s, spec in zip(model.shapes[1:], model.specs) if spec.kind is not LayerKind.DROPOUT]
    assert chain == [(14, 14, 4), (14, 14, 16), (7, 7, 16), (7, 7, 16), (7, 7, 32), (3, 3, 32), (288,), (300,),
                     (100,), (2,), (2,)]


def test_three_class_output_layer():
    model = HqcnnModel(default_layer_specs(3))
    assert model.parameter_counts()[-1] == 303
    assert model.n_classes == 3


def test_dropout_follows_pools_and_hidden_dense_layers():
    specs = default_layer_specs()
    for prev, spec in zip(specs, specs[1:]):
        if prev.kind is LayerKind.MAXPOOL or (prev.kind is LayerKind.DENSE and prev.activation == "relu"):
            assert spec.kind is LayerKind.DROPOUT and spec.dropout_rate == 0.2


def test_parameter_summary():
    rows = parameter_summary(HqcnnModel(default_layer_specs()))
    assert [r["params"] for r in rows if r["params"]] == [272, 1040, 2080, 86700, 30100, 202]
    assert rows[0]["kind"] == "quanv_input" and rows[0]["params"] == 0


def test_initialization_is_seeded():
    a = HqcnnModel(default_layer_specs(), seed=3)
    b = HqcnnModel(default_layer_specs(), seed=3)
    c = HqcnnModel(default_layer_specs(), seed=4)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert not np.array_equal(a.params[0], c.params[0])
    assert not a.params[1].any()


def test_model_rejects_wrong_input():
    model = HqcnnModel(default_layer_specs())
    with pytest.raises(ShapeError):
        predict_proba(model, np.zeros((2, 14, 14, 3)))


# =============================================================================
# Training and inference
# =============================================================================

def test_zero_epochs_returns_initialization():
    model = HqcnnModel(default_layer_specs(), seed=2)
    x, y = separable_features(8)
    trained, log = train(model, x, y, TrainConfig(epochs=0, seed=2))
    assert log == []
    assert all(np.array_equal(p, q) for p, q in zip(model.params, trained.params))


def test_training_is_deterministic():
    x, y = separable_features(40, seed=1)
    config = TrainConfig(epochs=2, batch_size=16, seed=5)
    _, log_a = train(HqcnnModel(default_layer_specs(), seed=5), x, y, config, test=(x[:8], y[:8]))
    _, log_b = train(HqcnnModel(default_layer_specs(), seed=5), x, y, config, test=(x[:8], y[:8]))
    assert epoch_log_csv(log_a) == epoch_log_csv(log_b)
    assert epoch_log_csv(log_a).splitlines()[0] == "epoch,train_loss,train_acc,test_loss,test_acc"


def test_separable_blobs_are_learned():
    x, y = separable_features(128, seed=2)
    model = HqcnnModel(default_layer_specs(), seed=0)
    trained, log = train(model, x, y, TrainConfig(epochs=20, batch_size=32, learning_rate=1e-3, seed=0))
    assert len(log) == 20
    assert evaluate(trained, x, y)[1] == 1.0


def test_train_rejects_bad_input():
    model = HqcnnModel(default_layer_specs())
    with pytest.raises(ConfigurationError):
        train(model, np.zeros((0, 14, 14, 4)), np.zeros(0), TrainConfig(epochs=1))
    with pytest.raises(ShapeError):
        train(model, np.zeros((2, 7, 7, 4)), np.zeros(2), TrainConfig(epochs=1))
    with pytest.raises(ShapeError):
        train(model, np.zeros((2, 14, 14, 4)), np.array([0, 2]), TrainConfig(epochs=1))


def test_predict_proba_rows():
    x, _ = separable_features(6, seed=3)
    x[1] = x[0]
    probs = predict_proba(HqcnnModel(default_layer_specs(), seed=1), x)
    assert probs.shape == (6, 2)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(probs[0], probs[1], rtol=0, atol=1e-12)


# =============================================================================
# Checkpoints
# =============================================================================

def test_checkpoint_roundtrip(tmp_path):
    model = HqcnnModel(default_layer_specs(3), seed=6)
    save_checkpoint(model, tmp_path / "model.qvm")
    back = load_checkpoint(tmp_path / "model.qvm")
    assert back.specs == model.specs
    assert back.input_shape == model.input_shape
    assert all(np.array_equal(p, q) for p, q in zip(model.params, back.params))


def test_checkpoint_corruption():
    blob = encode_checkpoint(HqcnnModel(tiny_specs(), input_shape=(6, 6, 1)))
    assert blob[:4] == b"QVM1"
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(blob[:-3])
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(blob + b"\x00")
