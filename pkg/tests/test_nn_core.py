"""Engine contracts: forward arithmetic, gradient correctness, mask semantics."""

import numpy as np
import pytest

from xbarlab import nn
from xbarlab.data import Dataset
from xbarlab.rng import derive_generator


def dense_from(w, b=None):
    w = np.asarray(w, dtype=float)
    return nn.Dense(w.shape[0], w.shape[1], weights=w,
                    bias=b if b is not None else np.zeros(w.shape[1]))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_forward_identity_dense():
    net = nn.Network([dense_from(np.eye(2))])
    acts = nn.forward(net, np.array([[3.0, -1.0]]))
    assert np.array_equal(acts[-1], [[3.0, -1.0]])


def test_relu_definition():
    net = nn.Network([nn.ReLU()])
    out = nn.forward(net, np.array([[-2.0, 0.0, 5.0]]))[-1]
    assert np.array_equal(out, [[0.0, 0.0, 5.0]])


def test_forward_hand_arithmetic():
    # column convention y_j = sum_i x_i W[i][j]
    net = nn.Network([dense_from([[1.0, 2.0], [3.0, 4.0]])])
    out = nn.forward(net, np.array([[1.0, 1.0]]))[-1]
    assert np.array_equal(out, [[4.0, 6.0]])


def test_forward_returns_all_activations():
    rng = derive_generator(1, "init")
    net = nn.mlp([4, 3, 2], rng)
    acts = nn.forward(net, rng.random((5, 4)))
    assert len(acts) == len(net.layers) + 1
    assert acts[-1].shape == (5, 2)


def test_forward_shape_error_names_layer():
    net = nn.Network([nn.Dense(3, 2, weights=np.zeros((3, 2)), name="dense0")])
    with pytest.raises(nn.DimensionError, match="dense0"):
        nn.forward(net, np.ones((1, 4)))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_frozen_network_step_changes_no_weight():
    rng = derive_generator(2, "init")
    net = nn.mlp([5, 4, 3], rng)
    for _, layer in net.weight_layers():
        layer.trainable[:] = 0.0
        layer.bias_trainable = False
    before = [layer.w.tobytes() for _, layer in net.weight_layers()]
    x = rng.random((8, 5))
    y = rng.integers(0, 3, 8)
    for _ in range(3):
        acts = nn.forward(net, x)
        grads = nn.backward(net, acts, y)
        nn.sgd_step(net, grads, nn.SgdConfig(learning_rate=0.5, momentum=0.9))
    after = [layer.w.tobytes() for _, layer in net.weight_layers()]
    assert before == after


def test_gradients_match_finite_differences_mlp():
    rng = derive_generator(3, "init")
    net = nn.mlp([6, 5, 4], rng)
    x = rng.random((7, 6))
    y = rng.integers(0, 4, 7)
    err = nn.gradient_check(net, x, y, rng=derive_generator(3, "gc"))
    assert err <= 1e-4


def test_saturated_softmax_gradient_vanishes():
    # +-30 logit margin on the correct class: gradient norm < 1e-9
    net = nn.Network([dense_from([[30.0, -30.0], [0.0, 0.0]])])
    x = np.array([[1.0, 0.0]])
    y = np.array([0])
    acts = nn.forward(net, x)
    grads = nn.backward(net, acts, y)
    norm = np.linalg.norm(grads[0]["w"]) + np.linalg.norm(grads[0]["b"])
    assert norm < 1e-9


def test_backward_label_batch_mismatch():
    net = nn.Network([dense_from(np.eye(2))])
    acts = nn.forward(net, np.zeros((3, 2)))
    with pytest.raises(nn.DimensionError):
        nn.backward(net, acts, np.array([0]))


# ---------------------------------------------------------------------------
# sgd_step
# ---------------------------------------------------------------------------


def make_single_weight_net(w0=1.0):
    return nn.Network([dense_from([[w0]])])


def step_with_grad(net, g, lr, momentum=0.0):
    grads = [{"w": np.array([[g]]), "b": np.zeros(1)}]
    nn.sgd_step(net, grads, nn.SgdConfig(learning_rate=lr, momentum=momentum))


def test_sgd_lr_zero_no_change():
    net = make_single_weight_net(1.0)
    step_with_grad(net, 123.0, lr=0.0)
    assert net.layers[0].w[0, 0] == 1.0


def test_sgd_definitional_arithmetic():
    net = make_single_weight_net(1.0)
    step_with_grad(net, 0.25, lr=1.0, momentum=0.0)
    assert net.layers[0].w[0, 0] == 0.75


def test_sparsity_mask_keeps_weight_exactly_zero():
    net = make_single_weight_net(0.0)
    net.layers[0].sparsity[:] = 0.0
    step_with_grad(net, -5.0, lr=1.0)
    assert net.layers[0].w[0, 0] == 0.0


def test_mask_idempotence_zero_gradients():
    rng = derive_generator(4, "init")
    net = nn.mlp([4, 3, 2], rng)
    before = [layer.w.tobytes() for _, layer in net.weight_layers()]
    zero = [{"w": np.zeros_like(l.w), "b": np.zeros_like(l.b)} for _, l in net.weight_layers()]
    grads = [None] * len(net.layers)
    for (i, _), g in zip(net.weight_layers(), zero):
        grads[i] = g
    cfg = nn.SgdConfig(learning_rate=0.3, momentum=0.9)
    nn.sgd_step(net, grads, cfg)
    nn.sgd_step(net, grads, cfg)
    assert before == [layer.w.tobytes() for _, layer in net.weight_layers()]


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def constant_class0_net():
    w = np.zeros((4, 10))
    b = np.zeros(10)
    b[0] = 10.0
    return nn.Network([dense_from(w, b)])


def test_evaluate_always_right():
    ds = Dataset(np.random.rand(20, 4).astype(np.float32), np.zeros(20, dtype=np.int64))
    assert nn.evaluate(constant_class0_net(), ds) == 1.0


def test_evaluate_balanced_tenth():
    ds = Dataset(np.random.rand(100, 4).astype(np.float32),
                 np.repeat(np.arange(10), 10).astype(np.int64))
    assert nn.evaluate(constant_class0_net(), ds) == 0.1


def test_evaluate_empty_dataset_errors():
    ds = Dataset(np.zeros((0, 4), dtype=np.float32), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError):
        nn.evaluate(constant_class0_net(), ds)


def test_evaluate_tie_breaks_to_lowest_class():
    net = nn.Network([dense_from(np.zeros((4, 10)))])  # all logits equal
    ds = Dataset(np.random.rand(6, 4).astype(np.float32), np.zeros(6, dtype=np.int64))
    assert nn.evaluate(net, ds) == 1.0


# ---------------------------------------------------------------------------
# gradient_check bounds
# ---------------------------------------------------------------------------


def test_gradient_check_symmetric_linear_model():
    # all-zero single-input model sits at the symmetric point of the loss,
    # where the cubic error term of central differences vanishes
    net = nn.Network([dense_from(np.zeros((1, 2)))])
    x = np.array([[1.0]])
    y = np.array([0])
    assert nn.gradient_check(net, x, y) <= 1e-10


def test_gradient_check_mlp_784():
    rng = derive_generator(5, "init")
    net = nn.mlp([784, 32, 10], rng)
    x = rng.random((4, 784))
    y = rng.integers(0, 10, 4)
    assert nn.gradient_check(net, x, y, max_params=120, rng=derive_generator(5, "gc")) <= 1e-4


def test_gradient_check_conv_net():
    rng = derive_generator(6, "init")
    net = nn.Network([
        nn.Conv2d(1, 4, 5, rng=rng),
        nn.ReLU(),
        nn.MaxPool(2),
        nn.Dense(4 * 4 * 4, 10, rng=rng),
    ])
    x = rng.random((3, 12, 12))
    y = rng.integers(0, 10, 3)
    assert nn.gradient_check(net, x, y, max_params=120, rng=derive_generator(6, "gc")) <= 1e-4


def test_maxpool_forward_backward_values():
    pool = nn.MaxPool(2)
    x = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
    out = pool.forward(x)
    assert np.array_equal(out[0, :, :, 0], [[5, 7], [13, 15]])
    gx, _ = pool.backward(np.ones_like(out))
    assert gx.sum() == 4.0
    assert gx[0, 1, 1, 0] == 1.0 and gx[0, 0, 0, 0] == 0.0


# ---------------------------------------------------------------------------
# determinism / freeze invariance
# ---------------------------------------------------------------------------


def train_tiny(seed):
    rng = derive_generator(seed, "init")
    net = nn.mlp([8, 6, 3], rng)
    data_rng = derive_generator(99, "data")
    train = Dataset(data_rng.random((64, 8)).astype(np.float32),
                    data_rng.integers(0, 3, 64))
    nn.train_sgd(net, train, nn.SgdConfig(epochs=3, batch_size=16),
                 derive_generator(seed, "shuffle"))
    return net


def test_training_is_bit_deterministic():
    a = train_tiny(7)
    b = train_tiny(7)
    for (_, la), (_, lb) in zip(a.weight_layers(), b.weight_layers()):
        assert la.w.tobytes() == lb.w.tobytes()
        assert la.b.tobytes() == lb.b.tobytes()


def test_freeze_invariance_through_training():
    rng = derive_generator(8, "init")
    net = nn.mlp([8, 6, 3], rng)
    mask_rng = derive_generator(8, "mask")
    for _, layer in net.weight_layers():
        layer.trainable = (mask_rng.random(layer.w.shape) < 0.5).astype(float)
    frozen_before = [layer.w[layer.trainable == 0].tobytes() for _, layer in net.weight_layers()]
    data_rng = derive_generator(8, "data")
    train = Dataset(data_rng.random((64, 8)).astype(np.float32), data_rng.integers(0, 3, 64))
    nn.train_sgd(net, train, nn.SgdConfig(epochs=4, batch_size=16),
                 derive_generator(8, "shuffle"))
    frozen_after = [layer.w[layer.trainable == 0].tobytes() for _, layer in net.weight_layers()]
    assert frozen_before == frozen_after
