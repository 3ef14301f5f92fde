import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gesturedim.errors import NoForwardState, ShapeMismatch
from gesturedim.nn_core import (
    Activation,
    AdamState,
    AttentionBlock,
    Conv1d,
    Dense,
    LayerNorm,
    LayerSpec,
    Sequential,
    adam_step,
    backward,
    build_sequential,
    dumps_checkpoint,
    forward,
    loads_checkpoint,
    mse_loss,
    receptive_field,
)

from gradcheck import check_layer

F64 = np.float64


def rng(seed=0):
    return np.random.default_rng(seed)


def test_dense_identity():
    layer = Dense(4, 4, rng(), F64)
    layer.params["weight"][...] = np.eye(4)
    x = rng(1).normal(size=(3, 4))
    np.testing.assert_array_equal(forward(layer, x), x)


def test_conv_scalar_kernel():
    layer = Conv1d(1, 1, 1, rng(), dtype=F64)
    layer.params["weight"][...] = 2.0
    x = rng(2).normal(size=(2, 7, 1))
    np.testing.assert_array_equal(layer.forward(x), 2 * x)


def _oracle_two_layer(w1, b1, w2, b2, x):
    out = np.zeros((x.shape[0], w2.shape[1]))
    for n in range(x.shape[0]):
        h = [np.tanh(sum(x[n, i] * w1[i, j] for i in range(w1.shape[0])) + b1[j]) for j in range(w1.shape[1])]
        for k in range(w2.shape[1]):
            out[n, k] = sum(h[j] * w2[j, k] for j in range(len(h))) + b2[k]
    return out


def test_forward_matches_hand_oracle():
    net = build_sequential(
        [
            LayerSpec("dense", {"in_dim": 3, "out_dim": 5}),
            LayerSpec("activation", {"fn": "tanh"}),
            LayerSpec("dense", {"in_dim": 5, "out_dim": 2}),
        ],
        seed=5,
        dtype=F64,
    )
    for p in net.parameters().values():
        p[...] = rng(9).normal(size=p.shape)
    x = rng(3).normal(size=(4, 3))
    p = net.parameters()
    expected = _oracle_two_layer(
        p["0_dense.weight"], p["0_dense.bias"], p["2_dense.weight"], p["2_dense.bias"], x
    )
    assert np.max(np.abs(net.forward(x) - expected)) < 1e-6


def test_forward_deterministic_bitwise():
    net = build_sequential(
        [LayerSpec("conv1d", {"in_channels": 3, "out_channels": 8, "kernel_size": 3, "dilation": 2}),
         LayerSpec("attention_block", {"model_dim": 8, "heads": 2})],
        seed=1,
    )
    x = rng(4).normal(size=(2, 9, 3)).astype(np.float32)
    assert net.forward(x).tobytes() == net.forward(x).tobytes()


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        Dense(3, 2, rng()).forward(np.zeros((2, 4)))
    with pytest.raises(ShapeMismatch):
        Conv1d(3, 2, 3, rng()).forward(np.zeros((2, 5, 4)))


def test_backward_without_forward():
    with pytest.raises(NoForwardState):
        Dense(2, 2, rng()).backward(np.zeros((1, 2)))
    layer = LayerNorm(3)
    layer.forward(np.ones((1, 3)))
    layer.backward(np.ones((1, 3)))
    with pytest.raises(NoForwardState):
        layer.backward(np.ones((1, 3)))


def test_mse_at_minimum_gives_zero_gradients():
    net = build_sequential(
        [LayerSpec("dense", {"in_dim": 3, "out_dim": 4}), LayerSpec("activation", {"fn": "gelu"}),
         LayerSpec("dense", {"in_dim": 4, "out_dim": 2})],
        seed=0,
        dtype=F64,
    )
    x = rng(1).normal(size=(5, 3))
    y = net.forward(x)
    loss, dl = mse_loss(y, y.copy())
    assert loss == 0.0
    for g in backward(net, dl).values():
        assert np.all(g == 0)


def test_dense_bias_grad_is_upstream_sum():
    layer = Dense(3, 2, rng(), F64)
    layer.forward(np.ones((6, 3)))
    up = rng(2).normal(size=(6, 2))
    layer.backward(up)
    np.testing.assert_allclose(layer.grads["bias"], up.sum(axis=0), atol=1e-12)


def make_layer(kind, seed):
    r = rng(seed)
    if kind == "dense":
        return Dense(4, 3, r, F64), r.normal(size=(2, 5, 4))
    if kind == "conv1d_edge":
        return Conv1d(3, 4, 3, r, dilation=2, padding="edge", dtype=F64), r.normal(size=(2, 7, 3))
    if kind == "conv1d_zero":
        return Conv1d(2, 3, 4, r, dilation=1, padding="zero", dtype=F64), r.normal(size=(2, 6, 2))
    if kind == "layer_norm":
        layer = LayerNorm(5, F64)
        layer.params["gain"][...] = r.normal(size=5)
        layer.params["bias"][...] = r.normal(size=5)
        return layer, r.normal(size=(3, 4, 5))
    if kind.startswith("activation_"):
        x = r.normal(size=(3, 6))
        x[np.abs(x) < 1e-3] = 0.5
        return Activation(kind.split("_")[1]), x
    if kind == "attention_block":
        layer = AttentionBlock(8, 2, r, dtype=F64)
        for p in layer.parameters().values():
            p[...] = r.normal(scale=0.5, size=p.shape)
        return layer, r.normal(size=(2, 5, 8))
    raise KeyError(kind)


KINDS = [
    "dense",
    "conv1d_edge",
    "conv1d_zero",
    "layer_norm",
    "activation_relu",
    "activation_gelu",
    "activation_tanh",
    "attention_block",
]


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_finite_difference_per_layer(kind, seed):
    layer, x = make_layer(kind, seed)
    errors = check_layer(layer, x, seed=seed)
    assert max(errors.values()) < 1e-4, errors


@settings(max_examples=15, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    channels=st.integers(1, 4),
    frames=st.integers(1, 9),
    kernel=st.integers(1, 4),
    dilation=st.integers(1, 3),
    padding=st.sampled_from(["edge", "zero"]),
)
def test_conv1d_gradients_random_shapes(seed, channels, frames, kernel, dilation, padding):
    r = rng(seed)
    layer = Conv1d(channels, 2, kernel, r, dilation=dilation, padding=padding, dtype=F64)
    errors = check_layer(layer, r.normal(size=(2, frames, channels)), seed=seed)
    assert max(errors.values()) < 1e-4


def test_composite_network_gradients():
    net = Sequential(
        [
            ("conv", Conv1d(3, 8, 3, rng(1), dilation=3, dtype=F64)),
            ("act", Activation("gelu")),
            ("block", AttentionBlock(8, 4, rng(2), dtype=F64)),
            ("norm", LayerNorm(8, F64)),
            ("out", Dense(8, 2, rng(3), F64)),
        ]
    )
    errors = check_layer(net, rng(4).normal(size=(2, 6, 3)))
    assert max(errors.values()) < 1e-4, errors


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_is_signed_lr():
    p = {"w": np.array([0.0, 0.0, 0.0])}
    g = np.array([3.0, -0.02, 50.0])
    adam_step(p, {"w": g}, AdamState(), lr=0.01)
    np.testing.assert_allclose(p["w"], -0.01 * np.sign(g), atol=1e-6)


def test_adam_converges_on_quadratic():
    p = {"w": np.array([0.0])}
    state = AdamState()
    for _ in range(500):
        adam_step(p, {"w": 2 * (p["w"] - 3.0)}, state, lr=0.1)
    assert abs(p["w"][0] - 3.0) < 1e-3


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


def test_training_loss_mostly_non_increasing():
    good = 0
    trials = 20
    for seed in range(trials):
        r = rng(seed)
        net = build_sequential(
            [LayerSpec("dense", {"in_dim": 4, "out_dim": 16}), LayerSpec("activation", {"fn": "tanh"}),
             LayerSpec("dense", {"in_dim": 16, "out_dim": 2})],
            seed=seed,
        )
        x = r.normal(size=(8, 4)).astype(np.float32)
        y = r.normal(size=(8, 2)).astype(np.float32)
        state, losses = AdamState(), []
        for _ in range(100):
            loss, dl = mse_loss(net.forward(x), y)
            losses.append(loss)
            adam_step(net.parameters(), backward(net, dl), state, lr=1e-3)
        good += bool(np.all(np.diff(losses) <= 1e-7))
    assert good / trials >= 0.95


@pytest.mark.parametrize(
    "stack, expected",
    [([(3, 1)], 3), ([(3, 1), (3, 3), (3, 9), (3, 27), (3, 81)], 243), ([(1, 1)], 1)],
)
def test_receptive_field(stack, expected):
    assert receptive_field(stack) == expected


def test_checkpoint_round_trip_bit_exact():
    net = build_sequential([LayerSpec("attention_block", {"model_dim": 4, "heads": 2})], seed=3)
    tensors = net.parameters()
    tensors["scalar"] = np.float32(1.5) * np.ones(())
    blob = dumps_checkpoint(tensors)
    assert blob[:4] == b"CKP1"
    back, version = loads_checkpoint(blob)
    assert version == 1
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].astype(np.float32).tobytes() == np.asarray(tensors[k], np.float32).tobytes()
    assert dumps_checkpoint(back) == blob


@pytest.mark.parametrize("padding", ["edge", "zero"])
def test_conv1d_gradients_dilation_wider_than_window(padding):
    r = rng(0)
    layer = Conv1d(2, 3, 3, r, dilation=5, padding=padding, dtype=F64)
    errors = check_layer(layer, r.normal(size=(2, 3, 2)))
    assert max(errors.values()) < 1e-4, errors
