import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridpost.errors import ConfigError, DimensionError, NumericError
from gridpost.numerics import (
    AdamState,
    Dense,
    Embedding,
    LayerSpec,
    Sequential,
    adam_step,
    backward,
    conv2d_forward,
    dense_forward,
    grad_check,
    maxpool2d,
    mse_loss,
    softplus,
    softplus_inv,
    tconv2d_forward,
)
from gridpost.numerics.ops import conv_output_size, tconv_output_size

SIGMOID_1 = 0.7310585786300049  # 1 / (1 + exp(-1)), evaluated independently


# --------------------------------------------------------------- conv2d


def test_conv_scaling_kernel():
    y = conv2d_forward(np.ones((1, 3, 3)), np.full((1, 1, 1, 1), 2.0), np.zeros(1))
    np.testing.assert_array_equal(y, np.full((1, 3, 3), 2.0))


def test_conv_hand_sum():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    y = conv2d_forward(x, np.ones((1, 1, 2, 2)), np.zeros(1))
    np.testing.assert_array_equal(y, [[[10.0]]])


def test_conv_same_padding_shape():
    k = np.zeros((16, 1, 3, 3), dtype=np.float32)
    y = conv2d_forward(np.zeros((1, 81, 81), dtype=np.float32), k, np.zeros(16, np.float32), 1, 1)
    assert y.shape == (16, 81, 81)


def test_conv_is_cross_correlation():
    # a kernel with a single 1 at the top-left picks the top-left neighbour, no flip
    x = np.arange(9.0).reshape(1, 3, 3)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 0, 0] = 1.0
    y = conv2d_forward(x, k, np.zeros(1), padding=1)
    assert y[0, 1, 1] == x[0, 0, 0]


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d_forward(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        conv2d_forward(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))


def test_conv_batch_matches_single(rng):
    x = rng.normal(size=(3, 2, 7, 6))
    k = rng.normal(size=(4, 2, 3, 3))
    b = rng.normal(size=4)
    batch = conv2d_forward(x, k, b, stride=2, padding=1)
    for i in range(3):
        np.testing.assert_allclose(batch[i], conv2d_forward(x[i], k, b, stride=2, padding=1))


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(2, 5, 6))
    k = rng.normal(size=(3, 2, 3, 2))
    b = rng.normal(size=3)
    y = conv2d_forward(x, k, b, stride=(2, 1), padding=(1, 0))
    xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
    ho, wo = conv_output_size(5, 3, 2, 1), conv_output_size(6, 2, 1, 0)
    ref = np.empty((3, ho, wo))
    for f in range(3):
        for i in range(ho):
            for j in range(wo):
                ref[f, i, j] = np.sum(xp[:, 2 * i:2 * i + 3, j:j + 2] * k[f]) + b[f]
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


# --------------------------------------------------------------- tconv2d


def test_tconv_upsampling_extent():
    assert tconv_output_size(3, 9, 3, 3) == 9
    y = tconv2d_forward(np.ones((1, 3, 3)), np.ones((1, 1, 9, 9)), np.zeros(1), 3, 3)
    assert y.shape == (1, 9, 9)


def test_tconv_scalar():
    y = tconv2d_forward(np.array([[[1.5]]]), np.array([[[[-2.0]]]]), np.zeros(1))
    np.testing.assert_array_equal(y, [[[-3.0]]])


def test_tconv_padding_must_be_smaller_than_kernel():
    with pytest.raises(ConfigError):
        tconv2d_forward(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), 1, 3)


@settings(max_examples=60, deadline=None)
@given(
    c=st.integers(1, 3),
    f=st.integers(1, 3),
    k=st.integers(1, 5),
    s=st.integers(1, 3),
    p=st.integers(0, 2),
    h=st.integers(1, 9),
    w=st.integers(1, 9),
    seed=st.integers(0, 2**31 - 1),
)
def test_conv_tconv_adjoint(c, f, k, s, p, h, w, seed):
    p = min(p, k - 1)
    # conforming geometry: the strided windows tile the padded input exactly
    h, w = k - 2 * p + s * (h + p), k - 2 * p + s * (w + p)
    g = np.random.default_rng(seed)
    kern = g.normal(size=(f, c, k, k))
    x = g.normal(size=(c, h, w))
    y = g.normal(size=(f, conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)))
    lhs = np.vdot(conv2d_forward(x, kern, np.zeros(f), s, p), y)
    back = tconv2d_forward(y, kern, np.zeros(c), s, p)
    assert back.shape == x.shape
    rhs = np.vdot(x, back)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


# --------------------------------------------------------------- pooling


def test_maxpool_example():
    y, idx = maxpool2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
    np.testing.assert_array_equal(y, [[[4.0]]])
    assert idx[0, 0, 0] == 3


def test_maxpool_default_geometry():
    y, _ = maxpool2d(np.zeros((16, 81, 81), dtype=np.float32), 3, 3)
    assert y.shape == (16, 27, 27)


@given(st.floats(-1e6, 1e6, allow_nan=False), st.integers(3, 12), st.integers(1, 3))
def test_maxpool_constant_field(c, n, s):
    y, _ = maxpool2d(np.full((2, n, n), c), 3, s)
    assert np.all(y == c)


def test_maxpool_window_too_large():
    with pytest.raises(DimensionError):
        maxpool2d(np.zeros((1, 2, 2)), 3, 3)


# --------------------------------------------------------------- dense


def test_dense_identity():
    x = np.array([0.5, -2.0, 3.0])
    np.testing.assert_array_equal(dense_forward(x, np.eye(3), np.zeros(3)), x)


def test_dense_relu_clamps():
    y = dense_forward(np.array([1.0, 1.0]), np.array([[1.0, 1.0]]), np.array([-3.0]), "relu")
    np.testing.assert_array_equal(y, [0.0])


def test_dense_sigmoid():
    y = dense_forward(np.array([0.0]), np.array([[2.0]]), np.array([1.0]), "sigmoid")
    assert y[0] == pytest.approx(SIGMOID_1, abs=1e-15)


def test_dense_shape_mismatch():
    with pytest.raises(DimensionError):
        dense_forward(np.zeros(3), np.zeros((2, 4)), np.zeros(2))
    with pytest.raises(DimensionError):
        dense_forward(np.zeros(4), np.zeros((2, 4)), np.zeros(3))


def test_unknown_activation():
    with pytest.raises(ConfigError):
        dense_forward(np.zeros(1), np.ones((1, 1)), np.zeros(1), "tanhh")


@given(st.floats(-30, 700))
def test_softplus_inverse_roundtrip(z):
    s = softplus(np.float64(z))
    assert float(softplus_inv(s)) == pytest.approx(z, rel=1e-9, abs=1e-9)


# --------------------------------------------------------------- backward


def _f64(specs, in_shape, seed=0):
    return Sequential.from_specs(specs, in_shape, np.random.default_rng(seed), dtype=np.float64)


def test_backward_single_dense_hand_gradient(rng):
    net = _f64([LayerSpec("dense", filters=1)], (3,))
    x = rng.normal(size=(1, 3))
    y = rng.normal(size=(1, 1))
    W, b = net.layers[0].params["W"], net.layers[0].params["b"]
    _, grads = backward(net, (x, y), mse_loss)
    resid = x @ W.T + b - y
    named = dict(zip(net.param_names(), grads))
    np.testing.assert_allclose(named["0:dense.W"], 2 * resid.T @ x)
    np.testing.assert_allclose(named["0:dense.b"], 2 * resid[0])


def test_backward_zero_loss_zero_gradients(rng):
    net = _f64([LayerSpec("dense", filters=4, activation="linear"),
                LayerSpec("activation", activation="softplus"),
                LayerSpec("dense", filters=2)], (3,))
    x = rng.normal(size=(5, 3))
    y = net.forward(x)
    value, grads = backward(net, (x, y), mse_loss)
    assert value == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_backward_non_finite_loss(rng):
    net = _f64([LayerSpec("dense", filters=1)], (2,))
    with pytest.raises(NumericError):
        backward(net, (np.ones((1, 2)), np.array([[np.inf]])), mse_loss)


def test_forward_non_finite_activation_names_layer():
    net = _f64([LayerSpec("dense", filters=2), LayerSpec("activation", activation="relu")], (2,))
    with pytest.raises(NumericError) as exc:
        net.forward(np.array([[np.nan, 1.0]]))
    assert exc.value.layer_index == 0


# --------------------------------------------------------------- grad_check


def test_grad_check_square():
    x = np.array([3.0])
    err = grad_check(lambda: (float(x[0] ** 2), [2 * x]), [x])
    assert err < 1e-8


def test_grad_check_detects_wrong_gradient():
    x = np.array([3.0])
    assert grad_check(lambda: (float(x[0] ** 2), [3 * x]), [x]) > 0.1


def _net_check(net, x, y, max_entries=None):
    params = net.parameters()
    return grad_check(lambda: backward(net, (x, y), mse_loss), params, max_entries=max_entries)


LAYER_CASES = {
    "dense": ([LayerSpec("dense", filters=3)], (4,)),
    "dense_relu": ([LayerSpec("dense", filters=6), LayerSpec("activation", activation="relu"),
                    LayerSpec("dense", filters=2)], (4,)),
    "dense_sigmoid": ([LayerSpec("dense", filters=3), LayerSpec("activation", activation="sigmoid")], (4,)),
    "dense_softplus": ([LayerSpec("dense", filters=3), LayerSpec("activation", activation="softplus")], (4,)),
    "conv": ([LayerSpec("conv2d", filters=3, kernel=(3, 3), padding=(1, 1))], (2, 5, 5)),
    "conv_strided": ([LayerSpec("conv2d", filters=2, kernel=(3, 2), stride=(2, 1), padding=(1, 0))], (3, 7, 6)),
    "conv_wide": ([LayerSpec("conv2d", filters=5, kernel=(3, 3), padding=(1, 1))], (6, 5, 5)),
    "tconv": ([LayerSpec("tconv2d", filters=2, kernel=(3, 3), stride=(1, 1), padding=(1, 1))], (3, 4, 4)),
    "tconv_polyphase": ([LayerSpec("tconv2d", filters=2, kernel=(9, 9), stride=(3, 3), padding=(3, 3))], (2, 3, 3)),
    "tconv_generic": ([LayerSpec("tconv2d", filters=2, kernel=(4, 3), stride=(2, 3), padding=(1, 1))], (2, 3, 3)),
    "maxpool": ([LayerSpec("maxpool2d", kernel=(3, 3), stride=(3, 3))], (2, 6, 6)),
    "maxpool_overlap": ([LayerSpec("maxpool2d", kernel=(3, 3), stride=(1, 1))], (1, 5, 5)),
    "flatten_reshape": ([LayerSpec("flatten"), LayerSpec("dense", filters=8),
                         LayerSpec("reshape", shape=(2, 2, 2))], (1, 3, 3)),
}


@pytest.mark.parametrize("case", sorted(LAYER_CASES))
def test_layer_gradients(case, rng):
    specs, in_shape = LAYER_CASES[case]
    net = _f64(specs, in_shape, seed=1)
    x = rng.normal(size=(3,) + in_shape)
    y = rng.normal(size=(3,) + net.out_shape)
    if case.startswith("maxpool"):
        # tie-free inputs keep the argmax stable under the finite-difference step
        x = rng.permutation(np.arange(x.size, dtype=float)).reshape(x.shape) * 0.1
        net = _f64([LayerSpec("dense", filters=int(np.prod(in_shape))),
                    LayerSpec("reshape", shape=in_shape)] + specs, (int(np.prod(in_shape)),), seed=1)
        x = x.reshape(3, -1)
    assert _net_check(net, x, y) < 1e-4


def test_embedding_gradient(rng):
    emb = Embedding(5, 3, rng, dtype=np.float64)
    idx = np.array([0, 2, 2, 4])
    target = rng.normal(size=(4, 3))

    def f():
        emb.zero_grad()
        value, d = mse_loss(emb.forward(idx), target)
        emb.backward(d)
        return value, [emb.grads["E"]]

    assert grad_check(f, [emb.params["E"]]) < 1e-4
    # rows that were never looked up receive no gradient
    f()
    assert np.all(emb.grads["E"][[1, 3]] == 0)


def test_two_layer_mlp_gradient(rng):
    net = _f64([LayerSpec("dense", filters=10), LayerSpec("activation", activation="relu"),
                LayerSpec("dense", filters=3)], (6,), seed=4)
    assert _net_check(net, rng.normal(size=(8, 6)), rng.normal(size=(8, 3))) < 1e-4


# --------------------------------------------------------------- Adam


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState.for_params(p)
    adam_step(p, [np.zeros(2)], st_)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    assert st_.t == 1


@given(st.lists(st.floats(1e-3, 1e3).flatmap(lambda a: st.sampled_from([a, -a])), min_size=1, max_size=6))
def test_adam_first_step_is_lr_times_sign(g):
    g = np.array(g)
    p = [np.zeros_like(g)]
    adam_step(p, [g], AdamState.for_params(p, lr=0.001))
    np.testing.assert_allclose(p[0], -0.001 * np.sign(g), rtol=1e-3)


def test_adam_constant_gradient_monotone():
    p = [np.array([0.0])]
    st_ = AdamState.for_params(p, lr=0.01)
    adam_step(p, [np.array([2.0])], st_)
    first = p[0].copy()
    adam_step(p, [np.array([2.0])], st_)
    assert 0 > first[0] > p[0][0]


def test_adam_shape_mismatch():
    p = [np.zeros(2)]
    with pytest.raises(DimensionError):
        adam_step(p, [np.zeros(3)], AdamState.for_params(p))
    with pytest.raises(ConfigError):
        AdamState(beta1=1.0)


# --------------------------------------------------------------- determinism and specs


def _train_steps(seed, n=5):
    rng = np.random.default_rng(99)
    x, y = rng.normal(size=(16, 4)), rng.normal(size=(16, 2))
    net = Sequential.from_specs([LayerSpec("dense", filters=8), LayerSpec("activation", activation="relu"),
                                 LayerSpec("dense", filters=2)], (4,), np.random.default_rng(seed))
    st_ = AdamState.for_params(net.parameters())
    for _ in range(n):
        _, g = backward(net, (x.astype(np.float32), y.astype(np.float32)), mse_loss)
        adam_step(net.parameters(), g, st_)
    return net.parameters()


def test_training_is_bitwise_deterministic():
    a, b = _train_steps(7), _train_steps(7)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    c = _train_steps(8)
    assert not all(np.array_equal(u, v) for u, v in zip(a, c))


def test_layer_spec_validation():
    with pytest.raises(ConfigError):
        LayerSpec("lstm")
    with pytest.raises(ConfigError):
        LayerSpec("conv2d", filters=0)
    with pytest.raises(ConfigError):
        LayerSpec("conv2d", filters=1, stride=(0, 1))
    with pytest.raises(ConfigError):
        LayerSpec("dense", filters=1, activation="tanh")


def test_from_specs_reports_failing_layer():
    with pytest.raises(DimensionError, match="layer 1"):
        Sequential.from_specs([LayerSpec("flatten"), LayerSpec("reshape", shape=(5,))], (2, 2),
                              np.random.default_rng(0))


def test_parameter_bookkeeping():
    net = Sequential.from_specs([LayerSpec("dense", filters=3), LayerSpec("dense", filters=1)], (2,),
                                np.random.default_rng(0))
    assert net.n_parameters() == 2 * 3 + 3 + 3 + 1
    assert net.param_names() == ["0:dense.W", "0:dense.b", "1:dense.W", "1:dense.b"]
    assert all(p.dtype == np.float32 for p in net.parameters())


def test_dense_layer_glorot_bounds():
    layer = Dense(50, 30, np.random.default_rng(0), dtype=np.float64)
    assert np.abs(layer.params["W"]).max() <= np.sqrt(6 / 80)
    assert np.all(layer.params["b"] == 0)
