import numpy as np
import pytest

from keyframe_rl import nn


def naive_conv(w, b, x, dilation):
    # direct loop over output positions; zero outside [0, L)
    out_c, in_c, k = w.shape
    length = x.shape[1]
    half = (k - 1) // 2
    y = np.zeros((out_c, length))
    for o in range(out_c):
        for t in range(length):
            acc = b[o]
            for i in range(in_c):
                for j in range(k):
                    src = t + (j - half) * dilation
                    if 0 <= src < length:
                        acc += w[o, i, j] * x[i, src]
            y[o, t] = acc
    return y


@pytest.mark.parametrize("dilation", [1, 2, 4, 8])
def test_conv_matches_naive_loop(dilation):
    rng = np.random.default_rng(dilation)
    layer = nn.ConvLayer(rng.normal(size=(3, 2, 3)), rng.normal(size=3), dilation)
    x = rng.normal(size=(2, 11))
    np.testing.assert_allclose(nn.conv1d_forward(layer, x), naive_conv(layer.weights, layer.bias, x, dilation), atol=1e-12)


def test_conv_batched_equals_per_sample():
    rng = np.random.default_rng(0)
    layer = nn.init_conv(2, 4, dilation=2, rng=rng)
    layer.bias[:] = rng.normal(size=4)
    xb = rng.normal(size=(3, 2, 9))
    yb = nn.conv1d_forward(layer, xb)
    for b in range(3):
        np.testing.assert_allclose(yb[b], nn.conv1d_forward(layer, xb[b]), atol=1e-13)


def test_conv_is_linear_in_input_without_bias():
    rng = np.random.default_rng(1)
    layer = nn.init_conv(2, 3, dilation=4, rng=rng)
    x1, x2 = rng.normal(size=(2, 2, 10))
    lhs = nn.conv1d_forward(layer, 2.0 * x1 - 3.0 * x2)
    rhs = 2.0 * nn.conv1d_forward(layer, x1) - 3.0 * nn.conv1d_forward(layer, x2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_conv_rejects_channel_mismatch():
    layer = nn.init_conv(2, 3, rng=0)
    with pytest.raises(ValueError):
        nn.conv1d_forward(layer, np.zeros((3, 5)))


def test_conv_layer_validation():
    with pytest.raises(ValueError):
        nn.ConvLayer(np.zeros((2, 2, 2)), np.zeros(2))  # even kernel
    with pytest.raises(ValueError):
        nn.ConvLayer(np.zeros((2, 2, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        nn.ConvLayer(np.zeros((2, 2, 3)), np.zeros(2), dilation=0)


def test_conv_backward_against_finite_differences():
    rng = np.random.default_rng(3)
    layer = nn.init_conv(3, 2, dilation=2, rng=rng)
    x = rng.normal(size=(2, 3, 8))
    w = rng.normal(size=(2, 2, 8))
    gx, gw, gb = nn.conv1d_backward(layer, x, w)
    f = lambda: float(np.sum(w * nn.conv1d_forward(layer, x)))
    rep = nn.grad_check(f, {"w": layer.weights, "b": layer.bias, "x": x}, {"w": gw, "b": gb, "x": gx})
    assert rep.passed(1e-6), rep.per_param


def test_downsample_ties_go_left_and_backward_routes():
    x = np.array([[1.0, 1.0, 0.0, 2.0, 5.0, -1.0]])
    y, arg = nn.downsample2(x)
    np.testing.assert_array_equal(y, [[1.0, 2.0, 5.0]])
    np.testing.assert_array_equal(arg, [[0, 1, 0]])
    g = nn.downsample2_backward(np.array([[10.0, 20.0, 30.0]]), arg)
    np.testing.assert_array_equal(g, [[10.0, 0.0, 0.0, 20.0, 30.0, 0.0]])
    with pytest.raises(ValueError):
        nn.downsample2(np.zeros((1, 5)))


def test_upsample_and_its_adjoint():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 5))
    g = rng.normal(size=(2, 10))
    # <up(x), g> == <x, up^T(g)>
    assert np.isclose(np.sum(nn.upsample2(x) * g), np.sum(x * nn.upsample2_backward(g)))


def test_relu_subgradient_is_zero_at_zero():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(nn.relu_backward(x, np.ones(3)), [0.0, 0.0, 1.0])


def test_adam_first_step_closed_form():
    # after bias correction the first step is lr * g / (|g| + eps) elementwise
    p = {"a": np.array([1.0, -2.0, 0.5])}
    g = {"a": np.array([0.3, -4.0, 0.0])}
    state = nn.AdamState(lr=0.1)
    nn.adam_step(p, g, state)
    expected = np.array([1.0, -2.0, 0.5]) - 0.1 * g["a"] / (np.abs(g["a"]) + 1e-8)
    np.testing.assert_allclose(p["a"], expected, rtol=0, atol=1e-15)
    assert state.step == 1


def test_adam_second_step_recurrence():
    p = {"a": np.array([0.0])}
    state = nn.AdamState(lr=0.01, beta1=0.9, beta2=0.999)
    g1, g2 = 2.0, -1.0
    nn.adam_step(p, {"a": np.array([g1])}, state)
    nn.adam_step(p, {"a": np.array([g2])}, state)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1**2 + 0.001 * g2**2
    step2 = 0.01 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    step1 = 0.01 * g1 / (abs(g1) + 1e-8)
    assert p["a"][0] == pytest.approx(-step1 - step2, abs=1e-15)


def test_adam_rejects_mismatched_keys():
    with pytest.raises(ValueError):
        nn.adam_step({"a": np.zeros(2)}, {"b": np.zeros(2)}, nn.AdamState())


def test_grad_check_flags_wrong_gradient():
    x = np.array([1.0, 2.0])
    f = lambda: float(np.sum(x**2))
    assert nn.grad_check(f, {"x": x}, {"x": 2 * x}).passed()
    assert not nn.grad_check(f, {"x": x}, {"x": 2.1 * x}).passed()
    np.testing.assert_array_equal(x, [1.0, 2.0])  # restored


def test_grad_check_skips_kink_crossings():
    x = np.array([1e-5])
    f = lambda: float(np.abs(x).sum())
    sig = lambda: bytes([int(x[0] > 0)])
    rep = nn.grad_check(f, {"x": x}, {"x": np.array([1.0])}, step=1e-4, signature=sig)
    assert rep.n_skipped == 1 and rep.n_checked == 0


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    arrays = {"w": rng.normal(size=(3, 2, 3)), "b": rng.normal(size=3), "s": np.array(np.pi)}
    path = tmp_path / "x.ckpt"
    nn.save_checkpoint(path, arrays, {"kind": "test"})
    back, meta = nn.load_checkpoint(path)
    assert meta == {"kind": "test"}
    for k, a in arrays.items():
        assert back[k].shape == a.shape
        assert back[k].tobytes() == a.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00hello")
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(path)
    nn.save_checkpoint(path, {"a": np.zeros(4)})
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(path)
    path.write_bytes(data + b"\x00")
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(path)
