import logging

import numpy as np
import pytest

from metricgan_se import autodiff as ad
from metricgan_se.autodiff import AdamState, NonFiniteError, PowerIterState, ShapeError, Tape, Tensor
from metricgan_se.gradcheck import PRIMITIVE_RTOL, check_gradients

from gradcases import PRIMITIVES, leaf


def grads_of(loss_fn, *tensors):
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [t.grad for t in tensors]


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    worst = 0.0
    for seed in range(50):
        loss_fn, inputs = PRIMITIVES[name](np.random.default_rng(seed))
        worst = max(worst, max(check_gradients(loss_fn, inputs).values()))
    assert worst < PRIMITIVE_RTOL


def test_relu_values():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_leaky_relu_values():
    np.testing.assert_allclose(ad.leaky_relu(Tensor([-1.0, 2.0]), 0.3).data, [-0.3, 2.0])


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax_last_dim(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])


def test_mean_square_gradient():
    x = leaf([1.0, 2.0, 3.0])
    (g,) = grads_of(lambda: ad.mean(ad.mul(x, x)), x)
    np.testing.assert_allclose(g, [2 / 3, 4 / 3, 2.0])


def test_sum_gradient_is_ones():
    x = leaf(np.zeros((2, 3)))
    (g,) = grads_of(lambda: ad.sum(x), x)
    np.testing.assert_array_equal(g, np.ones((2, 3)))


def test_gradients_accumulate_until_zeroed():
    x = leaf([1.0, 2.0])
    for _ in range(2):
        with Tape() as tape:
            loss = ad.sum(ad.mul_scalar(x, 3.0))
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    ad.zero_grad([x])
    assert x.grad is None


def test_backward_twice_is_an_error():
    x = leaf([1.0])
    with Tape() as tape:
        loss = ad.sum(x)
    tape.backward(loss)
    with pytest.raises(RuntimeError, match="already"):
        tape.backward(loss)
    tape.reset()


def test_tensor_frozen_during_forward_gets_no_gradient():
    x, b = leaf([1.0, 2.0]), leaf([0.5, 0.5], "b")
    b.requires_grad = False
    with Tape() as tape:
        loss = ad.sum(ad.mul(ad.add(x, b), x))
    b.requires_grad = True
    tape.backward(loss)
    assert b.grad is None
    np.testing.assert_allclose(x.grad, 2 * x.data + 0.5)


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = ad.mul_scalar(x, 2.0)
    with pytest.raises(ShapeError, match="scalar"):
        tape.backward(y)


def test_nothing_recorded_outside_a_tape():
    x = leaf([1.0])
    y = ad.mul_scalar(x, 2.0)
    assert not y.requires_grad
    with pytest.raises(RuntimeError):
        ad.backward(y)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\) vs \(3,\)"):
        ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError, match=r"\(2, 3\) vs \(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        ad.log1p(Tensor([-2.0]))
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        ad.mul_scalar(Tensor([1e308]), 10.0)


def test_composite_mlp_gradient():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((5, 4)))
    w1, b1 = leaf(rng.standard_normal((4, 6)), "w1"), leaf(rng.standard_normal(6), "b1")
    w2, b2 = leaf(rng.standard_normal((6, 2)), "w2"), leaf(rng.standard_normal(2), "b2")
    y = Tensor(rng.standard_normal((5, 2)))

    def loss():
        h = ad.sigmoid(ad.linear(x, w1, b1))
        return ad.squared_error_mean(ad.linear(h, w2, b2), y)

    errs = check_gradients(loss, {"w1": w1, "b1": b1, "w2": w2, "b2": b2})
    assert max(errs.values()) < 1e-4


# ---------------------------------------------------------------------------
# convolutions and normalisation


def test_conv1d_identity_kernel():
    x = Tensor(np.arange(12.0).reshape(4, 3))
    w = Tensor(np.eye(3)[:, :, None])
    np.testing.assert_array_equal(ad.conv1d_causal(x, w).data, x.data)


def test_conv1d_left_padding():
    # kernel taps [w0, w1] over [x[t-1], x[t]] with a zero before the start
    x = Tensor([[1.0], [2.0], [3.0]])
    w = Tensor([[[0.0, 1.0]]])
    np.testing.assert_array_equal(ad.conv1d_causal(x, w).data, [[1.0], [2.0], [3.0]])
    w = Tensor([[[1.0, 0.0]]])
    np.testing.assert_array_equal(ad.conv1d_causal(x, w).data, [[0.0], [1.0], [2.0]])


def test_conv1d_rejects_stride():
    with pytest.raises(ValueError, match="stride"):
        ad.conv1d_causal(Tensor(np.ones((3, 1))), Tensor(np.ones((1, 1, 2))), stride=2)


def test_conv1d_causality_bitwise():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((12, 3)).astype(np.float32)
    w = Tensor(rng.standard_normal((4, 3, 3)).astype(np.float32))
    base = ad.conv1d_causal(Tensor(x), w).data
    for t in range(11):
        x2 = x.copy()
        x2[t + 1:] += rng.standard_normal(x2[t + 1:].shape).astype(np.float32)
        out = ad.conv1d_causal(Tensor(x2), w).data
        assert np.array_equal(out[:t + 1], base[:t + 1])


def test_conv1d_input_jacobian_is_lower_triangular():
    rng = np.random.default_rng(2)
    x = leaf(rng.standard_normal((6, 2)))
    w = Tensor(rng.standard_normal((3, 2, 3)))
    for t in range(6):
        (g,) = grads_of(lambda: ad.sum(ad.slice_last(ad.reshape(ad.conv1d_causal(x, w), (1, -1)), 3 * t, 3 * t + 3)), x)
        assert not np.any(g[t + 1:])


def test_conv2d_identity_kernel():
    x = Tensor(np.random.default_rng(3).standard_normal((4, 5, 2)))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(ad.conv2d(x, Tensor(w)).data, x.data)


def test_conv2d_ones_kernel_on_impulse():
    x = np.zeros((7, 7, 1))
    x[3, 3, 0] = 1.0
    y = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3)))).data[:, :, 0]
    expected = np.zeros((7, 7))
    expected[2:5, 2:5] = 1.0
    np.testing.assert_array_equal(y, expected)


def test_conv2d_rejects_even_kernel():
    with pytest.raises(ValueError, match="even"):
        ad.conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((1, 1, 2, 3))))


def test_layer_norm_closed_form():
    y = ad.layer_norm_channels(Tensor([[1.0, 3.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0])).data
    expected = np.array([-1.0, 1.0]) / np.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(y[0], expected, rtol=1e-12)


def test_layer_norm_constant_row_and_small_c():
    y = ad.layer_norm_channels(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    np.testing.assert_array_equal(y, np.zeros((1, 3)))
    with pytest.raises(ValueError, match="2 channels"):
        ad.layer_norm_channels(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))


def test_layer_norm_frames_independent():
    rng = np.random.default_rng(4)
    x = leaf(rng.standard_normal((5, 4)))
    g, b = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
    for t in range(5):
        (gx,) = grads_of(lambda: ad.sum(ad.slice_last(ad.reshape(ad.layer_norm_channels(x, g, b), (1, -1)),
                                                      4 * t, 4 * t + 4)), x)
        others = np.delete(gx, t, axis=0)
        assert not np.any(others)


def test_global_avg_pool():
    assert np.all(ad.global_avg_pool2d(Tensor(np.full((3, 4, 2), 1.5))).data == 1.5)
    one = np.random.default_rng(5).standard_normal((1, 1, 3))
    np.testing.assert_array_equal(ad.global_avg_pool2d(Tensor(one)).data, one[0, 0])
    x = np.random.default_rng(6).standard_normal((4, 6, 3))
    expected = [np.sum(x[:, :, c]) / 24 for c in range(3)]
    np.testing.assert_allclose(ad.global_avg_pool2d(Tensor(x)).data, expected, rtol=1e-12)


# ---------------------------------------------------------------------------
# spectral normalisation


def test_spectral_norm_diagonal():
    w = Tensor(np.diag([3.0, 1.0]))
    st = PowerIterState(np.array([0.6, 0.8]), np.array([0.8, 0.6]))
    ad.power_iteration(w.data, st, 30)
    np.testing.assert_allclose(ad.spectral_normalize(w, st).data, np.diag([1.0, 1 / 3]), atol=1e-9)


def test_spectral_norm_orthogonal_unchanged():
    q, _ = np.linalg.qr(np.random.default_rng(7).standard_normal((5, 5)))
    st = PowerIterState.init((5, 5), np.random.default_rng(8))
    ad.power_iteration(q, st, 1)
    np.testing.assert_allclose(ad.spectral_normalize(Tensor(q), st).data, q, atol=1e-2)


@pytest.mark.parametrize("shape", [(6, 4), (3, 2, 3, 3), (10, 50), (1, 7)])
def test_spectral_norm_after_warm_up(shape):
    rng = np.random.default_rng(9)
    w = Tensor(rng.standard_normal(shape) * 3.0)
    st = PowerIterState.init(shape, rng)
    ad.power_iteration(w.data.reshape(shape[0], -1), st, 20)
    wn = ad.spectral_normalize(w, st).data.reshape(shape[0], -1)
    assert 0.98 <= np.linalg.svd(wn, compute_uv=False)[0] <= 1.02


def test_spectral_norm_zero_matrix_warns(caplog):
    st = PowerIterState.init((2, 2), np.random.default_rng(0))
    with caplog.at_level(logging.WARNING):
        out = ad.spectral_normalize(Tensor(np.zeros((2, 2))), st)
    assert not np.any(out.data)
    assert "zero weight" in caplog.text


def test_spectral_norm_update_flag():
    rng = np.random.default_rng(10)
    w = Tensor(rng.standard_normal((4, 3)))
    st = PowerIterState.init((4, 3), rng)
    u0 = st.u.copy()
    ad.spectral_normalize(w, st, update=False)
    np.testing.assert_array_equal(st.u, u0)
    ad.spectral_normalize(w, st, update=True)
    assert not np.array_equal(st.u, u0)


# ---------------------------------------------------------------------------
# optimiser


def test_adam_zero_gradient_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    ad.adam_step(p, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step():
    # bias-corrected first step: m_hat = g, v_hat = g^2 -> delta = -lr * g / (|g| + eps)
    p = {"w": Tensor(np.array([0.5]), requires_grad=True)}
    ad.adam_step(p, {"w": np.array([1.0])}, AdamState(lr=5e-5))
    np.testing.assert_allclose(p["w"].data, [0.5 - 5e-5 / (1 + 1e-8)], rtol=1e-12)


def test_adam_nan_gradient_names_tensor():
    p = {"layer.w": Tensor(np.ones(2), requires_grad=True)}
    with pytest.raises(NonFiniteError, match="layer.w"):
        ad.adam_step(p, {"layer.w": np.array([np.nan, 0.0])}, AdamState())


def test_adam_converges_on_quadratic_bowl():
    target = np.array([1.5, -0.5, 2.0])
    p = {"x": Tensor(np.zeros(3), requires_grad=True)}
    st = AdamState(lr=0.05)
    for _ in range(2000):
        ad.adam_step(p, {"x": 2 * (p["x"].data - target)}, st)
    np.testing.assert_allclose(p["x"].data, target, atol=1e-3)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    total = ad.clip_grad_norm([a], 1.0)
    assert total == pytest.approx(5.0)
    assert ad.grad_norm([a]) == pytest.approx(1.0)
