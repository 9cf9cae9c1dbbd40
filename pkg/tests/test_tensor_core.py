import numpy as np
import pytest

import tensor_core as tc
from errors import InvalidConfigError, NumericError, ShapeError
from tensor_core import Tape, Tensor


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return tc.sum_(tc.mul(out, weights))


# ============= backward =============

def test_square_gradient():
    x = Tensor([3.0], requires_grad=True)
    tc.backward(tc.mul(x, x))
    assert x.grad[0] == pytest.approx(6.0)


def test_relu_gradient_is_zero_on_negative_side():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    tc.backward(tc.sum_(tc.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0]


def test_backward_accumulates_across_calls():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    tc.backward(y)
    tc.backward(y)
    assert x.grad[0] == pytest.approx(12.0)


def test_chain_of_powers():
    x = Tensor([3.0], requires_grad=True, dtype=np.float64)
    y = x * x
    z = y * y
    t = z * z
    tc.backward(t)
    assert x.grad[0] == pytest.approx(8 * 3.0 ** 7)


def test_scalar_index_slice_backward():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    y = tc.slice_(x, (0, 1))
    assert y.item() == 1.0
    tc.backward(y)
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])


def test_row_slice_backward_scatters_into_row():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    tc.backward(tc.sum_(tc.slice_(x, 1)))
    np.testing.assert_array_equal(x.grad, [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        tc.backward(tc.mul(x, 2.0))


def test_tape_is_topologically_ordered():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = tc.sum_(tc.add(tc.mul(x, 2.0), x))
    tape = Tape.from_loss(loss)
    assert tape.nodes[-1] is loss
    assert tape.nodes.index(x) < len(tape) - 1
    for i, node in enumerate(tape.nodes):
        for parent in node._parents:
            assert tape.nodes.index(parent) < i


def test_no_grad_skips_graph():
    x = Tensor([1.0], requires_grad=True)
    with tc.no_grad():
        y = x * x
    assert not y.requires_grad
    assert y._parents == ()


def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        tc.add(Tensor([np.inf]), Tensor([1.0]))


def test_item_needs_single_element():
    assert Tensor([2.5]).item() == 2.5
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


# ============= 畳み込み =============

def test_conv1d_delta_kernel_is_identity():
    x = Tensor(np.arange(10, dtype=np.float64).reshape(1, 10))
    kernel = Tensor(np.array([[[0.0, 0.0, 1.0, 0.0, 0.0]]]))
    out = tc.conv1d(x, kernel, stride=1, padding=2)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv1d_small_example():
    out = tc.conv1d(Tensor([[1.0, 2.0, 3.0]]), Tensor([[[1.0, 1.0]]]))
    np.testing.assert_allclose(out.data, [[3.0, 5.0]])


def test_conv1d_stride_output_length():
    out = tc.conv1d(Tensor(np.zeros((1, 100))), Tensor(np.ones((1, 1, 5))), stride=2, padding=2)
    assert out.shape == (1, 50)


def test_conv1d_kernel_longer_than_input():
    with pytest.raises(ShapeError):
        tc.conv1d(Tensor(np.zeros((1, 3))), Tensor(np.ones((1, 1, 5))))


def test_conv1d_transpose_is_adjoint_of_conv1d():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c_in, c_out = (int(v) for v in rng.integers(1, 4, size=2))
        K = int(rng.integers(1, 6))
        stride = int(rng.integers(1, 4))
        padding = int(rng.integers(0, 3))
        L = int(rng.integers(K, K + 12))
        x = rng.normal(size=(c_in, L))
        kernel = rng.normal(size=(c_out, c_in, K))
        y_data = tc.conv1d(Tensor(x), Tensor(kernel), stride=stride, padding=padding).data
        y = rng.normal(size=y_data.shape)
        out_len = y_data.shape[1]
        extra = L - ((out_len - 1) * stride - 2 * padding + K)
        back = tc.conv1d_transpose(Tensor(y), Tensor(kernel), stride=stride, padding=padding,
                                   output_padding=extra)
        assert back.shape == (c_in, L)
        lhs = float((y_data * y).sum())
        rhs = float((x * back.data).sum())
        assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


def test_conv1d_transpose_output_length():
    out = tc.conv1d_transpose(Tensor(np.zeros((2, 50))), Tensor(np.ones((2, 1, 5))),
                              stride=2, padding=2, output_padding=1)
    assert out.shape == (1, 100)
    with pytest.raises(ShapeError):
        tc.conv1d_transpose(Tensor(np.zeros((2, 50))), Tensor(np.ones((2, 1, 5))),
                            stride=2, padding=2, output_padding=2)


def test_max_pool1d_floor():
    x = Tensor(np.array([[[1.0, 5.0, 2.0, 3.0, 9.0]]]))
    out = tc.max_pool1d(x, 2)
    np.testing.assert_array_equal(out.data, [[[5.0, 3.0]]])


# ============= softmax / 正規化 / 損失 =============

def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 6))
    out = tc.softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    shifted = tc.softmax(Tensor(x + 7.5)).data
    np.testing.assert_allclose(shifted, out, atol=1e-6)


def test_softmax_mask_gives_exact_zeros():
    x = Tensor(np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]))
    mask = np.array([[True, True, False], [False, False, False]])
    out = tc.softmax(x, mask).data
    assert out[0, 2] == 0.0
    assert out[0, :2].sum() == pytest.approx(1.0)
    assert np.all(out[1] == 0.0)


def test_layer_norm_statistics():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(3.0, 2.0, size=(5, 16)))
    out = tc.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_dropout_eval_is_identity():
    x = Tensor(np.ones((3, 4)))
    assert tc.dropout(x, 0.5, None, training=False) is x
    with pytest.raises(InvalidConfigError):
        tc.dropout(x, 0.5, None, training=True)


def test_masked_mse_example():
    pred = Tensor(np.array([[1.0], [1.0]]), requires_grad=True)
    loss = tc.masked_mse(pred, np.array([[0.0], [2.0]]), np.array([True, False]))
    assert loss.item() == pytest.approx(1.0)
    tc.backward(loss)
    assert pred.grad[0, 0] == pytest.approx(2.0)
    assert pred.grad[1, 0] == 0.0


def test_masked_mse_needs_a_selected_row():
    with pytest.raises(InvalidConfigError):
        tc.masked_mse(Tensor(np.ones((2, 3))), np.zeros((2, 3)), np.array([False, False]))


def test_cross_entropy_uniform_logits():
    loss = tc.cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 3]))
    assert loss.item() == pytest.approx(np.log(4.0), rel=1e-6)


# ============= 有限差分チェック =============

def test_grad_check_linear_function():
    w = np.array([1.5, -2.0, 0.75, 3.0, -1.25])
    x = Tensor(np.array([0.1, 0.2, -0.3, 0.4, 0.5]))
    assert tc.grad_check(lambda t: tc.sum_(tc.mul(t, w)), x) < 1e-10


def test_grad_check_elementwise_ops():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(3, 4)))
    weights = rng.normal(size=(3, 4))
    for op in (tc.sigmoid, tc.tanh, tc.relu):
        assert tc.grad_check(lambda t: _weighted(op(t), weights), x) < 1e-5


def test_grad_check_matmul_and_shapes():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 3, 4)))
    w = Tensor(rng.normal(size=(4, 5)), dtype=np.float64)
    weights = rng.normal(size=(3, 2, 5))

    def f(t):
        h = tc.matmul(t, w)
        h = tc.concat([tc.transpose(h, 0, 1), tc.slice_(tc.transpose(h, 0, 1), slice(0, 1))], axis=0)
        return _weighted(tc.reshape(h, (4, 2, 5))[:3], weights)
    assert tc.grad_check(f, x) < 1e-5


def test_grad_check_conv_layers():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 11))
    kernel = rng.normal(size=(4, 3, 5))
    bias = rng.normal(size=4)
    weights = rng.normal(size=(2, 4, 6))
    conv = lambda t: _weighted(tc.conv1d(t, Tensor(kernel), Tensor(bias), stride=2, padding=2), weights)
    assert tc.grad_check(conv, Tensor(x)) < 1e-5
    by_kernel = lambda k: _weighted(tc.conv1d(Tensor(x), k, stride=2, padding=2), weights)
    assert tc.grad_check(by_kernel, Tensor(kernel)) < 1e-5

    y = rng.normal(size=(2, 4, 6))
    t_kernel = rng.normal(size=(4, 3, 5))
    t_weights = rng.normal(size=(2, 3, 12))
    deconv = lambda t: _weighted(tc.conv1d_transpose(t, Tensor(t_kernel), stride=2, padding=2,
                                                     output_padding=1), t_weights)
    assert tc.grad_check(deconv, Tensor(y)) < 1e-5
    by_t_kernel = lambda k: _weighted(tc.conv1d_transpose(Tensor(y), k, stride=2, padding=2,
                                                          output_padding=1), t_weights)
    assert tc.grad_check(by_t_kernel, Tensor(t_kernel)) < 1e-5


def test_grad_check_max_pool():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(1, 2, 9)))
    weights = rng.normal(size=(1, 2, 4))
    assert tc.grad_check(lambda t: _weighted(tc.max_pool1d(t, 2), weights), x) < 1e-5


def test_grad_check_layer_norm_and_masked_softmax():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(3, 5)))
    scale = Tensor(rng.normal(size=5), dtype=np.float64)
    shift = Tensor(rng.normal(size=5), dtype=np.float64)
    weights = rng.normal(size=(3, 5))
    assert tc.grad_check(lambda t: _weighted(tc.layer_norm(t, scale, shift), weights), x) < 1e-5

    mask = np.array([[True, True, True, False, False],
                     [True, False, True, True, True],
                     [False, False, False, False, False]])
    target = rng.random(size=(3, 5))
    f = lambda t: tc.masked_mse(tc.softmax(t, mask), target, np.array([True, True, False]))
    assert tc.grad_check(f, x) < 1e-5


def test_grad_check_cross_entropy():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(4, 3)))
    labels = np.array([0, 2, 1, 2])
    assert tc.grad_check(lambda t: tc.cross_entropy(t, labels), x) < 1e-5
