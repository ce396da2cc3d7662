import numpy as np
import numpy.testing as npt
import pytest

from intertwined.utils.errors import (
    ConfigurationError,
    ContractViolationError,
    EmptyOutputError,
    GradientCheckError,
    KernelTooLongError,
    ShapeError,
)
from intertwined.utils.tensor import (
    SELU_LAMBDA,
    Graph,
    Tensor,
    activation,
    backward,
    concatenate,
    conv1d_valid,
    conv2d_valid,
    dropout_apply,
    finite_diff_check,
    flatten_space,
    global_average_pool,
    log_softmax,
    matmul,
    no_grad,
    reshape,
    tensor_sum,
    time_pool,
    transpose,
)


def weighted_sum(y, weights):
    return tensor_sum(y * Tensor(weights))


def test_matmul_values():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    npt.assert_array_equal(matmul(a, b).data, [[19, 22], [43, 50]])
    npt.assert_array_equal(matmul(Tensor(np.eye(2)), b).data, b.data)
    npt.assert_array_equal(matmul(Tensor(np.zeros((2, 2))), b).data, np.zeros((2, 2)))


def test_matmul_rejects_bad_extents():
    with pytest.raises(ShapeError, match="2 != 3"):
        matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_conv1d_valid_examples():
    signal = Tensor([1.0, 2.0, 3.0, 4.0])
    npt.assert_array_equal(conv1d_valid(signal, Tensor([1.0])).data, [1, 2, 3, 4])
    npt.assert_array_equal(conv1d_valid(signal, Tensor([1.0, 1.0])).data, [3, 5, 7])
    long_signal = Tensor(np.arange(200.0))
    assert conv1d_valid(long_signal, Tensor(np.ones(3))).shape == (198,)


def test_conv1d_kernel_bank_and_stride():
    out = conv1d_valid(Tensor(np.ones((5, 10))), Tensor(np.ones((4, 3))), stride=2)
    assert out.shape == (5, 4, 4)
    npt.assert_array_equal(out.data, np.full((5, 4, 4), 3.0))


def test_conv1d_kernel_too_long():
    with pytest.raises(KernelTooLongError):
        conv1d_valid(Tensor(np.ones(2)), Tensor(np.ones(3)))


def test_conv2d_valid_extent():
    out = conv2d_valid(Tensor(np.ones((2, 1, 5, 5))), Tensor(np.ones((3, 1, 2, 2))))
    assert out.shape == (2, 3, 4, 4)
    npt.assert_array_equal(out.data, np.full((2, 3, 4, 4), 4.0))
    strided = conv2d_valid(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), stride=2)
    assert strided.shape == (1, 1, 2, 2)


def test_activation_values():
    npt.assert_array_equal(activation(Tensor([-2.0, 3.0]), "relu").data, [0.0, 3.0])
    npt.assert_allclose(activation(Tensor([0.0, 0.0]), "softmax").data, [0.5, 0.5])
    npt.assert_allclose(activation(Tensor([-1.0]), "elu").data, [np.exp(-1.0) - 1.0], rtol=1e-12)
    npt.assert_allclose(activation(Tensor([1.0]), "selu").data, [SELU_LAMBDA], rtol=1e-12)
    assert SELU_LAMBDA == pytest.approx(1.050701, abs=1e-6)


def test_activation_unknown_kind():
    with pytest.raises(ConfigurationError):
        activation(Tensor([1.0]), "swish")


def test_softmax_along_axis_sums_to_one(rng):
    out = activation(Tensor(rng.normal(size=(3, 6))), "softmax", axis=-1)
    npt.assert_allclose(out.data.sum(axis=-1), np.ones(3), atol=1e-12)


def test_time_pool_examples():
    x = Tensor([1.0, 3.0, 2.0, 5.0])
    npt.assert_array_equal(time_pool(x, 2, "max").data, [3.0, 5.0])
    npt.assert_array_equal(time_pool(x, 2, "average").data, [2.0, 3.5])
    npt.assert_array_equal(time_pool(x, 1, "max").data, x.data)
    npt.assert_array_equal(time_pool(x, 1, "average").data, x.data)


def test_time_pool_drops_remainder_and_rejects_empty():
    assert time_pool(Tensor(np.ones(7)), 2).shape == (3,)
    with pytest.raises(EmptyOutputError):
        time_pool(Tensor(np.ones(3)), 4)


def test_flatten_space():
    x = Tensor(np.arange(16 * 16 * 99, dtype=float).reshape(16, 16, 99))
    flat = flatten_space(x)
    assert flat.shape == (256, 99)
    npt.assert_array_equal(flat.data.reshape(16, 16, 99), x.data)
    assert flatten_space(Tensor(np.ones((1, 1, 7)))).shape == (1, 7)
    with pytest.raises(ShapeError):
        flatten_space(Tensor(np.ones((3, 4))))


def test_global_average_pool():
    npt.assert_array_equal(global_average_pool(Tensor(np.full((4, 6), 2.5))).data, np.full(4, 2.5))
    npt.assert_array_equal(global_average_pool(Tensor([[1.0, 2.0, 3.0]])).data, [2.0])
    npt.assert_array_equal(global_average_pool(Tensor([[4.0], [5.0]])).data, [4.0, 5.0])


def test_dropout_identity_cases(rng):
    x = Tensor(rng.normal(size=(5, 5)))
    assert dropout_apply(x, 0.5, training=False, rng=rng) is x
    assert dropout_apply(x, 0.0, training=True, rng=rng) is x
    with pytest.raises(ContractViolationError):
        dropout_apply(x, 0.5, training=True, rng=None)


def test_dropout_rate_statistics():
    rng = np.random.default_rng(7)
    x = Tensor(np.ones((1000, 1000)))
    out = dropout_apply(x, 0.1, training=True, rng=rng).data
    assert abs(np.mean(out == 0.0) - 0.1) <= 0.002
    assert abs(out.mean() - 1.0) <= 0.01


def test_backward_linear_and_square():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Graph() as graph:
        backward(tensor_sum(w), graph)
    npt.assert_array_equal(w.grad, [1.0, 1.0])

    w.zero_grad()
    with Graph() as graph:
        backward(tensor_sum(w * w), graph)
    npt.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_accumulates(rng):
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 4)))
    with Graph() as graph:
        loss = tensor_sum(activation(matmul(w, x), "tanh"))
        backward(loss, graph)
        first = w.grad.copy()
        backward(loss, graph)
    npt.assert_array_equal(w.grad, 2.0 * first)


def test_backward_needs_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Graph() as graph:
        doubled = w * 2.0
        with pytest.raises(ContractViolationError):
            backward(doubled, graph)


def test_no_grad_records_nothing():
    w = Tensor([1.0], requires_grad=True)
    with Graph() as graph:
        with no_grad():
            w * 3.0
        assert len(graph) == 0
        w * 3.0
        assert len(graph) == 1


def test_finite_diff_exact_for_linear(rng):
    w = Tensor(rng.normal(size=5), requires_grad=True, name="w")
    assert finite_diff_check(lambda: tensor_sum(w), [w]) < 1e-9


def test_finite_diff_selu_dense_away_from_kink(rng):
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="w")
    x = Tensor(rng.normal(size=(3, 6)))
    weights = rng.normal(size=(4, 6))

    def loss():
        return weighted_sum(activation(matmul(w, x), "selu"), weights)

    assert finite_diff_check(loss, [w], floor=1e-3) < 1e-6


@pytest.mark.parametrize("kind", ["relu", "elu", "selu", "sigmoid", "tanh", "softmax"])
def test_activation_gradients(kind, rng):
    x = Tensor(rng.normal(size=(3, 5)) + 0.05, requires_grad=True, name="x")
    weights = rng.normal(size=(3, 5))
    error = finite_diff_check(lambda: weighted_sum(activation(x, kind, axis=-1), weights), [x], floor=1e-5)
    assert error < 1e-4


def test_shape_op_gradients(rng):
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True, name="a")
    b = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True, name="b")
    weights = rng.normal(size=(3, 2, 6))

    def loss():
        merged = concatenate([a, b], axis=-1)
        moved = transpose(merged, (1, 0, 2))
        return weighted_sum(reshape(moved, (3, 2, 6)), weights) + tensor_sum(a[:, 1:, ::2] * 0.5)

    assert finite_diff_check(loss, [a, b], floor=1e-5) < 1e-4


def test_signal_op_gradients(rng):
    x = Tensor(rng.normal(size=(2, 3, 12)), requires_grad=True, name="x")
    bank = Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="bank")
    image = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True, name="image")
    kernel = Tensor(rng.normal(size=(3, 2, 2, 2)), requires_grad=True, name="kernel")
    w1 = rng.normal(size=(2, 3, 4, 5))
    w2 = rng.normal(size=(2, 3, 2, 2))

    def loss():
        pooled = time_pool(conv1d_valid(x, bank, stride=2), 1, "average")
        mesh = conv2d_valid(image, kernel, stride=2)
        return weighted_sum(pooled, w1) + weighted_sum(mesh, w2)

    assert finite_diff_check(loss, [x, bank, image, kernel], floor=1e-5) < 1e-4


@pytest.mark.parametrize("kind", ["max", "average"])
def test_pool_gradients(kind, rng):
    x = Tensor(rng.normal(size=(3, 11)), requires_grad=True, name="x")
    weights = rng.normal(size=(3, 3))
    error = finite_diff_check(lambda: weighted_sum(time_pool(x, 3, kind), weights), [x], floor=1e-5)
    assert error < 1e-4


def test_log_softmax_gradient(rng):
    x = Tensor(rng.normal(size=(2, 6)), requires_grad=True, name="x")
    weights = rng.normal(size=(2, 6))
    npt.assert_allclose(np.exp(log_softmax(x).data).sum(axis=-1), [1.0, 1.0], atol=1e-12)
    assert finite_diff_check(lambda: weighted_sum(log_softmax(x), weights), [x], floor=1e-5) < 1e-4


def test_finite_diff_reports_non_finite():
    w = Tensor([1e-12], requires_grad=True, name="w")

    def loss():
        with np.errstate(invalid="ignore"):
            return tensor_sum(Tensor(np.log(w.data)) * 0.0 + w)

    with pytest.raises(GradientCheckError) as info:
        finite_diff_check(loss, [w], epsilon=1e-3)
    assert info.value.parameter == "w"


def test_item_requires_single_element():
    assert Tensor([3.0]).item() == 3.0
    with pytest.raises(ContractViolationError):
        Tensor([1.0, 2.0]).item()


def test_conv1d_length_formula():
    for size in range(1, 65):
        signal = Tensor(np.ones(size))
        for k in range(1, size + 1):
            for stride in (1, 2):
                assert conv1d_valid(signal, Tensor(np.ones(k)), stride=stride).shape == ((size - k) // stride + 1,)


def test_softmax_is_shift_invariant(rng):
    logits = rng.normal(size=(4, 6))
    probs = activation(Tensor(logits), "softmax", axis=-1).data
    shifted = activation(Tensor(logits + 7.5), "softmax", axis=-1).data
    assert np.all((probs > 0.0) & (probs < 1.0))
    npt.assert_allclose(shifted, probs, atol=1e-9)


def test_max_pool_dominates_average_pool(rng):
    x = Tensor(rng.normal(size=(5, 23)))
    for window in (1, 2, 3, 4):
        assert np.all(time_pool(x, window, "max").data >= time_pool(x, window, "average").data - 1e-15)
