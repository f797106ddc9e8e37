import numpy as np
import pytest

import bonesup.tensor as T
from bonesup.errors import DimensionError, NumericError, UsageError
from bonesup.tensor import (
    Tensor,
    backward,
    clamp,
    concat,
    conv2d,
    conv_transpose2d,
    elementwise,
    grad_check,
    leaky_relu,
    log,
    log_sigmoid,
    no_grad,
    normalize,
    reduce,
    sigmoid,
    tanh,
)

SEEDS = range(10)


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, shape).astype(np.float32)


def _weighted_sum(y, w):
    # random projection so no gradient component is trivially constant
    return (y * Tensor(w)).sum()


# -- hand examples -----------------------------------------------------------

def test_elementwise_examples():
    np.testing.assert_array_equal(elementwise("add", Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])
    np.testing.assert_array_equal(elementwise("tanh", Tensor([0.0])).data, [0.0])
    np.testing.assert_allclose(elementwise("leaky_relu", Tensor([-2.0]), slope=0.2).data, [-0.4], rtol=1e-6)


def test_scalar_broadcast_only():
    out = Tensor([1.0, 2.0]) * 3.0
    np.testing.assert_array_equal(out.data, [3.0, 6.0])
    with pytest.raises(DimensionError):
        Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))


def test_leaky_slope_bounds():
    for slope in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            leaky_relu(Tensor([1.0]), slope)


def test_log_clamps_and_rejects():
    assert np.isfinite(log(Tensor([0.0])).data).all()
    np.testing.assert_allclose(log(Tensor([0.0])).data, [np.log(np.float32(1e-12))], rtol=1e-6)
    with pytest.raises(NumericError):
        log(Tensor([-1.0]))


def test_log_sigmoid_is_stable():
    x = Tensor([-200.0, 0.0, 200.0])
    y = log_sigmoid(x).data
    assert np.isfinite(y).all()
    np.testing.assert_allclose(y, [-200.0, -np.log(2.0), 0.0], atol=1e-6)


def test_conv2d_examples():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor([[[[2.0]]]]))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))
    x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    k = Tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
    np.testing.assert_array_equal(conv2d(x, k).data, [[[[5.0]]]])


def test_conv_transpose_example():
    out = conv_transpose2d(Tensor([[[[1.0]]]]), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))


def test_conv_shape_errors():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(DimensionError):
        conv_transpose2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 2, 2))), stride=1, padding=1)
    with pytest.raises(DimensionError):
        conv_transpose2d(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))


@pytest.mark.parametrize("h,k,s,p", [(5, 3, 1, 0), (6, 4, 2, 1), (7, 3, 2, 1), (8, 4, 2, 1), (9, 3, 3, 2), (4, 2, 2, 0)])
def test_conv_shape_laws(h, k, s, p):
    x = Tensor(np.ones((2, 3, h, h)))
    y = conv2d(x, Tensor(np.ones((5, 3, k, k))), stride=s, padding=p)
    assert y.shape == (2, 5, (h + 2 * p - k) // s + 1, (h + 2 * p - k) // s + 1)
    z = conv_transpose2d(y, Tensor(np.ones((5, 3, k, k))), stride=s, padding=p)
    assert z.shape[2] == (y.shape[2] - 1) * s - 2 * p + k


def test_normalize_examples():
    x = Tensor(np.full((2, 3, 4, 4), 7.0))
    out = normalize(x, "batch", np.ones(3), np.zeros(3))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)
    rng = np.random.default_rng(0)
    y = normalize(Tensor(_rand(rng, 2, 3, 5, 5, lo=-3, hi=5)), "instance", np.ones(3), np.zeros(3)).data
    assert np.abs(y.mean(axis=(2, 3))).max() < 1e-5
    assert np.abs(y.var(axis=(2, 3)) - 1.0).max() < 1e-3


def test_reduce_examples():
    assert reduce(Tensor([1.0, 2.0, 3.0, 4.0]), "mean").item() == 2.5
    x = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(reduce(x, "sum", axes=[]).data, x.data)
    with pytest.raises(DimensionError):
        reduce(x, "sum", axes=(2,))
    x = Tensor(np.ones(4), requires_grad=True)
    backward(x.mean())
    np.testing.assert_allclose(x.grad, 0.25)


def test_backward_examples():
    x = Tensor(3.0, requires_grad=True)
    backward(x * x)
    assert x.grad == pytest.approx(6.0)
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = Tensor([[5.0, 6.0], [7.0, 8.0]], requires_grad=True)
    backward((a * b).sum())
    np.testing.assert_array_equal(a.grad, b.data)
    np.testing.assert_array_equal(b.grad, a.data)


def test_backward_non_scalar_root():
    with pytest.raises(UsageError):
        backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)


def test_backward_accumulates_unless_told_not_to():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward((x * 3.0).sum())
    backward((x * 3.0).sum())
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    backward((x * 3.0).sum(), accumulate=False)
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_gradients_sum():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    backward(y + y * x)  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad == pytest.approx(16.0)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_raises():
    with pytest.raises(NumericError):
        Tensor([3e38]) * 10.0


def test_deep_graph_no_recursion_limit():
    x = Tensor(1.0, requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    backward(y)
    assert x.grad == pytest.approx(1.0)


# -- adjointness -------------------------------------------------------------

@pytest.mark.parametrize("stride", [1, 2, 3])
@pytest.mark.parametrize("padding", [0, 1, 2])
@pytest.mark.parametrize("k", [2, 3, 4])
def test_conv_adjoint(stride, padding, k):
    rng = np.random.default_rng(100 * stride + 10 * padding + k)
    h_out = 4
    h_in = (h_out - 1) * stride - 2 * padding + k
    if h_in < 1:
        pytest.skip("no legal input size")
    x = _rand(rng, 2, 3, h_in, h_in)
    w = _rand(rng, 4, 3, k, k)
    y = _rand(rng, 2, 4, h_out, h_out)
    cx = conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
    assert cx.shape == y.shape
    ty = conv_transpose2d(Tensor(y), Tensor(w), stride=stride, padding=padding).data
    assert ty.shape == x.shape
    lhs = float(np.sum(cx.astype(np.float64) * y))
    rhs = float(np.sum(x.astype(np.float64) * ty))
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))


def test_conv_adjoint_small_example():
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = _rand(rng, 1, 1, 4, 4)
        w = _rand(rng, 1, 1, 3, 3)
        y = _rand(rng, 1, 1, 2, 2)
        lhs = np.sum(conv2d(Tensor(x), Tensor(w)).data * y)
        rhs = np.sum(x * conv_transpose2d(Tensor(y), Tensor(w)).data)
        assert abs(lhs - rhs) < 1e-4


# -- gradient checks -----------------------------------------------------------

UNARY = {
    "neg": lambda x: -x,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid,
    "leaky_relu": lambda x: leaky_relu(x, 0.2),
    "relu": lambda x: x.relu(),
    "abs": lambda x: x.abs(),
    "clamp": lambda x: clamp(x, -0.5, 0.5),
    "log": lambda x: log(x * x + 0.5),
    "sum_axis": lambda x: x.sum(axes=1, keepdims=True),
    "mean_axis": lambda x: x.mean(axes=0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_grad_unary(name, seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 3, 4, lo=-2, hi=2)
    out_shape = UNARY[name](Tensor(x)).shape
    w = _rand(rng, *out_shape)
    report = grad_check(lambda t: _weighted_sum(UNARY[name](t), w), Tensor(x))
    assert report.passed, f"{name}: {report}"


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
@pytest.mark.parametrize("seed", SEEDS)
def test_grad_binary(op, seed):
    rng = np.random.default_rng(seed)
    a, b, w = (_rand(rng, 2, 5) for _ in range(3))
    report = grad_check(lambda x, y: _weighted_sum(elementwise(op, x, y), w), [Tensor(a), Tensor(b)])
    assert report.passed, str(report)
    # scalar operand
    report = grad_check(lambda x, y: _weighted_sum(elementwise(op, x, y), w), [Tensor(a), Tensor(0.7)])
    assert report.passed, str(report)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_grad_conv2d(seed, stride, padding):
    rng = np.random.default_rng(seed)
    x, k, b = _rand(rng, 2, 2, 6, 6), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
    out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride, padding)
    w = _rand(rng, *out.shape)
    report = grad_check(lambda *t: _weighted_sum(conv2d(*t, stride=stride, padding=padding), w),
                        [Tensor(x), Tensor(k), Tensor(b)])
    assert report.passed, str(report)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_sum_conv2d(seed):
    rng = np.random.default_rng(seed)
    x, k = _rand(rng, 1, 2, 5, 5), _rand(rng, 2, 2, 3, 3)
    assert grad_check(lambda a, b: conv2d(a, b).sum(), [Tensor(x), Tensor(k)]).passed


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (2, 0)])
def test_grad_conv_transpose2d(seed, stride, padding):
    rng = np.random.default_rng(seed)
    x, k, b = _rand(rng, 2, 3, 3, 3), _rand(rng, 3, 2, 4, 4), _rand(rng, 2)
    out = conv_transpose2d(Tensor(x), Tensor(k), Tensor(b), stride, padding)
    w = _rand(rng, *out.shape)
    report = grad_check(lambda *t: _weighted_sum(conv_transpose2d(*t, stride=stride, padding=padding), w),
                        [Tensor(x), Tensor(k), Tensor(b)])
    assert report.passed, str(report)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", ["batch", "instance"])
def test_grad_normalize(seed, mode):
    rng = np.random.default_rng(seed)
    x, g, b = _rand(rng, 2, 3, 4, 4, lo=-2, hi=2), _rand(rng, 3, lo=0.5, hi=1.5), _rand(rng, 3)
    w = _rand(rng, 2, 3, 4, 4)
    report = grad_check(lambda *t: _weighted_sum(normalize(t[0], mode, t[1], t[2]), w),
                        [Tensor(x), Tensor(g), Tensor(b)])
    assert report.passed, str(report)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_concat(seed):
    rng = np.random.default_rng(seed)
    a, b = _rand(rng, 1, 2, 3, 3), _rand(rng, 1, 1, 3, 3)
    w = _rand(rng, 1, 3, 3, 3)
    assert grad_check(lambda x, y: _weighted_sum(concat([x, y], axis=1), w), [Tensor(a), Tensor(b)]).passed


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_composite_tanh_conv(seed):
    rng = np.random.default_rng(seed)
    x, k = _rand(rng, 1, 1, 6, 6), _rand(rng, 2, 1, 3, 3)
    report = grad_check(lambda a, b: tanh(conv2d(a, b, stride=1, padding=1)).sum(), [Tensor(x), Tensor(k)])
    assert report.passed, str(report)


def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(0)
    w = _rand(rng, 4, 4)
    # dyadic step keeps x +- h exactly representable
    report = grad_check(lambda x: _weighted_sum(x * 2.0, w), Tensor(np.zeros((4, 4))), step=2.0**-10)
    assert report.max_rel_error < 1e-6


def test_grad_check_flags_corrupted_backward(monkeypatch):
    rng = np.random.default_rng(0)
    x = Tensor(_rand(rng, 3, 3))
    assert grad_check(lambda t: tanh(t).sum(), x).passed
    original = T._make

    def corrupt(data, op, parents, backward_fn):
        if op == "tanh":
            return original(data, op, parents, lambda g: tuple(1.5 * v for v in backward_fn(g)))
        return original(data, op, parents, backward_fn)

    monkeypatch.setattr(T, "_make", corrupt)
    report = grad_check(lambda t: tanh(t).sum(), x)
    assert not report.passed


def test_grad_check_non_scalar():
    with pytest.raises(UsageError):
        grad_check(lambda t: t * 2.0, Tensor([1.0, 2.0]))


def test_kinks_are_excluded_not_hidden():
    # relu at exactly 0 is a kink
    x = Tensor(np.array([0.0, 1.0, -1.0], dtype=np.float32))
    report = grad_check(lambda t: t.relu().sum(), x)
    assert report.passed and report.nondifferentiable == 1


def test_float64_elementwise_agreement(monkeypatch):
    # with 64-bit buffers the same rules agree with central differences per element
    monkeypatch.setattr(T, "DTYPE", np.float64)
    rng = np.random.default_rng(3)
    x, k = rng.uniform(-1, 1, (1, 2, 5, 5)), rng.uniform(-1, 1, (2, 2, 3, 3))
    g, b = rng.uniform(0.5, 1.5, 2), rng.uniform(-1, 1, 2)

    def f(x, k, g, b):
        y = normalize(conv2d(x, k, stride=1, padding=1), "instance", g, b)
        return (tanh(y) * sigmoid(y)).sum()

    xs = [Tensor(v, requires_grad=True) for v in (x, k, g, b)]
    assert xs[0].data.dtype == np.float64
    backward(f(*xs))
    h = 1e-6
    for t in xs:
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*xs).item()
            flat[i] = orig - h
            fm = f(*xs).item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = t.grad.reshape(-1)[i]
            assert abs(ana - num) <= 1e-6 * max(1.0, abs(num))


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(5)
        x = Tensor(_rand(rng, 2, 2, 8, 8), requires_grad=True)
        k = Tensor(_rand(rng, 3, 2, 4, 4), requires_grad=True)
        y = normalize(conv2d(x, k, stride=2, padding=1), "batch", np.ones(3), np.zeros(3))
        loss = tanh(y).mean()
        backward(loss)
        return loss.data.tobytes() + x.grad.tobytes() + k.grad.tobytes()

    assert run() == run()
