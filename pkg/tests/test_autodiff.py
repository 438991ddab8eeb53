import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddmikit import _kernels as K
from ddmikit.autodiff import (
    BackwardError,
    BroadcastError,
    Tensor,
    add,
    grad_check,
    matmul,
    mul,
    no_grad,
    tsum,
)
from ddmikit.autodiff import functional as F
from ddmikit.autodiff.tensor import broadcast_shape

TOL = 1e-4


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- elementwise ------------------------------------------------------------

def test_add_values():
    np.testing.assert_array_equal(add(t64([1, 2]), t64([3, 4])).data, [4, 6])


def test_mul_by_ones_passes_gradient_through():
    x = t64([[1.5, -2.0], [0.25, 3.0]], grad=True)
    y = mul(x, np.ones(2))
    np.testing.assert_array_equal(y.data, x.data)
    tsum(y).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_square_derivative():
    x = t64([3.0], grad=True)
    tsum(x * x).backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_broadcast_error_names_both_shapes():
    with pytest.raises(BroadcastError, match=r"\(2, 3\).*\(4,\)"):
        add(t64(np.ones((2, 3))), t64(np.ones(4)))


def test_fan_out_accumulates():
    x = t64([0.5, -1.0, 2.0], grad=True)
    tsum(x * x + x).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_second_backward_raises():
    x = t64([1.0, 2.0], grad=True)
    y = tsum(x * x)
    y.backward()
    with pytest.raises(BackwardError):
        y.backward()


def test_grad_dtype_and_shape_follow_tensor():
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    tsum(x * 2.0).backward()
    assert x.grad.shape == x.shape and x.grad.dtype == x.dtype


def test_no_grad_records_nothing():
    x = t64([1.0], grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad


shapes = st.lists(st.integers(1, 3), min_size=0, max_size=3).map(tuple)


@given(shapes, shapes, shapes)
def test_broadcast_shape_is_associative(a, b, c):
    def bs(x, y):
        try:
            return broadcast_shape(x, y)
        except BroadcastError:
            return None

    ab = bs(a, b)
    bc = bs(b, c)
    left = bs(ab, c) if ab is not None else None
    right = bs(a, bc) if bc is not None else None
    if left is not None and right is not None:
        assert left == right
        xa, xb, xc = (Tensor(np.zeros(s)) for s in (a, b, c))
        assert add(xa, add(xb, xc)).shape == add(add(xa, xb), xc).shape


UNARY = {
    "exp": lambda x: x.exp(),
    "log": lambda x: (x * x + 1.0).log(),
    "sqrt": lambda x: (x * x + 0.5).sqrt(),
    "relu": F.relu,
    "sigmoid": F.sigmoid,
    "silu": F.silu,
    "gelu": F.gelu,
    "tanh": F.tanh,
    "softplus": F.softplus,
    "pow3": lambda x: x**3,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=10, deadline=None)
@given(shape=st.lists(st.integers(1, 4), min_size=1, max_size=3), seed=st.integers(0, 2**16))
def test_unary_gradients(name, shape, seed):
    x = np.random.default_rng(seed).uniform(-2, 2, size=shape)
    if name == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)  # stay away from the kink
    w = np.random.default_rng(seed + 1).standard_normal(shape)
    assert grad_check(lambda t: tsum(UNARY[name](t) * w), x) < TOL


BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**16), bshape=st.sampled_from([(3, 4), (4,), (1, 4), (3, 1), ()]))
def test_binary_gradients_with_broadcasting(name, seed, bshape):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal(bshape)
    op = BINARY[name]
    assert grad_check(lambda t: tsum(op(t, t64(b)) ** 2), a) < TOL
    assert grad_check(lambda t: tsum(op(t64(a), t) ** 2), b) < TOL


def test_reductions_and_reshapes_gradients(rng):
    x = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((4, 3, 2))
    assert grad_check(lambda t: tsum(t.transpose((2, 1, 0)) * w), x) < TOL
    assert grad_check(lambda t: tsum(t.mean(axis=1) ** 2), x) < TOL
    assert grad_check(lambda t: tsum(tsum(t, axis=(0, 2), keepdims=True) ** 2), x) < TOL
    assert grad_check(lambda t: tsum(t.reshape((6, 4))[1:4, ::2] ** 2), x) < TOL
    assert grad_check(lambda t: tsum(t[np.array([0, 1, 1]), 2] ** 2), x) < TOL


# -- matmul -----------------------------------------------------------------

def test_matmul_identity(rng):
    m = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(matmul(t64(np.eye(3)), t64(m)).data, m)


def test_matmul_small():
    np.testing.assert_array_equal(matmul(t64([[1, 2]]), t64([[3], [4]])).data, [[11]])


def test_matmul_gradients(rng):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    w = rng.standard_normal((4, 3))
    assert grad_check(lambda t: tsum(matmul(t, t64(b)) * w), a) < TOL
    assert grad_check(lambda t: tsum(matmul(t64(a), t) * w), b) < TOL


def test_matmul_inner_mismatch():
    with pytest.raises(ValueError, match="inner"):
        matmul(t64(np.ones((2, 3))), t64(np.ones((4, 2))))


# -- convolution and resampling -------------------------------------------

def test_pointwise_unit_kernel_is_identity(rng):
    x = rng.standard_normal((2, 1, 5, 6))
    y = F.conv2d(t64(x), t64(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(y.data, x)


def test_delta_kernel_shifts(rng):
    x = rng.standard_normal((1, 1, 5, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 2] = 1.0  # picks the right-hand neighbour
    y = F.conv2d(t64(x), t64(k), padding=1).data
    np.testing.assert_array_equal(y[0, 0, :, :-1], x[0, 0, :, 1:])
    np.testing.assert_array_equal(y[0, 0, :, -1], 0.0)


def test_conv2d_gradients(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    w = rng.standard_normal((1, 3, 5, 5))
    assert grad_check(lambda t: tsum(F.conv2d(t, t64(k), t64(b), padding=1) * w), x) < TOL
    assert grad_check(lambda t: tsum(F.conv2d(t64(x), t, t64(b), padding=1) * w), k) < TOL
    assert grad_check(lambda t: tsum(F.conv2d(t64(x), t64(k), t, padding=1) * w), b) < TOL
    w2 = rng.standard_normal((1, 3, 2, 2))
    assert grad_check(lambda t: tsum(F.conv2d(t, t64(k), stride=2) * w2), x) < TOL


def test_conv2d_rejects_bad_extents():
    with pytest.raises(ValueError, match="non-integral"):
        F.conv2d(t64(np.ones((1, 1, 6, 6))), t64(np.ones((1, 1, 3, 3))), stride=2, padding=1)
    with pytest.raises(ValueError, match="exceeds"):
        F.conv2d(t64(np.ones((1, 1, 2, 2))), t64(np.ones((1, 1, 3, 3))))


def test_conv_transpose_is_adjoint_of_conv(rng):
    x = rng.standard_normal((2, 3, 7, 7))
    k = rng.standard_normal((4, 3, 3, 3))
    y = rng.standard_normal((2, 4, 3, 3))
    lhs = np.vdot(F.conv2d(t64(x), t64(k), stride=2).data, y)
    rhs = np.vdot(x, F.conv_transpose2d(t64(y), t64(k), stride=2).data)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10)


def test_conv_transpose_gradients(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    k = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((1, 3, 6, 6))
    assert grad_check(lambda t: tsum(F.conv_transpose2d(t, t64(k), stride=2, padding=1) * w), x) < TOL
    assert grad_check(lambda t: tsum(F.conv_transpose2d(t64(x), t, stride=2, padding=1) * w), k) < TOL


def test_avgpool_of_constant():
    y = F.avgpool2x(t64(np.full((1, 2, 4, 6), 2.5)))
    np.testing.assert_array_equal(y.data, np.full((1, 2, 2, 3), 2.5))


def test_nearest_then_pool_is_identity(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(F.avgpool2x(F.resize_nearest2x(t64(x))).data, x, atol=1e-15)


def test_pool_and_resize_gradients(rng):
    x = rng.standard_normal((1, 2, 4, 6))
    v = rng.standard_normal((1, 2, 2, 3))
    assert grad_check(lambda t: tsum(F.avgpool2x(t) * v), x) < TOL
    w = rng.standard_normal((1, 2, 8, 12))
    assert grad_check(lambda t: tsum(F.resize_nearest2x(t) * w), x) < TOL


def test_avgpool_backward_spreads_a_quarter():
    x = t64(np.zeros((1, 1, 2, 2)), grad=True)
    tsum(F.avgpool2x(x)).backward()
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 0.25))


def test_avgpool_rejects_odd_extent():
    with pytest.raises(ValueError, match="even"):
        F.avgpool2x(t64(np.ones((1, 1, 3, 4))))


# -- nonlinearities and normalization ---------------------------------------

def test_sigmoid_at_zero():
    assert F.sigmoid(t64([0.0])).data[0] == 0.5


def test_nonlinear_dispatch():
    x = t64([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(F.nonlinear("relu", x).data, [0.0, 0.0, 2.0])
    with pytest.raises(ValueError):
        F.nonlinear("swish-ish", x)


def test_groupnorm_statistics(rng):
    x = rng.standard_normal((3, 8, 5, 5)) * 4 + 2
    y = F.group_norm(t64(x), 4).data.reshape(3, 4, -1)
    np.testing.assert_allclose(y.mean(axis=2), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=2), 1, atol=1e-5)


def test_groupnorm_of_normalized_input(rng):
    x = rng.standard_normal((2, 4, 6, 6))
    x = (x - x.mean(axis=(2, 3), keepdims=True)) / x.std(axis=(2, 3), keepdims=True)
    y = F.group_norm(t64(x), 4, t64(np.ones(4)), t64(np.zeros(4)))
    np.testing.assert_allclose(y.data, x, atol=1e-5)


def test_groupnorm_gradients(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    g, b = rng.standard_normal(4), rng.standard_normal(4)
    w = rng.standard_normal((2, 4, 3, 3))
    assert grad_check(lambda t: tsum(F.group_norm(t, 2, t64(g), t64(b)) * w), x) < TOL
    assert grad_check(lambda t: tsum(F.group_norm(t64(x), 2, t, t64(b)) * w), g) < TOL
    assert grad_check(lambda t: tsum(F.group_norm(t64(x), 2, t64(g), t) * w), b) < TOL


def test_groupnorm_rejects_indivisible_groups():
    with pytest.raises(ValueError, match="divide"):
        F.group_norm(t64(np.ones((1, 6, 2, 2))), 4)


# -- grad_check itself ------------------------------------------------------

def test_grad_check_of_sum(rng):
    assert grad_check(lambda t: tsum(t), rng.standard_normal(7)) < 1e-8


def test_grad_check_of_cubes():
    x = t64([1.0, 2.0], grad=True)
    tsum(x**3).backward()
    np.testing.assert_allclose(x.grad, [3.0, 12.0])
    assert grad_check(lambda t: tsum(t**3), [1.0, 2.0]) < TOL


def test_forward_is_bitwise_deterministic(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

    def run():
        return F.silu(F.group_norm(F.conv2d(Tensor(x), Tensor(k), padding=1), 2)).data

    assert run().tobytes() == run().tobytes()


# -- kernel backends ----------------------------------------------------------

@pytest.mark.skipif(not K.HAS_NUMBA, reason="numba unavailable")
def test_numba_and_numpy_kernels_agree(rng):
    x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
    for stride, ho in ((1, 7), (2, 4)):
        cols = K.im2col_numpy(x, 3, 3, stride, ho, ho)
        back_nb = K._col2im_nb(cols, np.zeros_like(x), 3, 3, stride, ho, ho)
        np.testing.assert_allclose(back_nb, K.col2im_numpy(cols, x.shape, 3, 3, stride, ho, ho), rtol=1e-6)
    nodes = rng.standard_normal((50, 5)).astype(np.float32)
    idx = rng.integers(0, 50, (30, 4))
    w = rng.random((30, 4)).astype(np.float32)
    np.testing.assert_allclose(K._gather4_nb(nodes, idx, w), K.gather4_numpy(nodes, idx, w), rtol=1e-6)
    g = rng.standard_normal((30, 5)).astype(np.float32)
    np.testing.assert_allclose(K._scatter4_nb(g, idx, w, np.zeros((50, 5), np.float32)),
                               K.scatter4_numpy(g, idx, w, 50), rtol=1e-5, atol=1e-6)
    act = rng.standard_normal((3, 7)).astype(np.float32)
    _, sig = K.silu_forward(act)
    up = rng.standard_normal(act.shape).astype(np.float32)
    np.testing.assert_allclose(K._silu_backward_nb(up, act, sig), K.silu_backward_numpy(up, act, sig), rtol=1e-5)


@pytest.mark.parametrize("lead", [(5,), (2, 3)])
def test_linear_gradients(rng, lead):
    x = rng.standard_normal(lead + (4,))
    w = rng.standard_normal((3, 4))
    b = rng.standard_normal(3)
    up = rng.standard_normal(lead + (3,))
    np.testing.assert_allclose(F.linear(Tensor(x), Tensor(w), Tensor(b)).data, x @ w.T + b)
    assert grad_check(lambda t: tsum(F.linear(t, Tensor(w), Tensor(b)) * up), x) < 1e-4
    assert grad_check(lambda t: tsum(F.linear(Tensor(x), t, Tensor(b)) * up), w) < 1e-4
    assert grad_check(lambda t: tsum(F.linear(Tensor(x), Tensor(w), t) * up), b) < 1e-4
    with pytest.raises(ValueError):
        F.linear(Tensor(x), Tensor(w.T))
