import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtlnet import tensor as T
from mtlnet.tensor import ConvSpec, Tensor

from oracles import conv2d_ref, deconv2d_ref, maxpool2d_ref


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# --------------------------------------------------------------------------
# conv2d


def test_conv_identity_kernel():
    x = t(np.arange(1, 10).reshape(1, 1, 3, 3))
    out = T.conv2d(x, t(np.ones((1, 1, 1, 1))), None, ConvSpec(1, 1, (1, 1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_zero_kernel(rng):
    x = t(rng.standard_normal((2, 3, 5, 5)))
    out = T.conv2d(x, t(np.zeros((4, 3, 3, 3))), None, ConvSpec(3, 4, (3, 3), padding=(1, 1)))
    assert out.shape == (2, 4, 5, 5)
    assert not out.data.any()


def test_conv_diagonal_kernel_example():
    x = t(np.arange(1, 10).reshape(1, 1, 3, 3))
    w = t([[[[1, 0], [0, 1]]]])
    out = T.conv2d(x, w, None, ConvSpec(1, 1, (2, 2)))
    np.testing.assert_array_equal(out.data[0, 0], [[6, 8], [12, 14]])


@pytest.mark.parametrize("seed", range(8))
def test_conv_matches_nested_loops(seed):
    r = np.random.Generator(np.random.PCG64(seed))
    n, c, o = r.integers(1, 4), r.integers(1, 6), r.integers(1, 5)
    k = int(r.choice([1, 3, 5]))
    s, p = int(r.integers(1, 3)), int(r.integers(0, k // 2 + 1))
    h, w = int(r.integers(k, 10)), int(r.integers(k, 10))
    x, wt, b = r.standard_normal((n, c, h, w)), r.standard_normal((o, c, k, k)), r.standard_normal(o)
    out = T.conv2d(t(x), t(wt), t(b), ConvSpec(int(c), int(o), (k, k), (s, s), (p, p), True))
    ref = conv2d_ref(x, wt, b, (s, s), (p, p))
    assert np.max(np.abs(out.data - ref) / (np.abs(ref) + 1e-12)) < 1e-10


def test_conv_f32_close_to_reference(rng):
    x, w = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, 3, 3))
    out = T.conv2d(Tensor(x.astype(np.float32)), Tensor(w.astype(np.float32)), None,
                   ConvSpec(3, 4, (3, 3), (2, 2), (1, 1)))
    assert out.dtype == np.float32
    np.testing.assert_allclose(out.data, conv2d_ref(x, w, None, (2, 2), (1, 1)), rtol=1e-4, atol=1e-5)


def test_conv_errors():
    with pytest.raises(ValueError):
        T.conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))), None, ConvSpec(3, 1, (3, 3)))
    with pytest.raises(ValueError):
        ConvSpec(1, 1, (5, 5)).output_hw(3, 3)
    with pytest.raises(ValueError):
        ConvSpec(0, 1)


# --------------------------------------------------------------------------
# deconv2d


def test_deconv_delta_response():
    out = T.deconv2d(t([[[[3.5]]]]), t(np.ones((1, 1, 2, 2))), 2)
    np.testing.assert_array_equal(out.data[0, 0], np.full((2, 2), 3.5))


def test_deconv_unit_kernel_is_identity(rng):
    x = rng.standard_normal((2, 1, 3, 4))
    np.testing.assert_array_equal(T.deconv2d(t(x), t(np.ones((1, 1, 1, 1))), 1).data, x)


def test_deconv_block_example():
    out = T.deconv2d(t([[[[1, 2], [3, 4]]]]), t(np.ones((1, 1, 2, 2))), 2)
    np.testing.assert_array_equal(out.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


@pytest.mark.parametrize("stride,kernel", [(1, 1), (2, 2), (2, 4), (4, 4), (4, 8), (8, 16)])
def test_deconv_matches_scatter_reference(stride, kernel, rng):
    x, w = rng.standard_normal((2, 3, 3, 4)), rng.standard_normal((3, 2, kernel, kernel))
    out = T.deconv2d(t(x), t(w), stride)
    ref = deconv2d_ref(x, w, stride, T.deconv_crop(kernel, stride))
    assert out.shape == (2, 2, 3 * stride, 4 * stride)
    assert np.max(np.abs(out.data - ref) / (np.abs(ref) + 1e-12)) < 1e-10


@pytest.mark.parametrize("kernel,stride", [(3, 2), (6, 3), (2, 4), (0, 1)])
def test_deconv_rejects_unsupported_configs(kernel, stride):
    with pytest.raises(ValueError):
        T.deconv_crop(kernel, stride)


# --------------------------------------------------------------------------
# maxpool / relu


def test_relu_values():
    np.testing.assert_array_equal(T.relu(t([-1, 0, 2])).data, [0, 0, 2])


def test_maxpool_examples():
    np.testing.assert_array_equal(T.maxpool2d(t([[[[1, 2], [3, 4]]]]), 2, 2).data, [[[[4]]]])
    x = t(np.arange(1, 17).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(T.maxpool2d(x, 2, 2).data[0, 0], [[6, 8], [14, 16]])


def test_maxpool_tie_goes_to_first():
    x = t(np.ones((1, 1, 2, 2)), grad=True)
    T.backward(T.sum(T.maxpool2d(x, 2, 2)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


@pytest.mark.parametrize("k,s,p", [(2, 2, 0), (3, 2, 1), (3, 1, 1), (3, 3, 0)])
def test_maxpool_matches_reference(k, s, p, rng):
    x = rng.standard_normal((2, 3, 9, 8))
    np.testing.assert_array_equal(T.maxpool2d(t(x), k, s, p).data, maxpool2d_ref(x, k, s, p))


# --------------------------------------------------------------------------
# batch norm


def test_batchnorm_constant_channel_is_zero():
    x = t(np.full((2, 3, 4, 4), 7.0))
    st_ = T.BatchNormState(np.zeros(3), np.ones(3))
    out, _ = T.batchnorm2d(x, t(np.ones(3)), t(np.zeros(3)), st_, "train")
    assert np.abs(out.data).max() <= 1e-3


def test_batchnorm_beta_shift(rng):
    x = t(rng.standard_normal((3, 2, 5, 5)) * 4 + 2)
    out, _ = T.batchnorm2d(x, t(np.ones(2)), t(np.full(2, 5.0)), T.BatchNormState(np.zeros(2), np.ones(2)))
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 5.0, atol=1e-6)


def test_batchnorm_two_values():
    x = t(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
    out, new = T.batchnorm2d(x, t([1.0]), t([0.0]), T.BatchNormState(np.zeros(1), np.ones(1)), eps=1e-12)
    np.testing.assert_allclose(out.data.ravel(), [-1, 1], atol=1e-9)
    # running stats: momentum 0.1 toward mean 2 and unbiased variance 2
    np.testing.assert_allclose(new.mean, [0.2])
    np.testing.assert_allclose(new.var, [0.9 + 0.1 * 2.0])


def test_batchnorm_eval_uses_running_stats():
    x = t(np.full((1, 1, 2, 2), 4.0))
    st_ = T.BatchNormState(np.array([2.0]), np.array([4.0]))
    out, same = T.batchnorm2d(x, t([1.0]), t([0.0]), st_, "eval", eps=1e-12)
    np.testing.assert_allclose(out.data, 1.0)
    assert same is st_


def test_batchnorm_errors():
    s = T.BatchNormState(np.zeros(1), np.ones(1))
    with pytest.raises(ValueError):
        T.batchnorm2d(t(np.zeros((1, 1, 2, 2))), t([1.0]), t([0.0]), s, eps=0)
    with pytest.raises(ValueError):
        T.batchnorm2d(t(np.zeros((1, 1, 2, 2))), t([1.0]), t([0.0]), s, mode="infer")


# --------------------------------------------------------------------------
# elementwise


def test_softmax_sigmoid_examples():
    np.testing.assert_allclose(T.softmax(t([0, 0, 0]), axis=0).data, [1 / 3] * 3)
    assert T.sigmoid(t([0.0])).data[0] == 0.5
    np.testing.assert_allclose(T.softmax(t([1, 2, 3]), axis=0).data, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_is_stable_for_large_logits():
    out = T.softmax(t([1000.0, 0.0]), axis=0).data
    assert np.all(np.isfinite(out)) and out[0] == 1.0


def test_add_requires_exact_shape():
    with pytest.raises(ValueError):
        T.add(t(np.zeros((2, 3))), t(np.zeros((3,))))


def test_concat_channels(rng):
    a, b = rng.standard_normal((2, 1, 3, 3)), rng.standard_normal((2, 2, 3, 3))
    np.testing.assert_array_equal(T.concat_channels(t(a), t(b)).data, np.concatenate([a, b], axis=1))
    with pytest.raises(ValueError):
        T.concat_channels(t(a), t(np.zeros((2, 2, 4, 3))))


def test_nonfinite_is_an_error():
    T.set_check_finite(True)
    with pytest.raises(T.NonFiniteError):
        T.log(t([0.0]))


# --------------------------------------------------------------------------
# backward


def test_grad_of_sum_is_ones():
    x = t(np.zeros((2, 3, 4)), grad=True)
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_grad_of_relu_sum():
    x = t([-1.0, 2.0], grad=True)
    T.backward(T.sum(T.relu(x)))
    np.testing.assert_array_equal(x.grad, [0, 1])


def test_backward_accumulates():
    x = t([1.0, 2.0], grad=True)
    T.backward(T.sum(T.square(x)))
    T.backward(T.sum(T.square(x)))
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        T.backward(T.relu(t([1.0, 2.0], grad=True)))


def test_shared_subexpression_gradient():
    x = t([3.0], grad=True)
    y = T.mul(x, x)  # d/dx x^2 via a node used twice
    T.backward(T.sum(T.add(y, y)))
    np.testing.assert_allclose(x.grad, [12.0])


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_backward_is_linear(a, b, seed):
    r = np.random.Generator(np.random.PCG64(seed))
    x0 = r.standard_normal((2, 3))

    def grad_of(fn):
        x = t(x0, grad=True)
        T.backward(fn(x))
        return x.grad

    f = lambda x: T.sum(T.sigmoid(x))  # noqa: E731
    g = lambda x: T.sum(T.square(x))  # noqa: E731
    both = grad_of(lambda x: T.add(T.mul(f(x), a), T.mul(g(x), b)))
    np.testing.assert_allclose(both, a * grad_of(f) + b * grad_of(g), rtol=1e-10, atol=1e-10)


def test_ops_are_deterministic(rng):
    x, w = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))
    spec = ConvSpec(3, 4, (3, 3), (1, 1), (1, 1))
    a = T.conv2d(t(x), t(w), None, spec).data
    b = T.conv2d(t(x), t(w), None, spec).data
    assert a.tobytes() == b.tobytes()


# --------------------------------------------------------------------------
# .ten container


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(1,), (2, 3), (1, 2, 3, 4), ()])
def test_ten_round_trip(dtype, shape, rng):
    a = rng.standard_normal(shape).astype(dtype)
    buf = io.BytesIO()
    T.write_tensor(buf, Tensor(a))
    raw = buf.getvalue()
    assert raw[:4] == b"MTLT"
    back = T.read_tensor(io.BytesIO(raw))
    assert back.dtype == dtype and back.shape == a.shape
    assert back.tobytes() == a.tobytes()


def test_ten_header_layout():
    raw = T.tensor_bytes(Tensor(np.zeros((2, 3), dtype=np.float64)))
    assert raw[4:8] == (1).to_bytes(4, "little")  # version
    assert raw[8] == 1 and raw[9] == 2  # f64, ndim
    assert raw[10:18] == (2).to_bytes(8, "little") and raw[18:26] == (3).to_bytes(8, "little")
    assert len(raw) == 26 + 6 * 8


def test_ten_rejects_bad_magic():
    with pytest.raises(ValueError):
        T.read_tensor(io.BytesIO(b"XXXX" + bytes(20)))
