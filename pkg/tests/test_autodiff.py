import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cavlab import autodiff as ad
from cavlab.errors import FormatError, GradientError, ShapeError


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    # relative check against the gradient's overall scale
    scale = max(np.abs(numeric).max(), 1.0)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=max(atol, rtol * scale))


def uniform(shape):
    return arrays(np.float64, shape, elements=st.floats(-1, 1, allow_nan=False, width=64))


def check_op(fn, *inputs):
    """Compare tape gradients of sum(w * fn(inputs)) with finite differences."""
    rng = np.random.default_rng(len(inputs))
    out_shape = fn(*[ad.Tensor(x) for x in inputs]).shape
    w = rng.uniform(-1, 1, out_shape)

    def scalar(*xs):
        return float(np.sum(w * fn(*[ad.Tensor(x) for x in xs]).data))

    tape = ad.Tape()
    leaves = [tape.watch(x) for x in inputs]
    out = ad.reduce_sum(ad.mul(fn(*leaves), w))
    grads = tape.gradient(out, leaves)
    for i, (x, g) in enumerate(zip(inputs, grads)):
        def f(xi, i=i):
            xs = list(inputs)
            xs[i] = xi
            return scalar(*xs)
        assert g.shape == x.shape
        assert_grad_close(g.data, numeric_grad(f, x))


# -- forward examples ------------------------------------------------------------

def test_add_example():
    np.testing.assert_array_equal(ad.add([1, 2], [3, 4]).data, [4, 6])


def test_relu_example():
    np.testing.assert_array_equal(ad.relu([-1, 0, 2]).data, [0, 0, 2])


def test_conv2d_all_ones_valid():
    # hand summation: every 2x2 window of ones sums to 4
    x = np.ones((1, 3, 3, 1))
    k = np.ones((2, 2, 1, 1))
    out = ad.conv2d(x, k, stride=1, padding="valid").data
    assert out.shape == (1, 2, 2, 1)
    np.testing.assert_array_equal(out[0, :, :, 0], [[4, 4], [4, 4]])


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6, 5, 3))
    k = rng.normal(size=(3, 3, 3, 4))
    for stride in (1, 2):
        for padding in ("valid", "same"):
            out = ad.conv2d(x, k, stride, padding).data
            if padding == "same":
                oh, ow = -(-6 // stride), -(-5 // stride)
                ph = max((oh - 1) * stride + 3 - 6, 0)
                pw = max((ow - 1) * stride + 3 - 5, 0)
                xp = np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
            else:
                xp = x
                oh, ow = (6 - 3) // stride + 1, (5 - 3) // stride + 1
            ref = np.zeros((2, oh, ow, 4))
            for n in range(2):
                for i in range(oh):
                    for j in range(ow):
                        patch = xp[n, i * stride:i * stride + 3, j * stride:j * stride + 3, :]
                        ref[n, i, j] = np.tensordot(patch, k, axes=([0, 1, 2], [0, 1, 2]))
            np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_shape_errors_name_the_op():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        ad.add(np.ones(3), np.ones(4))
    with pytest.raises(ShapeError, match="conv2d"):
        ad.conv2d(np.ones((1, 4, 4, 2)), np.ones((3, 3, 3, 1)))


# -- gradient examples -------------------------------------------------------------

def test_gradient_of_sum_of_squares():
    tape = ad.Tape()
    x = tape.watch([1.0, 2.0, 3.0])
    (g,) = tape.gradient(ad.reduce_sum(ad.mul(x, x)), [x])
    np.testing.assert_array_equal(g.data, [2, 4, 6])


def test_gradient_of_constant_is_zero():
    tape = ad.Tape()
    x = tape.watch([1.0, 2.0])
    y = tape.watch(3.0)
    (g,) = tape.gradient(ad.mul(y, 2.0), [x])
    np.testing.assert_array_equal(g.data, [0, 0])


def test_gradient_errors():
    tape = ad.Tape()
    x = tape.watch([1.0, 2.0])
    with pytest.raises(GradientError, match="scalar"):
        tape.gradient(ad.mul(x, 2.0), [x])
    detached = ad.Tensor([1.0, 2.0])
    with pytest.raises(GradientError, match="detached"):
        tape.gradient(ad.reduce_sum(x), [detached])
    other = ad.Tape().watch([1.0, 2.0])
    with pytest.raises(GradientError):
        ad.add(x, other)
    with pytest.raises(GradientError):
        ad.gradient(ad.Tensor(1.0), [x])


def test_backward_visits_each_node_once():
    tape = ad.Tape()
    x = tape.watch(2.0)
    y = x
    for _ in range(20):
        y = ad.add(y, y)  # diamond-shaped reuse at every level
    (g,) = tape.gradient(y, [x])
    assert g.data == 2.0 ** 20


def test_untaped_ops_do_not_record():
    tape = ad.Tape()
    ad.relu(ad.Tensor([1.0, -1.0]))
    assert len(tape) == 0


def test_tensors_are_read_only():
    t = ad.Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 5, 3))
    k = rng.normal(size=(3, 3, 3, 2))
    a = ad.conv2d(x, k, 2, "same").data
    b = ad.conv2d(x, k, 2, "same").data
    assert a.tobytes() == b.tobytes()


# -- finite-difference properties (>= 100 random cases per op) ---------------------

FD = settings(max_examples=100, deadline=None)


@FD
@given(uniform((3, 4)), uniform((3, 4)))
def test_add_fd(a, b):
    check_op(ad.add, a, b)


@FD
@given(uniform((3, 4)), uniform((4,)))
def test_add_broadcast_fd(a, b):
    check_op(ad.add, a, b)


@FD
@given(uniform((3, 4)), uniform((3, 1)))
def test_mul_fd(a, b):
    check_op(ad.mul, a, b)


@FD
@given(uniform((3, 4)), uniform((4, 2)))
def test_matmul_fd(a, b):
    check_op(ad.matmul, a, b)


@FD
@given(uniform((4,)), uniform((4, 3)))
def test_matmul_vector_fd(a, b):
    check_op(ad.matmul, a, b)


@FD
@given(uniform((2, 5, 5, 2)), uniform((3, 3, 2, 3)), st.sampled_from([1, 2]), st.sampled_from(["valid", "same"]))
def test_conv2d_fd(x, k, stride, padding):
    check_op(lambda a, b: ad.conv2d(a, b, stride, padding), x, k)


@FD
@given(uniform((3, 5)))
def test_relu_fd(x):
    # keep away from the kink, where the derivative is undefined
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    check_op(ad.relu, x)


@FD
@given(uniform((4, 3)), st.lists(st.integers(0, 2), min_size=4, max_size=4))
def test_softmax_cross_entropy_fd(logits, labels):
    check_op(lambda z: ad.softmax_cross_entropy(z, labels), logits * 3)
    check_op(lambda z: ad.softmax_cross_entropy(z, labels, reduction="none"), logits * 3)


@FD
@given(uniform((3, 4, 2)), st.sampled_from([None, 0, 1, 2]))
def test_reduce_sum_fd(x, axis):
    check_op(lambda a: ad.reduce_sum(a, axis), x)


@FD
@given(uniform((2, 3, 2)))
def test_flatten_fd(x):
    check_op(ad.flatten, x)
    check_op(lambda a: ad.reshape(a, (3, 4)), x)


@FD
@given(uniform((2, 4, 4, 2)), uniform((3, 3, 2, 2)), uniform((8, 3)))
def test_composition_fd(x, k, w):
    # a continuous offset keeps relu inputs off the kink at exactly zero
    rng = np.random.default_rng(0)
    x = x + 0.01 * rng.normal(size=x.shape)
    k = k + 0.01 * rng.normal(size=k.shape)

    def net(a, b, c):
        h = ad.relu(ad.conv2d(a, b, 2, "same"))
        return ad.softmax_cross_entropy(ad.matmul(ad.flatten(h), c), [0, 2])
    check_op(net, x, k, w)


@settings(max_examples=100, deadline=None)
@given(uniform((5, 4)), st.lists(st.integers(0, 3), min_size=5, max_size=5))
def test_softmax_cross_entropy_properties(logits, labels):
    z = logits * 10
    loss = ad.softmax_cross_entropy(z, labels, reduction="none").data
    p = ad.softmax(z)
    assert np.all(loss >= 0)
    np.testing.assert_allclose(loss, -np.log(p[np.arange(5), labels]), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


# -- TNSR format ---------------------------------------------------------------------

def test_tnsr_layout():
    data = ad.tnsr_bytes(np.arange(6.0).reshape(2, 3))
    assert data[:4] == b"TNSR"
    assert struct.unpack("<III", data[4:16]) == (2, 2, 3)
    np.testing.assert_array_equal(np.frombuffer(data[16:], "<f4"), np.arange(6.0))


@settings(max_examples=50, deadline=None)
@given(x=arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_tnsr_roundtrip_lossless_for_float32_values(x, tmp_path_factory):
    path = tmp_path_factory.mktemp("t") / "x.tnsr"
    ad.write_tnsr(path, x.astype(np.float64))
    back = ad.read_tnsr(path)
    assert back.shape == x.shape
    assert back.tobytes() == x.astype(np.float64).tobytes()
    assert ad.tnsr_bytes(back) == path.read_bytes()


def test_tnsr_narrowing_is_documented_precision():
    x = np.array([0.1, 1 / 3])
    back = ad.tnsr_from_bytes(ad.tnsr_bytes(x))
    np.testing.assert_allclose(back, x, rtol=1e-7)


def test_tnsr_rejects_bad_input():
    with pytest.raises(FormatError, match="magic"):
        ad.tnsr_from_bytes(b"XXXX" + b"\0" * 8)
    good = ad.tnsr_bytes(np.ones((2, 2)))
    with pytest.raises(FormatError, match="truncated"):
        ad.tnsr_from_bytes(good[:-3])
    with pytest.raises(FormatError, match="trailing"):
        ad.tnsr_from_bytes(good + b"\0")
    assert ad.read_tnsr_stream(io.BytesIO(good)).shape == (2, 2)
