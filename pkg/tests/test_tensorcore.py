import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aenet import tensorcore as tc
from aenet.tensorcore import LinearLayer, ShapeError

from conftest import gradcheck, numeric_grad, rel_err


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self, rng):
        b = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(tc.matmul(np.eye(2), b).value, b)

    def test_small(self):
        assert tc.matmul([[1.0, 2.0]], [[3.0], [4.0]]).value.tolist() == [[11.0]]

    def test_against_triple_loop(self, rng):
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(tc.matmul(a, b).value, triple_loop_matmul(a, b), atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            tc.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity(self, rng):
        for _ in range(20):
            a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
            left = tc.matmul(tc.matmul(a, b), c).value
            right = tc.matmul(a, tc.matmul(b, c)).value
            np.testing.assert_allclose(left, right, atol=1e-10)


class TestCosine:
    def test_self(self):
        assert tc.cosine([3.0, 4.0], [3.0, 4.0]).item() == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal(self):
        assert tc.cosine([1.0, 0.0], [0.0, 1.0]).item() == 0.0

    def test_zero_vector(self):
        assert tc.cosine([0.0, 0.0], [1.0, 2.0]).item() == 0.0

    def test_rows_match_vector_cosine(self, rng):
        x, p = rng.normal(size=(6, 4)), rng.normal(size=4)
        rows = tc.cosine_rows(x, p).value
        np.testing.assert_allclose(rows, [tc.cosine(r, p).item() for r in x], atol=1e-12)


class TestSoftmax:
    def test_constant(self):
        np.testing.assert_allclose(tc.softmax([2.0, 2.0, 2.0]).value, [1 / 3] * 3)

    def test_closed_form(self):
        np.testing.assert_allclose(tc.softmax([0.0, math.log(3.0)]).value, [0.25, 0.75], atol=1e-12)

    def test_against_naive(self, rng):
        x = rng.normal(size=7)
        naive = np.exp(x) / np.exp(x).sum()
        assert np.max(np.abs(tc.softmax(x).value - naive)) < 1e-12

    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-50, 50)))
    def test_normalised_and_positive(self, x):
        y = tc.softmax(x).value
        assert abs(y.sum() - 1.0) < 1e-6
        assert np.all(y > 0)


class TestRelu:
    def test_values(self):
        assert tc.relu([-1.0, 0.0, 2.0]).value.tolist() == [0.0, 0.0, 2.0]

    def test_identity_on_nonnegative(self, rng):
        x = rng.uniform(0, 3, size=(3, 4))
        np.testing.assert_array_equal(tc.relu(x).value, x)

    def test_subgradient(self):
        x = tc.parameter([-1.0, 2.0])
        tc.sum(tc.relu(x)).backward()
        assert x.grad.tolist() == [0.0, 1.0]

    def test_subgradient_at_zero(self):
        x = tc.parameter([0.0])
        tc.sum(tc.relu(x)).backward()
        assert x.grad.tolist() == [0.0]


class TestMinMax:
    def test_two_points(self):
        np.testing.assert_allclose(tc.minmax_norm([2.0, 4.0]).value, [0.0, 1.0], atol=1e-6)

    def test_constant(self):
        assert tc.minmax_norm([5.0, 5.0, 5.0]).value.tolist() == [0.0, 0.0, 0.0]

    def test_affine(self):
        np.testing.assert_allclose(tc.minmax_norm([-1.0, 0.0, 3.0]).value, [0.0, 0.25, 1.0], atol=1e-6)

    @given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e6, 1e6)))
    def test_unit_interval(self, x):
        y = tc.minmax_norm(x).value
        assert np.all(y >= 0) and np.all(y <= 1)


class TestConcat:
    def test_channels(self, rng):
        a, b = rng.normal(size=(1, 2, 2)), rng.normal(size=(1, 2, 2))
        out = tc.concat_channels(a, b).value
        assert out.shape == (2, 2, 2)
        np.testing.assert_array_equal(out[0], a[0])

    def test_empty(self, rng):
        a = rng.normal(size=(3, 2, 2))
        np.testing.assert_array_equal(tc.concat_channels(a, np.zeros((0, 2, 2))).value, a)

    def test_round_trip(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(1, 3, 4))
        out = tc.concat_channels(a, b).value
        np.testing.assert_array_equal(out[:2], a)
        np.testing.assert_array_equal(out[2:], b)

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            tc.concat_channels(np.ones((1, 2, 2)), np.ones((1, 3, 2)))


class TestLinear:
    def test_identity(self, rng):
        x = rng.normal(size=(5, 3))
        layer = LinearLayer(tc.parameter(np.eye(3)), tc.parameter(np.zeros(3)))
        np.testing.assert_array_equal(tc.linear_forward(layer, x).value, x)

    def test_bias_only(self, rng):
        layer = LinearLayer(tc.parameter(np.zeros((2, 3))), tc.parameter([1.5, -2.0]))
        out = tc.linear_forward(layer, rng.normal(size=(4, 3))).value
        np.testing.assert_array_equal(out, np.tile([1.5, -2.0], (4, 1)))

    def test_against_dot_products(self, rng):
        layer = LinearLayer.init(rng, 5, 3)
        layer.bias.value[:] = rng.normal(size=3)
        x = rng.normal(size=(4, 5))
        expect = [[sum(x[i, t] * layer.weight.value[j, t] for t in range(5)) + layer.bias.value[j] for j in range(3)] for i in range(4)]
        np.testing.assert_allclose(tc.linear_forward(layer, x).value, expect, atol=1e-12)

    def test_mismatch(self, rng):
        with pytest.raises(ShapeError):
            tc.linear_forward(LinearLayer.init(rng, 5, 3), np.ones((2, 4)))

    def test_glorot_bounds(self, rng):
        w = LinearLayer.init(rng, 10, 6).weight.value
        assert np.all(np.abs(w) <= math.sqrt(6 / 16))


class TestBackward:
    def test_sum(self, rng):
        x = tc.parameter(rng.normal(size=(2, 3)))
        tc.sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_half_square(self, rng):
        x = tc.parameter(rng.normal(size=4))
        tc.scale(tc.sum(tc.mul(x, x)), 0.5).backward()
        np.testing.assert_allclose(x.grad, x.value)

    def test_non_scalar(self):
        with pytest.raises(ShapeError):
            tc.backward(tc.parameter([1.0, 2.0]))

    def test_accumulates(self, rng):
        x = tc.parameter(rng.normal(size=3))
        loss = tc.sum(tc.scale(x, 2.0))
        loss.backward()
        loss.backward()
        np.testing.assert_allclose(x.grad, 4.0)
        x.zero_grad()
        loss.backward()
        np.testing.assert_allclose(x.grad, 2.0)

    def test_fan_out(self, rng):
        x = tc.parameter(rng.normal(size=3))

        def build():
            y = tc.sigmoid(x)
            return tc.sum(tc.add(tc.mul(y, y), tc.exp(y)))

        build().backward()
        (num,) = numeric_grad(lambda: build().item(), [x.value])
        assert rel_err(x.grad, num) < 1e-6

    def test_constants_receive_no_grad(self, rng):
        x = tc.parameter(rng.normal(size=3))
        c = tc.Var(rng.normal(size=3))
        tc.sum(tc.mul(x, c)).backward()
        assert c.grad is None


def _cos_rows(x, p):
    return tc.sum(tc.mul(tc.cosine_rows(x, p), [0.3, -1.0, 2.0, 0.7, 1.1]))


OPS = {
    "add": (lambda a, b: tc.sum(tc.mul(tc.add(a, b), tc.add(a, b))), [(3, 4), (4,)]),
    "sub": (lambda a, b: tc.sum(tc.mul(tc.sub(a, b), a)), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: tc.sum(tc.mul(a, b)), [(2, 5), (2, 5)]),
    "scale": (lambda a: tc.sum(tc.mul(tc.scale(a, -1.7), a)), [(4,)]),
    "matmul": (lambda a, b: tc.sum(tc.mul(tc.matmul(a, b), tc.matmul(a, b))), [(3, 4), (4, 2)]),
    "matvec": (lambda a, v: tc.sum(tc.exp(tc.matmul(a, v))), [(3, 4), (4,)]),
    "vecmat": (lambda v, a: tc.sum(tc.exp(tc.matmul(v, a))), [(3,), (3, 4)]),
    "log": (lambda a: tc.sum(tc.log(tc.add(tc.mul(a, a), 0.5))), [(5,)]),
    "sigmoid": (lambda a: tc.sum(tc.mul(tc.sigmoid(a), [1.0, -2.0, 3.0])), [(3,)]),
    "relu": (lambda a: tc.sum(tc.mul(tc.relu(a), a)), [(6,)]),
    "mean": (lambda a: tc.sum(tc.mul(tc.mean(a, axis=1), [1.0, 2.0])), [(2, 3)]),
    "cosine": (lambda u, v: tc.cosine(u, v), [(5,), (5,)]),
    "cosine_rows": (_cos_rows, [(5, 3), (3,)]),
    "softmax": (lambda a: tc.sum(tc.mul(tc.softmax(a), [1.0, 3.0, -2.0, 0.5])), [(4,)]),
    "softmax_rows": (lambda a: tc.sum(tc.mul(tc.softmax(a, axis=1), a)), [(3, 4)]),
    "minmax_norm": (lambda a: tc.sum(tc.mul(tc.minmax_norm(a), [1.0, -1.0, 2.0, 0.3, 0.9])), [(5,)]),
    "concat": (lambda a, b: tc.sum(tc.mul(tc.concat_channels(a, b), tc.concat_channels(b, a))), [(1, 2, 2), (1, 2, 2)]),
    "linear": (None, None),
    "layer_norm": (
        lambda x, g, b: tc.sum(tc.mul(tc.layer_norm(x, g, b), np.arange(12.0).reshape(3, 4))),
        [(3, 4), (4,), (4,)],
    ),
    "avg_pool": (lambda a: tc.sum(tc.mul(tc.avg_pool(a, 2), tc.avg_pool(a, 2))), [(2, 4, 4)]),
    "upsample": (lambda a: tc.sum(tc.mul(tc.upsample_nearest(a, 2), np.arange(16.0).reshape(4, 4))), [(2, 2)]),
    "reciprocal": (lambda a: tc.sum(tc.reciprocal(tc.add(tc.mul(a, a), 1.0))), [(3,)]),
    "clip": (lambda a: tc.sum(tc.mul(tc.clip(a, -0.5, 0.5), a)), [(6,)]),
    "take_rows": (lambda a: tc.sum(tc.mul(tc.take_rows(a, [0, 2, 2]), tc.take_rows(a, [1, 0, 2]))), [(3, 2)]),
    "broadcast_rows": (lambda v: tc.sum(tc.mul(tc.broadcast_rows(v, 3), np.arange(6.0).reshape(3, 2))), [(2,)]),
}


def _linear(w, b, x):
    return tc.sum(tc.mul(tc.linear_forward(LinearLayer(w, b), x), tc.linear_forward(LinearLayer(w, b), x)))


OPS["linear"] = (_linear, [(3, 4), (3,), (5, 4)])


@pytest.mark.parametrize("name", sorted(OPS))
def test_finite_differences(name):
    build, shapes = OPS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = max(gradcheck(build, shapes, rng) for _ in range(20))
    assert worst < 1e-4, f"{name}: relative error {worst:.2e}"


def test_allocation_tracking_ignores_views():
    x = tc.Var(np.ones((4, 3, 5)))
    with tc.track_allocations() as log:
        tc.chw_to_rows(x)
    assert log == []
    with tc.track_allocations() as log:
        tc.add(x, 1.0)
    assert log == [("add", (4, 3, 5))]
