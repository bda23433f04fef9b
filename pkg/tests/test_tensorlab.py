import numpy as np
import pytest

from irsce import tensorlab as tl
from irsce.tensorlab import CTensor, DimensionError, NumericalError, Tensor

from oracles import conv2d_loops, depthwise_loops, directional_check, op_catalog


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestTensor:
    def test_rank_limit(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_non_finite_rejected(self):
        with pytest.raises(NumericalError):
            Tensor(np.array([1.0, np.nan]))
        with pytest.raises(NumericalError), np.errstate(divide="ignore"):
            tl.div(Tensor(np.ones(2)), Tensor(np.zeros(2)))

    def test_immutable(self):
        t = Tensor(np.ones(3))
        with pytest.raises(ValueError):
            t.data[0] = 2.0

    def test_float32_kept(self):
        t = Tensor(np.ones(3, dtype=np.float32))
        assert t.dtype == np.float32
        assert Tensor([1, 2]).dtype == np.float64

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            tl.backward(tl.mul(x, 2.0))

    def test_sum_of_squares_gradient(self, rng):
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        tl.backward(tl.tsum(tl.square(x)))
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = tl.mul(x, x)
        tl.backward(tl.add(y, y))
        assert x.grad == pytest.approx(12.0)


class TestElementwise:
    def test_leaky_relu_values(self):
        out = tl.leaky_relu(Tensor(np.array([1.0, -1.0, 0.0])))
        np.testing.assert_array_equal(out.data, [1.0, -0.01, 0.0])

    def test_leaky_relu_negative_slope_gradient(self):
        x = Tensor(np.array([-2.0]), requires_grad=True)
        tl.backward(tl.tsum(tl.leaky_relu(x)))
        h = 1e-6
        fd = (tl.leaky_relu(Tensor(np.array([-2.0 + h]))).data - tl.leaky_relu(Tensor(np.array([-2.0 - h]))).data) / (2 * h)
        assert x.grad[0] == pytest.approx(0.01)
        assert fd[0] == pytest.approx(0.01, rel=1e-8)

    def test_broadcast_gradient_shape(self, rng):
        a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((3,)), requires_grad=True)
        tl.backward(tl.tsum(tl.mul(a, b)))
        assert b.grad.shape == (3,)
        np.testing.assert_allclose(b.grad, a.data.sum(axis=0))


class TestConv:
    def test_identity_kernel(self):
        out = tl.conv2d(Tensor(np.array([[[2.5]]])), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, [[[2.5]]])

    def test_zero_kernel_gives_bias(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 5)))
        out = tl.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.array([1.0, -2.0, 0.5])))
        np.testing.assert_array_equal(out.data, np.broadcast_to(np.array([1.0, -2.0, 0.5])[:, None, None], (3, 4, 5)))

    def test_matches_loops(self, rng):
        x = rng.standard_normal((2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = tl.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        assert np.max(np.abs(out - conv2d_loops(x, w, b))) < 1e-12

    def test_batched_equals_per_sample(self, rng):
        x = rng.standard_normal((3, 2, 5, 4))
        w = rng.standard_normal((2, 2, 3, 3))
        b = rng.standard_normal(2)
        out = tl.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        for i in range(3):
            np.testing.assert_array_equal(out[i], tl.conv2d(Tensor(x[i]), Tensor(w), Tensor(b)).data)

    def test_linearity(self, rng):
        x, y = rng.standard_normal((2, 2, 5, 5))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)))
        zero = Tensor(np.zeros(3))
        lhs = tl.conv2d(Tensor(1.5 * x - 0.5 * y), w, zero).data
        rhs = 1.5 * tl.conv2d(Tensor(x), w, zero).data - 0.5 * tl.conv2d(Tensor(y), w, zero).data
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            tl.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            tl.conv2d(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))

    def test_depthwise_identity(self, rng):
        x = rng.standard_normal((3, 4, 4))
        k = np.zeros((3, 3, 3))
        k[:, 1, 1] = 1.0
        out = tl.depthwise_conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(3))).data
        np.testing.assert_array_equal(out, x)

    def test_depthwise_single_channel_is_conv(self, rng):
        x = rng.standard_normal((1, 5, 4))
        k = rng.standard_normal((1, 3, 3))
        b = rng.standard_normal(1)
        dw = tl.depthwise_conv2d(Tensor(x), Tensor(k), Tensor(b)).data
        full = tl.conv2d(Tensor(x), Tensor(k[:, None]), Tensor(b)).data
        assert np.max(np.abs(dw - full)) < 1e-12

    def test_depthwise_matches_loops(self, rng):
        x = rng.standard_normal((3, 4, 4))
        k = rng.standard_normal((3, 3, 3))
        b = rng.standard_normal(3)
        out = tl.depthwise_conv2d(Tensor(x), Tensor(k), Tensor(b)).data
        assert np.max(np.abs(out - depthwise_loops(x, k, b))) < 1e-12

    def test_depthwise_channel_mismatch(self):
        with pytest.raises(DimensionError):
            tl.depthwise_conv2d(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((3, 3, 3))), Tensor(np.zeros(3)))


class TestDenseAndPool:
    def test_dense_identity_and_bias(self, rng):
        x = rng.standard_normal(3)
        np.testing.assert_array_equal(tl.dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
        b = np.array([1.0, 2.0])
        np.testing.assert_array_equal(tl.dense(Tensor(x), Tensor(np.zeros((2, 3))), Tensor(b)).data, b)

    def test_dense_hand_product(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        out = tl.dense(Tensor(np.array([1.0, -1.0])), Tensor(w), Tensor(np.array([0.5, 0.0, -0.5])))
        np.testing.assert_allclose(out.data, [-0.5, -1.0, -1.5])

    def test_pool_constant_avg(self):
        out = tl.pool_reduce(Tensor(np.full((2, 3, 4), 1.25)), (1, 2), "avg")
        np.testing.assert_array_equal(out.data, np.full((2, 1, 1), 1.25))

    def test_pool_max_spike(self):
        x = np.zeros((2, 3, 4))
        x[1, 2, 3] = 7.0
        out = tl.pool_reduce(Tensor(x), (1, 2), "max")
        np.testing.assert_array_equal(out.data.ravel(), [0.0, 7.0])

    def test_pool_avg_matches_mean(self, rng):
        x = rng.standard_normal((3, 4, 5))
        out = tl.pool_reduce(Tensor(x), (1,), "avg", keepdims=False)
        np.testing.assert_allclose(out.data, x.mean(axis=1), atol=1e-15)

    def test_pool_max_tie_goes_to_lowest_index(self):
        x = Tensor(np.array([[1.0, 3.0, 3.0, 0.0]]), requires_grad=True)
        tl.backward(tl.tsum(tl.pool_reduce(x, (1,), "max")))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0, 0.0]])


class TestShrinkage:
    def _st(self, r, l1, l2, s):
        return tl.soft_threshold(CTensor.from_numpy(np.asarray(r, dtype=complex)), l1, l2, s).numpy()

    def test_zero_threshold_scales(self, rng):
        r = rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))
        np.testing.assert_allclose(self._st(r, 1.7, 0.0, 1.0), 1.7 * r, atol=1e-15)

    def test_below_threshold(self):
        assert self._st([0.5], 1.0, 1.0, 1.0)[0] == 0

    def test_formula_value(self):
        assert self._st([2.0 + 0j], 2.0, 1.0, 1.0)[0] == pytest.approx(2.0)

    def test_zero_entry_maps_to_zero(self):
        assert self._st([0j], 1.0, 0.0, 1.0)[0] == 0

    def test_non_expansive(self, rng):
        r = rng.standard_normal((20, 4)) + 1j * rng.standard_normal((20, 4))
        out = self._st(r, 1.3, 0.4, 0.8)
        assert np.all(np.abs(out) <= 1.3 * np.abs(r) + 1e-15)

    def test_phase_preserved(self):
        out = self._st([3.0 * np.exp(0.7j)], 1.0, 1.0, 1.0)[0]
        assert np.angle(out) == pytest.approx(0.7)
        assert abs(out) == pytest.approx(2.0)


class TestGradients:
    @pytest.mark.parametrize("name", sorted(op_catalog()))
    def test_directional_fd(self, name, rng):
        inst = op_catalog()[name]
        for _ in range(10):
            arrays, build = inst(rng)
            assert directional_check(build, arrays, rng) < 1e-5

    def test_conv_single_channel_fd(self, rng):
        x = rng.standard_normal((1, 3, 3))
        w = rng.standard_normal((1, 1, 3, 3))
        gw = rng.standard_normal((1, 3, 3))

        def build(ts):
            return tl.tsum(tl.mul(tl.conv2d(ts[0], ts[1], Tensor(np.zeros(1))), Tensor(gw)))
        assert directional_check(build, [x, w], rng) < 1e-5


class TestComplex:
    def test_cmatmul_matches_numpy(self, rng):
        a = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))
        b = rng.standard_normal((2, 4, 5)) + 1j * rng.standard_normal((2, 4, 5))
        out = tl.cmatmul(CTensor.from_numpy(a), CTensor.from_numpy(b)).numpy()
        np.testing.assert_allclose(out, a @ b, atol=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            CTensor(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


class TestSnapshot:
    def test_round_trip(self, tmp_path, rng):
        params = {"w": rng.standard_normal((2, 3)), "b": rng.standard_normal(3), "s": np.array(1.5)}
        path = tmp_path / "p.irsw"
        tl.save_snapshot(path, params, {"type": "x", "N": 2})
        back, man = tl.load_snapshot(path)
        assert man == {"type": "x", "N": 2}
        for k, v in params.items():
            np.testing.assert_array_equal(back[k], v)

    def test_header(self, tmp_path):
        path = tmp_path / "p.irsw"
        tl.save_snapshot(path, {"a": np.ones(1)})
        blob = path.read_bytes()
        assert blob[:4] == b"IRSW"
        assert int.from_bytes(blob[4:6], "little") == 1

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"NOPE" + bytes(10))
        with pytest.raises(ValueError):
            tl.load_snapshot(path)
