"""Tape mechanics and differentiable-op correctness."""

import numpy as np
import pytest

from msmamba import ops
from msmamba.gradcheck import gradcheck
from msmamba.tensor import (
    ContractViolation,
    Tape,
    Tensor,
    backward,
    grad_of,
    no_grad,
)


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data), requires_grad=requires_grad, dtype=np.float64)


# ---------------------------------------------------------------------------
# tape basics
# ---------------------------------------------------------------------------


class TestTape:
    def test_sum_gradient_is_ones(self):
        x = t64([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        with Tape():
            backward(ops.sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_square_gradient(self):
        x = t64([2.0, -3.0], requires_grad=True)
        with Tape():
            backward(ops.sum_(ops.mul(x, x)))
        np.testing.assert_allclose(x.grad, [4.0, -6.0])

    def test_fanout_accumulates(self):
        x = t64([1.5], requires_grad=True)
        with Tape():
            y = ops.add(ops.mul(x, x), ops.mul(3.0, x))  # x^2 + 3x
            backward(ops.sum_(y))
        np.testing.assert_allclose(x.grad, [2 * 1.5 + 3.0])

    def test_scalar_loss_required(self):
        x = t64([1.0, 2.0], requires_grad=True)
        with Tape():
            y = ops.mul(x, x)
            with pytest.raises(ContractViolation):
                backward(y)

    def test_no_grad_suppresses_recording(self):
        x = t64([1.0], requires_grad=True)
        with Tape() as tape:
            with no_grad():
                y = ops.mul(x, x)
        assert len(tape) == 0
        assert y.node is None

    def test_untracked_leaf_gets_no_grad(self):
        x = t64([1.0], requires_grad=True)
        c = t64([2.0])
        with Tape():
            backward(ops.sum_(ops.mul(x, c)))
        assert c.grad is None
        np.testing.assert_allclose(grad_of(c), [0.0])
        np.testing.assert_allclose(x.grad, [2.0])

    def test_mixed_dtype_rejected(self):
        a = Tensor([1.0], dtype=np.float32)
        b = Tensor([1.0], dtype=np.float64)
        with pytest.raises(ContractViolation):
            ops.add(a, b)

    def test_operator_sugar(self):
        x = t64([3.0], requires_grad=True)
        with Tape():
            y = (x * 2 + 1 - 0.5) / 2
            backward(y.sum())
        np.testing.assert_allclose(x.grad, [1.0])


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert ops.sigmoid(t64([0.0])).data[0] == 0.5

    def test_sigmoid_extremes_stable(self):
        y = ops.sigmoid(t64([-500.0, 500.0])).data
        assert np.all(np.isfinite(y))
        assert y[0] < 1e-100 and y[1] == 1.0

    def test_softplus_at_zero_is_log2(self):
        np.testing.assert_allclose(ops.softplus(t64([0.0])).data[0], np.log(2.0), rtol=1e-15)

    def test_softplus_large_is_identity_like(self):
        np.testing.assert_allclose(ops.softplus(t64([40.0])).data[0], 40.0, rtol=1e-15)

    def test_relu_values_and_subgradient(self):
        x = t64([-2.0, 0.0, 3.0], requires_grad=True)
        with Tape():
            y = ops.relu(x)
            backward(ops.sum_(y))
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 3.0])
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_unary_gradchecks(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(0.2, 0.8, size=(11,)), dtype=np.float64, requires_grad=True)
        for fn in (ops.sigmoid, ops.softplus, ops.exp, ops.sin, ops.cos):
            rep = gradcheck(lambda a: ops.sum_(ops.mul(fn(a), fn(a))), (x,))
            assert rep.ok, f"{fn.__name__}: {rep.max_rel_err}"

    def test_sqrt_gradcheck_positive_domain(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.uniform(0.5, 2.0, size=(9,)), dtype=np.float64, requires_grad=True)
        rep = gradcheck(lambda a: ops.sum_(ops.sqrt(a)), (x,))
        assert rep.ok

    def test_div_gradcheck(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(6,)), dtype=np.float64, requires_grad=True)
        b = Tensor(rng.uniform(0.5, 2.0, size=(6,)), dtype=np.float64, requires_grad=True)
        rep = gradcheck(lambda x, y: ops.sum_(ops.div(x, y)), (a, b))
        assert rep.ok

    def test_broadcast_gradient_shapes(self):
        a = t64(np.ones((3, 4)), requires_grad=True)
        b = t64(np.ones((4,)), requires_grad=True)
        with Tape():
            backward(ops.sum_(ops.mul(a, b)))
        assert a.grad.shape == (3, 4)
        assert b.grad.shape == (4,)
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


class TestReductions:
    def test_mean_gradient(self):
        x = t64(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape():
            backward(ops.mean(x))
        np.testing.assert_allclose(x.grad, np.full((2, 3), 1.0 / 6))

    def test_axis_sum_keepdims(self):
        x = t64(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape():
            y = ops.sum_(x, axis=1, keepdims=True)
            backward(ops.sum_(y))
        assert y.shape == (2, 1)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_max_routes_to_first_tie(self):
        x = t64([[1.0, 5.0, 5.0]], requires_grad=True)
        with Tape():
            backward(ops.sum_(ops.max_along(x, axis=1)))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_max_gradcheck_no_ties(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.permutation(24).reshape(4, 6) * 0.37, dtype=np.float64,
                   requires_grad=True)
        rep = gradcheck(lambda a: ops.sum_(ops.max_along(a, axis=1)), (x,))
        assert rep.ok


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


class TestShapeOps:
    def test_reshape_transpose_flip_round_trip(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 3, 4)), dtype=np.float64, requires_grad=True)
        with Tape():
            y = ops.flip(ops.transpose(ops.reshape(x, (6, 4)), (1, 0)), 0)
            backward(ops.sum_(ops.mul(y, y)))
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_concat_splits_gradient(self):
        a = t64([1.0, 2.0], requires_grad=True)
        b = t64([3.0], requires_grad=True)
        with Tape():
            y = ops.concat([a, b], axis=0)
            backward(ops.sum_(ops.mul(y, t64([1.0, 10.0, 100.0]))))
        np.testing.assert_array_equal(a.grad, [1.0, 10.0])
        np.testing.assert_array_equal(b.grad, [100.0])

    def test_slice_scatter_gradient(self):
        x = t64(np.arange(10.0), requires_grad=True)
        with Tape():
            backward(ops.sum_(ops.slice_(x, slice(2, 5))))
        expect = np.zeros(10)
        expect[2:5] = 1.0
        np.testing.assert_array_equal(x.grad, expect)

    def test_pad2d_reflect_values(self):
        x = t64(np.arange(9.0).reshape(1, 1, 3, 3))
        y = ops.pad2d(x, (1, 1, 1, 1), mode="reflect")
        # row -1 reflects row 1, column -1 reflects column 1
        assert y.data[0, 0, 0, 1] == x.data[0, 0, 1, 0]  # corner-adjacent
        assert y.data[0, 0, 1, 0] == x.data[0, 0, 0, 1]
        assert y.shape == (1, 1, 5, 5)

    def test_pad2d_zero_values(self):
        x = t64(np.ones((1, 1, 2, 2)))
        y = ops.pad2d(x, (1, 0, 0, 2), mode="zero")
        assert y.shape == (1, 1, 3, 4)
        assert y.data[0, 0, 0].sum() == 0.0
        assert y.data[0, 0, :, 2:].sum() == 0.0

    def test_pad2d_gradchecks(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(1, 2, 4, 5)), dtype=np.float64, requires_grad=True)
        for mode in ("reflect", "zero"):
            rep = gradcheck(
                lambda a: ops.sum_(ops.mul(ops.pad2d(a, (2, 1, 1, 2), mode=mode),
                                           ops.pad2d(a, (2, 1, 1, 2), mode=mode))),
                (x,),
            )
            assert rep.ok, mode

    def test_pixel_shuffle_rearranges(self):
        x = t64(np.arange(16.0).reshape(1, 4, 2, 2), requires_grad=True)
        with Tape():
            y = ops.pixel_shuffle(x, 2)
            backward(ops.sum_(ops.mul(y, y)))
        assert y.shape == (1, 1, 4, 4)
        # output (0,0) block top-left comes from channel 0
        assert y.data[0, 0, 0, 0] == x.data[0, 0, 0, 0]
        assert y.data[0, 0, 0, 1] == x.data[0, 1, 0, 0]
        assert y.data[0, 0, 1, 0] == x.data[0, 2, 0, 0]
        np.testing.assert_allclose(x.grad, 2 * x.data)


# ---------------------------------------------------------------------------
# linear / conv
# ---------------------------------------------------------------------------


class TestLinearConv:
    def test_linear_matches_matmul(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(5, 3)), dtype=np.float64, requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3)), dtype=np.float64, requires_grad=True)
        b = Tensor(rng.normal(size=(4,)), dtype=np.float64, requires_grad=True)
        y = ops.linear(x, w, b)
        np.testing.assert_allclose(y.data, x.data @ w.data.T + b.data)
        rep = gradcheck(lambda *args: ops.sum_(ops.mul(ops.linear(*args),
                                                       ops.linear(*args))), (x, w, b))
        assert rep.ok

    def test_identity_kernel_preserves_input(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(1, 1, 6, 7)), dtype=np.float64)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        y = ops.conv2d(x, Tensor(w, dtype=np.float64))
        np.testing.assert_allclose(y.data, x.data)

    def test_box_filter_hand_value(self):
        x = Tensor(np.ones((1, 1, 3, 3)), dtype=np.float64)
        w = Tensor(np.full((1, 1, 3, 3), 1.0 / 9), dtype=np.float64)
        y = ops.conv2d(x, w, padding="zero")
        # center of an all-ones image under zero padding: full mass
        np.testing.assert_allclose(y.data[0, 0, 1, 1], 1.0)
        # corner sees only a 2x2 neighborhood
        np.testing.assert_allclose(y.data[0, 0, 0, 0], 4.0 / 9)

    def test_stride2_output_size(self):
        x = Tensor(np.zeros((1, 2, 4, 4)), dtype=np.float64)
        w = Tensor(np.zeros((3, 2, 3, 3)), dtype=np.float64)
        y = ops.conv2d(x, w, stride=2)
        assert y.shape == (1, 3, 2, 2)

    def test_conv_shape_errors(self):
        x = Tensor(np.zeros((1, 2, 4, 4)), dtype=np.float64)
        with pytest.raises(ContractViolation):
            ops.conv2d(x, Tensor(np.zeros((3, 2, 2, 2)), dtype=np.float64))
        with pytest.raises(ContractViolation):
            ops.conv2d(x, Tensor(np.zeros((3, 5, 3, 3)), dtype=np.float64))
        with pytest.raises(ContractViolation):
            ops.conv2d(x, Tensor(np.zeros((3, 2, 3, 3)), dtype=np.float64), stride=3)

    def test_conv_gradcheck_all_paths(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(2, 3, 6, 7)) * 0.4, dtype=np.float64, requires_grad=True)
        for out_ch, k, stride in ((4, 3, 1), (2, 1, 1), (4, 3, 2)):
            w = Tensor(rng.normal(size=(out_ch, 3, k, k)) * 0.3, dtype=np.float64,
                       requires_grad=True)
            b = Tensor(rng.normal(size=(out_ch,)) * 0.2, dtype=np.float64,
                       requires_grad=True)
            rep = gradcheck(
                lambda *args: ops.sum_(ops.mul(ops.conv2d(*args, stride=stride),
                                               ops.conv2d(*args, stride=stride))),
                (x, w, b),
            )
            assert rep.ok, f"k={k} stride={stride}: {rep.max_rel_err}"

    def test_depthwise_matches_grouped_reference(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(1, 3, 5, 5)), dtype=np.float64)
        w = Tensor(rng.normal(size=(3, 1, 3, 3)), dtype=np.float64)
        y = ops.depthwise_conv2d(x, w)
        for c in range(3):
            ref = ops.conv2d(
                Tensor(x.data[:, c : c + 1], dtype=np.float64),
                Tensor(w.data[c : c + 1], dtype=np.float64),
            )
            np.testing.assert_allclose(y.data[:, c], ref.data[:, 0], atol=1e-12)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


class TestLayerNorm:
    def test_pinned_three_point(self):
        x = t64([[1.0, 2.0, 3.0]])
        g = t64(np.ones(3))
        b = t64(np.zeros(3))
        y = ops.layer_norm(x, g, b, axis=-1)
        np.testing.assert_allclose(
            y.data[0], [-1.224744, 0.0, 1.224744], atol=1e-5
        )

    def test_constant_input_maps_to_beta(self):
        x = t64(np.full((2, 4), 7.0))
        g = t64(np.ones(4))
        b = t64(np.full(4, 0.25))
        y = ops.layer_norm(x, g, b, axis=-1)
        np.testing.assert_allclose(y.data, np.full((2, 4), 0.25), atol=1e-3)

    def test_gradcheck_including_affine(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(3, 5)), dtype=np.float64, requires_grad=True)
        g = Tensor(rng.uniform(0.5, 1.5, size=(5,)), dtype=np.float64, requires_grad=True)
        b = Tensor(rng.normal(size=(5,)), dtype=np.float64, requires_grad=True)
        rep = gradcheck(
            lambda *args: ops.sum_(ops.mul(ops.layer_norm(*args), ops.layer_norm(*args))),
            (x, g, b),
        )
        assert rep.ok

    def test_channel_axis_mode(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), dtype=np.float64)
        g = Tensor(np.ones(3), dtype=np.float64)
        b = Tensor(np.zeros(3), dtype=np.float64)
        y = ops.layer_norm(x, g, b, axis=1)
        mu = y.data.mean(axis=1)
        np.testing.assert_allclose(mu, np.zeros_like(mu), atol=1e-12)


# ---------------------------------------------------------------------------
# spectral ops
# ---------------------------------------------------------------------------


class TestSpectral:
    def test_fft_round_trip_small(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.normal(size=(2, 3, 16, 16)), dtype=np.float64)
        re, im = ops.fft2(x)
        back = ops.ifft2_real(re, im)
        assert np.abs(back.data - x.data).max() <= 1e-9

    def test_fft_dc_bin_is_sum(self):
        x = Tensor(np.full((1, 1, 4, 4), 0.37), dtype=np.float64)
        re, im = ops.fft2(x)
        np.testing.assert_allclose(re.data[0, 0, 0, 0], 0.37 * 16, rtol=1e-12)
        np.testing.assert_allclose(im.data[0, 0, 0, 0], 0.0, atol=1e-12)

    def test_fft_gradcheck(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(1, 2, 4, 6)) * 0.3, dtype=np.float64,
                   requires_grad=True)

        def fn(a):
            re, im = ops.fft2(a)
            return ops.mul(ops.add(ops.sum_(ops.mul(re, re)), ops.sum_(ops.mul(im, im))),
                           1e-2)

        rep = gradcheck(fn, (x,))
        assert rep.ok

    def test_ifft_gradcheck(self):
        rng = np.random.default_rng(14)
        re = Tensor(rng.normal(size=(1, 1, 4, 4)), dtype=np.float64, requires_grad=True)
        im = Tensor(rng.normal(size=(1, 1, 4, 4)), dtype=np.float64, requires_grad=True)
        rep = gradcheck(
            lambda r, i: ops.sum_(ops.mul(ops.ifft2_real(r, i), ops.ifft2_real(r, i))),
            (re, im),
        )
        assert rep.ok

    def test_complex_abs_angle_known_values(self):
        re = t64([[3.0, 0.0], [-1.0, 1.0]])
        im = t64([[4.0, 2.0], [0.0, 1.0]])
        np.testing.assert_allclose(ops.complex_abs(re, im).data,
                                   [[5.0, 2.0], [1.0, np.sqrt(2)]])
        ang = ops.complex_angle(re, im).data
        np.testing.assert_allclose(ang[0], [np.arctan2(4, 3), np.pi / 2])
        np.testing.assert_allclose(ang[1, 1], np.pi / 4)

    def test_abs_angle_gradcheck(self):
        rng = np.random.default_rng(15)
        re = Tensor(rng.uniform(0.5, 1.5, size=(3, 4)), dtype=np.float64,
                    requires_grad=True)
        im = Tensor(rng.uniform(0.5, 1.5, size=(3, 4)), dtype=np.float64,
                    requires_grad=True)
        for fn in (ops.complex_abs, ops.complex_angle):
            rep = gradcheck(lambda r, i: ops.sum_(ops.mul(fn(r, i), fn(r, i))), (re, im))
            assert rep.ok, fn.__name__


# ---------------------------------------------------------------------------
# gradcheck plumbing
# ---------------------------------------------------------------------------


class TestGradcheckHarness:
    def test_detects_wrong_gradient(self):
        from msmamba.tensor import record

        def bad_double(a):
            out = a.data * 2.0

            def bwd(g):
                return (g * 3.0,)  # deliberately wrong

            return record("bad_double", (a,), out, bwd)

        x = Tensor(np.ones(3), dtype=np.float64, requires_grad=True)
        rep = gradcheck(lambda a: ops.sum_(bad_double(a)), (x,))
        assert not rep.ok
        assert rep.max_rel_err > 0.1

    def test_reports_per_input(self):
        a = Tensor(np.ones(2), dtype=np.float64, requires_grad=True)
        b = Tensor(np.ones(2), dtype=np.float64, requires_grad=True)
        rep = gradcheck(lambda x, y: ops.sum_(ops.mul(x, y)), (a, b),
                        names=("left", "right"))
        assert rep.ok
        assert set(rep.per_input) == {"left", "right"}
