"""Tensor-core tests: forward values against naive-loop oracles, backward
against central finite differences."""
import math

import numpy as np
import pytest

from bagfuse.errors import ContractError, LabelError, ShapeError
from bagfuse.tensor import (
    GradientCheckReport,
    Tensor,
    accumulate_grad,
    backward,
    concat,
    conv2d,
    global_avg_pool,
    gradient_check,
    linear,
    log_softmax,
    new_tape,
    nll_loss,
    no_grad,
    record_op,
    relu,
    silu,
    tensor_sum,
)


def conv_reference(x, w, b, stride, padding):
    """Independent 6-nested-loop cross-correlation."""
    bs, cin, h, ww = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1
    xp = np.zeros((bs, cin, h + 2 * padding, ww + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + ww] = x
    out = np.zeros((bs, cout, oh, ow), dtype=np.float64)
    for n in range(bs):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc + b[o]
    return out


class TestConv2d:
    def test_zero_input(self):
        x = Tensor(np.zeros((2, 3, 4, 4)))
        w = Tensor(np.random.default_rng(0).normal(size=(5, 3, 3, 3)))
        b = Tensor(np.zeros(5))
        assert np.all(conv2d(x, w, b, padding=1).data == 0)

    def test_all_ones_3x3(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.ravel()[0] == pytest.approx(9.0)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0), (2, 2)])
    def test_matches_loop_reference(self, stride, padding):
        rng = np.random.default_rng(42 + stride * 10 + padding)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
        want = conv_reference(x, w, b, stride, padding)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))

    def test_non_positive_output(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros(1)))


class TestLinear:
    def test_identity(self):
        x = np.random.default_rng(1).normal(size=(3, 4))
        out = linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, x, atol=1e-7)

    def test_hand_case(self):
        out = linear(Tensor([[1.0, 2.0]]), Tensor([[1.0, 1.0], [0.0, 1.0]]), Tensor([0.5, -0.5]))
        np.testing.assert_allclose(out.data, [[3.5, 1.5]])

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(4, 8))
        w = rng.normal(size=(3, 8))
        b = rng.normal(size=3)
        want = np.zeros((4, 3))
        for i in range(4):
            for o in range(3):
                want[i, o] = sum(w[o, f] * x[i, f] for f in range(8)) + b[o]
        np.testing.assert_allclose(linear(Tensor(x), Tensor(w), Tensor(b)).data, want, atol=1e-5)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(4)))


class TestActivations:
    def test_fixed_points(self):
        assert silu(Tensor([0.0])).data[0] == 0.0
        assert relu(Tensor([0.0])).data[0] == 0.0

    def test_relu_definition(self):
        out = relu(Tensor([-3.0, 2.5]))
        np.testing.assert_allclose(out.data, [0.0, 2.5])

    def test_silu_scalar(self):
        # x * sigmoid(x) at 1.0, evaluated independently
        want = 1.0 / (1.0 + math.exp(-1.0))
        assert silu(Tensor([1.0], dtype=np.float64)).data[0] == pytest.approx(want, abs=1e-9)

    def test_silu_extreme_inputs_finite(self):
        out = silu(Tensor([-200.0, 0.0, 200.0], dtype=np.float64))
        assert np.all(np.isfinite(out.data))
        assert out.data[2] == pytest.approx(200.0)


class TestGlobalAvgPool:
    def test_constant(self):
        out = global_avg_pool(Tensor(np.full((2, 3, 4, 5), 2.5)))
        np.testing.assert_allclose(out.data, np.full((2, 3), 2.5))

    def test_mean_value(self):
        out = global_avg_pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        assert out.data[0, 0] == pytest.approx(2.5)

    def test_matches_loop(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 4, 4))
        want = np.zeros((2, 3))
        for n in range(2):
            for c in range(3):
                want[n, c] = x[n, c].sum() / 16.0
        np.testing.assert_allclose(global_avg_pool(Tensor(x)).data, want, atol=1e-6)


class TestLogSoftmax:
    def test_uniform_row(self):
        out = log_softmax(Tensor(np.full((1, 4), 3.25)))
        np.testing.assert_allclose(out.data, np.full((1, 4), math.log(0.25)), atol=1e-6)

    def test_stability(self):
        out = log_softmax(Tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] == pytest.approx(0.0, abs=1e-6)

    def test_reference_row(self):
        # extended-precision reference for the row (1, 2, 3)
        row = np.array([1.0, 2.0, 3.0], dtype=np.longdouble)
        lse = np.log(np.exp(row - row.max()).sum()) + row.max()
        want = (row - lse).astype(np.float64)
        got = log_softmax(Tensor([[1.0, 2.0, 3.0]], dtype=np.float64)).data[0]
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_exp_rows_sum_to_one(self):
        rng = np.random.default_rng(11)
        out = log_softmax(Tensor(rng.normal(size=(5, 7))))
        np.testing.assert_allclose(np.exp(out.data).sum(axis=1), np.ones(5), atol=1e-6)

    def test_shift_invariance(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(3, 5))
        a = log_softmax(Tensor(x, dtype=np.float64)).data
        b = log_softmax(Tensor(x + 7.5, dtype=np.float64)).data
        np.testing.assert_allclose(a, b, atol=1e-6)


class TestNllLoss:
    def test_perfect_prediction(self):
        lp = np.full((3, 4), -50.0)
        targets = [0, 2, 3]
        for i, t in enumerate(targets):
            lp[i, t] = 0.0
        assert nll_loss(Tensor(lp), targets).item() == pytest.approx(0.0)

    def test_uniform(self):
        lp = np.full((2, 10), math.log(0.1))
        assert nll_loss(Tensor(lp), [4, 9]).item() == pytest.approx(math.log(10), abs=1e-6)

    def test_matches_hand_mean(self):
        rng = np.random.default_rng(5)
        lp = rng.normal(size=(3, 4))
        targets = [1, 0, 3]
        want = -(lp[0, 1] + lp[1, 0] + lp[2, 3]) / 3.0
        assert nll_loss(Tensor(lp, dtype=np.float64), targets).item() == pytest.approx(want, abs=1e-6)

    def test_out_of_range_label(self):
        with pytest.raises(LabelError):
            nll_loss(Tensor(np.zeros((2, 3))), [0, 3])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
        with new_tape():
            backward(tensor_sum(x))
        np.testing.assert_allclose(x.grad, np.ones((2, 3)))

    def test_quadratic(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        with new_tape():
            backward((x * x).sum())
        np.testing.assert_allclose(x.grad, [2.0, -4.0])

    def test_accumulation_across_uses(self):
        # y = sum(x) + sum(x * 3) -> grad = 1 + 3
        x = Tensor([2.0, 5.0], requires_grad=True)
        with new_tape():
            backward((x.sum() + (x * 3.0).sum()))
        np.testing.assert_allclose(x.grad, [4.0, 4.0])

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with new_tape():
            y = x * 2.0
            with pytest.raises(ContractError):
                backward(y)

    def test_requires_no_tape_errors(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(x)

    def test_no_grad_buffer_without_requires_grad(self):
        x = Tensor([1.0, 2.0])
        with new_tape():
            y = x * 2.0
        assert x.grad is None and not y.requires_grad

    def test_tape_records_execution_order(self):
        x = Tensor([1.0], requires_grad=True)
        with new_tape() as tape:
            y = x * 2.0
            z = y + 1.0
            _ = z.sum()
        assert [r.op for r in tape.records] == ["mul", "add", "sum"]


class TestGradientCheck:
    def test_sum_is_exact_with_dyadic_step(self):
        x = Tensor(np.array([0.25, 1.5, -2.75]))
        report = gradient_check(tensor_sum, x, h=0.125, tol=1e-4)
        assert report.max_rel_error == 0.0
        assert report.passed

    def test_composed_graph_passes(self):
        rng = np.random.default_rng(9)
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.normal(size=3), requires_grad=True, dtype=np.float64)
        targets = np.array([0, 2])

        def f(z):
            return nll_loss(log_softmax(linear(z, w, b)), targets)

        report = gradient_check(f, Tensor(rng.normal(size=(2, 4))), h=1e-3, tol=1e-4)
        assert report.passed, report

    def test_corrupted_backward_detected(self):
        def broken_square(x):
            out = Tensor(x.data * x.data)
            # wrong rule on purpose: 3x instead of 2x
            record_op("broken_square", (x,), out, lambda g: accumulate_grad(x, g * 3.0 * x.data))
            return out

        report = gradient_check(lambda z: tensor_sum(broken_square(z)), Tensor([0.5, 1.5]), tol=1e-4)
        assert not report.passed
        assert report.max_rel_error > 1e-4

    def test_non_scalar_function_rejected(self):
        with pytest.raises(ContractError):
            gradient_check(lambda z: z * 2.0, Tensor([1.0, 2.0]))

    @pytest.mark.parametrize("seed", range(5))
    def test_per_op_fd_agreement(self, seed):
        rng = np.random.default_rng(seed)
        w = Tensor(rng.normal(size=(2, 3, 3, 3)) * 0.5, requires_grad=True, dtype=np.float64)
        b = Tensor(rng.normal(size=2) * 0.1, requires_grad=True, dtype=np.float64)
        checks = [
            (lambda z: tensor_sum(conv2d(z, w, b, stride=1, padding=1)), rng.uniform(-1, 1, (1, 3, 4, 4))),
            (lambda z: tensor_sum(silu(z)), rng.uniform(-1, 1, (3, 3))),
            (lambda z: tensor_sum(global_avg_pool(z)), rng.uniform(-1, 1, (2, 2, 3, 3))),
            (lambda z: tensor_sum(log_softmax(z)), rng.uniform(-1, 1, (2, 4))),
        ]
        for f, x in checks:
            assert gradient_check(f, Tensor(x), h=1e-3, tol=1e-4).passed


class TestConcat:
    def test_two_blocks(self):
        out = concat([Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])])
        np.testing.assert_allclose(out.data, [[1.0, 2.0, 3.0, 4.0]])

    def test_single_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 3))
        np.testing.assert_allclose(concat([Tensor(x)]).data, x)

    def test_segments_recoverable(self):
        rng = np.random.default_rng(4)
        blocks = [rng.normal(size=(2, d)) for d in (2, 3, 1)]
        out = concat([Tensor(b) for b in blocks]).data
        assert out.shape == (2, 6)
        np.testing.assert_allclose(out[:, 0:2], blocks[0])
        np.testing.assert_allclose(out[:, 2:5], blocks[1])
        np.testing.assert_allclose(out[:, 5:6], blocks[2])

    def test_batch_mismatch(self):
        with pytest.raises(ShapeError):
            concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))])

    def test_backward_slices(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 3)), requires_grad=True)
        with new_tape():
            backward((concat([a, b]) * 2.0).sum())
        np.testing.assert_allclose(a.grad, np.full((2, 2), 2.0))
        np.testing.assert_allclose(b.grad, np.full((2, 3), 2.0))


def test_no_grad_blocks_recording():
    x = Tensor([1.0], requires_grad=True)
    with new_tape() as tape:
        with no_grad():
            _ = x * 2.0
        assert len(tape) == 0


def test_float32_default_dtype():
    t = Tensor([1, 2, 3])
    assert t.data.dtype == np.float32
    assert t.data.flags["C_CONTIGUOUS"]


def test_grad_shape_matches_data():
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    with new_tape():
        backward((x * x).sum())
    assert x.grad.shape == x.data.shape
