import math

import numpy as np
import pytest

from featref import autodiff as ad
from featref.errors import ConfigError, DataError, ShapeError, UsageError

from gradcheck import assert_grads_close, numeric_grad


def t(data, req=False):
    return ad.Tensor(np.asarray(data, dtype=np.float64), requires_grad=req)


def grad_of(build_loss, x: ad.Tensor):
    """Analytic gradient of build_loss() w.r.t. x via one tape pass."""
    x.zero_grad()
    with ad.Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    return x.grad


class TestConv2d:
    def test_one_by_one_identity(self):
        x = t(np.random.default_rng(0).random((2, 1, 4, 4)))
        w = t(np.ones((1, 1, 1, 1)))
        b = t(np.zeros(1))
        y = ad.conv2d(x, w, b, "same")
        assert np.array_equal(y.data, x.data)

    def test_zero_input_gives_bias(self):
        x = t(np.zeros((1, 2, 5, 5)))
        w = t(np.random.default_rng(1).random((3, 2, 3, 3)))
        b = t([0.5, -1.0, 2.0])
        y = ad.conv2d(x, w, b, "same")
        for f, bv in enumerate([0.5, -1.0, 2.0]):
            assert np.all(y.data[:, f] == bv)

    def test_valid_padding_shrinks(self):
        x = t(np.random.default_rng(2).random((1, 1, 6, 6)))
        w = t(np.random.default_rng(3).random((1, 1, 3, 3)))
        y = ad.conv2d(x, w, t(np.zeros(1)), "valid")
        assert y.shape == (1, 1, 4, 4)

    def test_channel_mismatch_names_both_shapes(self):
        x = t(np.zeros((1, 2, 4, 4)))
        w = t(np.zeros((1, 3, 3, 3)))
        with pytest.raises(ShapeError) as exc:
            ad.conv2d(x, w, t(np.zeros(1)))
        assert "(1, 2, 4, 4)" in str(exc.value) and "(1, 3, 3, 3)" in str(exc.value)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            ad.conv2d(t(np.zeros((1, 1, 4, 4))), t(np.zeros((1, 1, 2, 2))), t(np.zeros(1)))

    @pytest.mark.parametrize("padding", ["same", "valid"])
    def test_gradients_match_finite_differences(self, padding):
        rng = np.random.default_rng(7)
        x0 = rng.standard_normal((1, 1, 5, 5))
        w0 = rng.standard_normal((1, 1, 3, 3))
        b0 = rng.standard_normal(1)

        for name, arr in [("input", x0), ("kernel", w0), ("bias", b0)]:
            holders = {"input": x0, "kernel": w0, "bias": b0}

            def f(v):
                vals = dict(holders)
                vals[name] = v
                y = ad.conv2d(t(vals["input"]), t(vals["kernel"]), t(vals["bias"]), padding)
                return float(y.data.sum() + (y.data ** 2).sum())

            xt = t(x0, req=name == "input")
            wt = t(w0, req=name == "kernel")
            bt = t(b0, req=name == "bias")
            target = {"input": xt, "kernel": wt, "bias": bt}[name]
            analytic = grad_of(
                lambda: ad.add(ad.sum_all(ad.conv2d(xt, wt, bt, padding)),
                               ad.sum_all(ad.mul(ad.conv2d(xt, wt, bt, padding),
                                                 ad.conv2d(xt, wt, bt, padding)))),
                target)
            assert_grads_close(analytic, numeric_grad(f, arr), what=f"conv2d {name} ({padding})")


class TestMaxPool:
    def test_constant_input(self):
        y = ad.maxpool2d(t(np.full((1, 1, 4, 4), 3.25)))
        assert y.shape == (1, 1, 2, 2)
        assert np.all(y.data == 3.25)

    def test_simple_window(self):
        y = ad.maxpool2d(t([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert y.data.reshape(()) == 4.0

    def test_odd_input_rejected(self):
        with pytest.raises(ShapeError):
            ad.maxpool2d(t(np.zeros((1, 1, 5, 4))))

    def test_tie_routes_to_first_element(self):
        x = t(np.zeros((1, 1, 2, 2)), req=True)
        g = grad_of(lambda: ad.sum_all(ad.maxpool2d(x)), x)
        expected = np.zeros((1, 1, 2, 2))
        expected[0, 0, 0, 0] = 1.0
        assert np.array_equal(g, expected)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        x0 = rng.standard_normal((2, 2, 4, 4))
        x = t(x0, req=True)
        analytic = grad_of(lambda: ad.sum_all(ad.maxpool2d(x)), x)

        def f(v):
            return float(ad.maxpool2d(t(v)).data.sum())

        numeric = numeric_grad(f, x0)
        assert_grads_close(analytic, numeric, what="maxpool2d")
        # the gradient is an indicator of each window argmax
        assert set(np.unique(analytic)) <= {0.0, 1.0}

    def test_same_padding_stride_one(self):
        x = t(np.random.default_rng(4).random((1, 1, 5, 5)))
        y = ad.maxpool2d(x, window=3, stride=1, padding="same")
        assert y.shape == (1, 1, 5, 5)
        assert y.data[0, 0, 2, 2] == x.data[0, 0, 1:4, 1:4].max()


class TestDense:
    def test_identity_weight(self):
        x = t(np.random.default_rng(5).random((3, 4)))
        y = ad.dense(x, t(np.eye(4)), t(np.zeros(4)))
        assert np.array_equal(y.data, x.data)

    def test_hand_arithmetic(self):
        y = ad.dense(t([[1.0, 2.0]]), t([[1.0, 0.0], [0.0, 1.0]]), t([3.0, 3.0]))
        assert np.array_equal(y.data, [[4.0, 5.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            ad.dense(t(np.zeros((2, 3))), t(np.zeros((4, 2))), t(np.zeros(2)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(13)
        x0, w0, b0 = rng.standard_normal((2, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)
        xt, wt, bt = t(x0, True), t(w0, True), t(b0, True)

        def build():
            y = ad.dense(xt, wt, bt)
            return ad.sum_all(ad.mul(y, y))

        for name, holder, arr in [("x", xt, x0), ("w", wt, w0), ("b", bt, b0)]:
            analytic = grad_of(build, holder)

            def f(v, _name=name):
                vals = {"x": x0, "w": w0, "b": b0, _name: v}
                y = ad.dense(t(vals["x"]), t(vals["w"]), t(vals["b"]))
                return float((y.data ** 2).sum())

            assert_grads_close(analytic, numeric_grad(f, arr), what=f"dense {name}")


class TestActivations:
    def test_softmax_equal_logits(self):
        y = ad.softmax(t(np.zeros((2, 5))), axis=1)
        assert np.allclose(y.data, 0.2)

    def test_softmax_closed_form(self):
        y = ad.softmax(t([[0.0, math.log(2.0)]]), axis=1)
        assert np.allclose(y.data, [[1 / 3, 2 / 3]], atol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(17)
        y = ad.softmax(t(rng.standard_normal((6, 9)) * 10), axis=1)
        assert np.allclose(y.data.sum(axis=1), 1.0, atol=1e-6)
        assert np.all((y.data >= 0) & (y.data <= 1))

    def test_softmax_invalid_axis(self):
        with pytest.raises(ShapeError):
            ad.softmax(t(np.zeros((2, 2))), axis=5)

    def test_sigmoid_and_relu_values(self):
        assert ad.sigmoid(t([0.0])).data[0] == 0.5
        assert ad.relu(t([-1.0])).data[0] == 0.0
        assert ad.relu(t([2.5])).data[0] == 2.5

    def test_sigmoid_extreme_inputs_finite(self):
        y = ad.sigmoid(t([-500.0, 500.0]))
        assert np.all(np.isfinite(y.data))

    @pytest.mark.parametrize("op,axis", [("relu", None), ("sigmoid", None), ("softmax", 1)])
    def test_gradients_match_finite_differences(self, op, axis):
        rng = np.random.default_rng(19)
        x0 = rng.standard_normal((3, 4))

        def apply(v):
            xt = t(v) if not isinstance(v, ad.Tensor) else v
            if op == "softmax":
                return ad.softmax(xt, axis=axis)
            return getattr(ad, op)(xt)

        xt = t(x0, req=True)
        analytic = grad_of(lambda: ad.sum_all(ad.mul(apply(xt), apply(xt))), xt)
        numeric = numeric_grad(lambda v: float((apply(v).data ** 2).sum()), x0)
        assert_grads_close(analytic, numeric, what=op)


class TestCombine:
    def test_add_single_tensor_identity(self):
        x = t([1.0, 2.0, 3.0])
        y = ad.add(x)
        assert np.array_equal(y.data, x.data)

    def test_add_hand_arithmetic(self):
        y = ad.add(t([1.0, 2.0]), t([0.0, 1.0]), t([1.0, 0.0]))
        assert np.array_equal(y.data, [2.0, 3.0])

    def test_mul_hand_arithmetic(self):
        y = ad.mul(t([1.0, 2.0, 3.0]), t([0.0, 1.0, 2.0]))
        assert np.array_equal(y.data, [0.0, 2.0, 6.0])

    def test_mul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.mul(t([1.0, 2.0]), t([1.0, 2.0, 3.0]))

    def test_concat_then_split_roundtrip(self):
        rng = np.random.default_rng(23)
        parts = [rng.standard_normal((2, k)) for k in (1, 3, 2)]
        joined = ad.concat([t(p) for p in parts], axis=1)
        back = ad.split(joined, [1, 3, 2], axis=1)
        for orig, piece in zip(parts, back):
            assert np.array_equal(orig, piece.data)

    def test_concat_off_axis_mismatch(self):
        with pytest.raises(ShapeError):
            ad.concat([t(np.zeros((2, 2))), t(np.zeros((3, 2)))], axis=1)

    def test_split_gradient_flows(self):
        x = t(np.arange(6.0).reshape(2, 3), req=True)
        def build():
            a, b = ad.split(x, [1, 2], axis=1)
            return ad.add(ad.sum_all(a), ad.sum_all(ad.mul(b, b)))
        analytic = grad_of(build, x)
        expected = np.array([[1.0, 2.0, 4.0], [1.0, 8.0, 10.0]])
        assert np.allclose(analytic, expected)

    def test_flatten_roundtrip_gradient(self):
        x = t(np.random.default_rng(29).random((2, 3, 2)), req=True)
        g = grad_of(lambda: ad.sum_all(ad.flatten(x)), x)
        assert np.array_equal(g, np.ones_like(x.data))

    def test_dropout_eval_mode_is_identity(self):
        x = t(np.random.default_rng(31).random((4, 4)))
        y = ad.dropout(x, 0.5, training=False)
        assert y is x

    def test_dropout_bad_probability(self):
        with pytest.raises(ConfigError):
            ad.dropout(t([1.0]), 1.0, training=True, rng=np.random.default_rng(0))

    def test_dropout_training_scales_survivors(self):
        x = t(np.ones((1, 1000)))
        y = ad.dropout(x, 0.5, training=True, rng=np.random.default_rng(3))
        vals = set(np.unique(y.data))
        assert vals <= {0.0, 2.0}
        assert 0.3 < (y.data == 0).mean() < 0.7

    def test_dropout_training_needs_rng(self):
        with pytest.raises(UsageError):
            ad.dropout(t([1.0]), 0.5, training=True)


class TestLosses:
    def test_bce_matching_probs_near_zero(self):
        y = np.array([1.0, 0.0, 1.0])
        loss = ad.binary_cross_entropy(t(y.copy()), y)
        assert loss.item() <= 1e-6

    def test_bce_half_probs_is_ln2(self):
        for labels in ([1.0, 0.0, 1.0, 1.0], [0.0, 0.0], [1.0]):
            loss = ad.binary_cross_entropy(t([0.5] * len(labels)), np.array(labels))
            assert abs(loss.item() - math.log(2.0)) < 1e-12

    def test_bce_sum_reduction(self):
        loss = ad.binary_cross_entropy(t([0.5, 0.5]), np.array([1.0, 0.0]), reduction="sum")
        assert abs(loss.item() - 2 * math.log(2.0)) < 1e-12

    def test_softmax_ce_uniform_logits_is_lnk(self):
        loss = ad.softmax_cross_entropy(t(np.zeros((4, 3))), np.array([0, 1, 2, 0]))
        assert abs(loss.item() - math.log(3.0)) < 1e-12

    def test_softmax_ce_invalid_label(self):
        with pytest.raises(DataError):
            ad.softmax_cross_entropy(t(np.zeros((2, 3))), np.array([0, 3]))

    def test_bce_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(37)
        p0 = rng.uniform(0.05, 0.95, size=6)
        y = (rng.random(6) > 0.5).astype(float)
        pt = t(p0, req=True)
        analytic = grad_of(lambda: ad.binary_cross_entropy(pt, y), pt)
        numeric = numeric_grad(lambda v: float(ad.binary_cross_entropy(t(v), y).data), p0)
        assert_grads_close(analytic, numeric, what="bce")

    def test_softmax_ce_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(41)
        z0 = rng.standard_normal((3, 4))
        y = np.array([0, 3, 2])
        zt = t(z0, req=True)
        analytic = grad_of(lambda: ad.softmax_cross_entropy(zt, y), zt)
        numeric = numeric_grad(lambda v: float(ad.softmax_cross_entropy(t(v), y).data), z0)
        assert_grads_close(analytic, numeric, what="softmax_ce")


class TestBackward:
    def test_sum_gives_ones(self):
        x = t(np.random.default_rng(43).random((3, 3)), req=True)
        g = grad_of(lambda: ad.sum_all(x), x)
        assert np.array_equal(g, np.ones((3, 3)))

    def test_square_gives_two_x(self):
        x = t(np.random.default_rng(47).standard_normal(5), req=True)
        g = grad_of(lambda: ad.sum_all(ad.mul(x, x)), x)
        assert np.allclose(g, 2 * x.data)

    def test_non_scalar_loss_rejected(self):
        x = t(np.zeros((2, 2)), req=True)
        with ad.Tape() as tape:
            y = ad.relu(x)
            with pytest.raises(UsageError):
                tape.backward(y)

    def test_backward_without_tape_rejected(self):
        with pytest.raises(UsageError):
            ad.backward(t(np.zeros(()), req=True))

    def test_repeated_backward_accumulates(self):
        x = t(np.array([1.0, 2.0]), req=True)
        with ad.Tape() as tape:
            loss = ad.sum_all(ad.mul(x, x))
            tape.backward(loss)
            first = x.grad.copy()
            tape.backward(loss)
        assert np.allclose(x.grad, 2 * first)

    def test_grads_skip_non_differentiable_leaves(self):
        x = t(np.ones(3), req=True)
        c = t(np.full(3, 2.0), req=False)
        with ad.Tape() as tape:
            loss = ad.sum_all(ad.mul(x, c))
            tape.backward(loss)
        assert np.allclose(x.grad, 2.0)
        assert c.grad is None

    def test_deterministic_backward_bits(self):
        def run():
            rng = np.random.default_rng(53)
            x = t(rng.standard_normal((4, 6)), req=True)
            w = t(rng.standard_normal((6, 3)), req=True)
            with ad.Tape() as tape:
                h = ad.relu(ad.dense(x, w, t(np.zeros(3))))
                loss = ad.softmax_cross_entropy(h, np.array([0, 1, 2, 1]))
                tape.backward(loss)
            return x.grad.copy(), w.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1[0], g2[0])
        assert np.array_equal(g1[1], g2[1])

    def test_nested_tapes_rejected(self):
        with ad.Tape():
            with pytest.raises(UsageError):
                with ad.Tape():
                    pass
