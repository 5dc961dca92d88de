"""Numeric kernels against hand-verified values, plus the grad_check
utility itself (it must both accept correct gradients and reject wrong
ones)."""

import numpy as np
import pytest

import mixformer as mx
from mixformer import autodiff as ad
from mixformer.mathcore import make_differentiable


class TestKernels:
    def test_rms_norm_hand_case(self):
        # [3,4]: root-mean-square is 5/sqrt(2), unit scale
        out = mx.rms_norm(np.array([3.0, 4.0]), mx.NormParams(np.ones(2), eps=0.0))
        np.testing.assert_allclose(out, [0.8485281374238570, 1.1313708498984760])

    def test_rms_norm_scale_applies(self):
        out = mx.rms_norm(
            np.array([3.0, 4.0]), mx.NormParams(np.array([2.0, 0.5]), eps=0.0)
        )
        np.testing.assert_allclose(out, [2 * 0.8485281374238570, 0.5 * 1.1313708498984760])

    def test_layer_norm_hand_case(self):
        # population variance, gain-only
        out = mx.layer_norm(np.array([2.0, 4.0]), mx.NormParams(np.ones(2), eps=0.0))
        np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-12)

    def test_swiglu_hand_case(self):
        # 1->1->1 with gate weight 2, up and down weights 1:
        # y = swish(2) * 1 = 2 * sigmoid(2)
        p = mx.FfnParams(
            gate=np.array([[2.0]]), up=np.array([[1.0]]), down=np.array([[1.0]])
        )
        out = mx.swiglu_ffn(np.array([1.0]), p)
        np.testing.assert_allclose(out, [1.7615941559557646])

    def test_swiglu_no_bias_maps_zero_to_zero(self):
        rng = np.random.default_rng(0)
        p = mx.FfnParams(
            gate=rng.standard_normal((5, 3)),
            up=rng.standard_normal((5, 3)),
            down=rng.standard_normal((3, 5)),
        )
        np.testing.assert_array_equal(mx.swiglu_ffn(np.zeros(3), p), np.zeros(3))

    def test_softmax_hand_case(self):
        np.testing.assert_allclose(
            mx.softmax(np.array([np.log(2.0), 0.0])), [2 / 3, 1 / 3]
        )

    def test_softmax_shift_invariant_at_extremes(self):
        out = mx.softmax(np.array([1000.0, 1000.0 + np.log(3.0)]))
        np.testing.assert_allclose(out, [0.25, 0.75], rtol=1e-12)

    def test_norm_params_validation(self):
        with pytest.raises(mx.ShapeError):
            mx.NormParams(np.ones((2, 2)), eps=1e-6)
        with pytest.raises(mx.ConfigError):
            mx.NormParams(np.ones(2), eps=-1.0)

    def test_ffn_params_validation(self):
        with pytest.raises(mx.ShapeError):
            mx.FfnParams(
                gate=np.ones((4, 3)), up=np.ones((5, 3)), down=np.ones((3, 4))
            )

    def test_non_finite_rejected(self):
        with pytest.raises(mx.NumericError):
            mx.softmax(np.array([np.nan, 0.0]))


class TestGlorot:
    def test_bounds_and_determinism(self):
        rng = np.random.default_rng(3)
        w = mx.glorot_uniform(rng, (40, 30), fan_in=30, fan_out=40)
        limit = np.sqrt(6.0 / 70.0)
        assert w.shape == (40, 30)
        assert np.max(np.abs(w)) <= limit
        w2 = mx.glorot_uniform(np.random.default_rng(3), (40, 30), 30, 40)
        np.testing.assert_array_equal(w, w2)


class TestGradCheckUtility:
    def test_accepts_correct_gradient(self):
        op = make_differentiable(
            lambda a, b: ad.matmul(ad.swish(a), b),
            [np.ones((3, 4)), np.ones((4, 2))],
            name="swish_matmul",
        )
        rng = np.random.default_rng(1)
        rep = mx.grad_check(op, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))])
        assert rep.passed
        assert rep.max_rel_error < 1e-5

    def test_rejects_wrong_gradient(self):
        def forward(x):
            return x * x

        def backward(u, x):
            return (u * x,)  # missing the factor of 2

        op = mx.DifferentiableOp(forward=forward, backward=backward, flops=0, name="bad")
        rep = mx.grad_check(op, [np.array([1.0, 2.0, 3.0])])
        assert not rep.passed

    def test_flops_measured_from_trace(self):
        op = make_differentiable(
            lambda a, b: ad.matmul(a, b), [np.ones((3, 4)), np.ones((4, 2))]
        )
        assert op.flops == 2 * 3 * 2 * 4

    def test_composition_flops_additive(self):
        a, b, c = np.ones((2, 3)), np.ones((3, 5)), np.ones((5, 4))
        f = make_differentiable(lambda x, y: ad.matmul(x, y), [a, b])
        g = make_differentiable(lambda x, y: ad.matmul(x, y), [np.ones((2, 5)), c])
        h = make_differentiable(lambda x, y, z: ad.matmul(ad.matmul(x, y), z), [a, b, c])
        assert h.flops == f.flops + g.flops

    def test_max_coords_subsampling(self):
        op = make_differentiable(lambda x: ad.swish(x), [np.ones((10, 10))])
        rep = mx.grad_check(op, [np.random.default_rng(0).standard_normal((10, 10))],
                            max_coords=7)
        assert rep.n_coordinates == 7
        assert rep.passed
