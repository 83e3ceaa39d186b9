import math

import numpy as np
import pytest

from refedit import ops
from refedit.engine import GradTape, ShapeError, Tensor, backward, no_grad
from refedit.gradcheck import check_gradients
from refedit.optim import adam_update, init_adam_state
from refedit.pipeline import mse
from refedit.scaling import apply_adaptive_scaling, compute_scale_map, init_scaling_params, residual_scale


def silu(x):
    return x / (1.0 + math.exp(-x))


class TestComputeScaleMap:
    def test_zero_init_gives_alpha_exactly_zero(self, rng):
        params = init_scaling_params(3, rng)
        ref = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
        tar = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
        scale = compute_scale_map(ref, tar, params)
        assert np.array_equal(scale.alpha.data, np.zeros((2, 3, 4, 4)))
        assert np.array_equal(scale.factor.data, np.ones((2, 3, 4, 4)))

    def test_alpha_strictly_bounded(self, rng):
        params = init_scaling_params(2, rng)
        for p in params.values():
            p.data = rng.normal(0, 2.0, p.shape)  # large weights push tanh to saturation
        ref = Tensor(rng.uniform(-5, 5, (4, 2, 6, 6)))
        tar = Tensor(rng.uniform(-5, 5, (4, 2, 6, 6)))
        alpha = compute_scale_map(ref, tar, params).alpha.data
        assert np.abs(alpha).max() < 1.0

    def test_scalar_oracle_1x1(self, rng):
        # 1x1 spatial input: only the 3x3 kernels' center taps touch data, so
        # the whole net reduces to scalar arithmetic we can evaluate by hand.
        params = init_scaling_params(1, rng)
        w1 = rng.normal(0, 0.5, 2)
        b1 = rng.normal()
        w2 = rng.normal(0, 0.5)
        b2 = rng.normal()
        params["c1.w"].data[0, :, 1, 1] = w1
        params["c1.b"].data[0] = b1
        params["c2.w"].data[0, 0, 1, 1] = w2
        params["c2.b"].data[0] = b2
        fr, ft = 0.7, -0.3
        scale = compute_scale_map(Tensor([[[[fr]]]]), Tensor([[[[ft]]]]), params)
        expected = math.tanh(w2 * silu(w1[0] * fr + w1[1] * ft + b1) + b2)
        assert abs(scale.alpha.item() - expected) < 1e-12

    def test_spatial_mismatch_rejected(self, rng):
        params = init_scaling_params(2, rng)
        with pytest.raises(ShapeError):
            compute_scale_map(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 5, 5))), params)

    def test_single_channel_mode(self, rng):
        params = init_scaling_params(3, rng, per_channel=False)
        scale = compute_scale_map(Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.zeros((2, 3, 4, 4))), params)
        assert scale.alpha.shape == (2, 1, 4, 4)


class TestResidualScale:
    def test_zero_alpha_is_exact_identity(self, rng):
        ref = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
        out = residual_scale(ref, Tensor(np.zeros_like(ref.data)))
        assert np.array_equal(out.data, ref.data)

    def test_amplification_limit(self):
        alpha = Tensor(np.array([1.0 - 1e-12]))
        out = residual_scale(Tensor([2.0]), alpha)
        assert 3.999 < float(out.data[0]) < 4.0

    def test_suppression_limit(self):
        alpha = Tensor(np.array([-1.0 + 1e-12]))
        out = residual_scale(Tensor([2.0]), alpha)
        assert 0.0 < float(out.data[0]) < 1e-9

    def test_bidirectional_modulation(self, rng):
        ref = rng.uniform(0.1, 1.0, (3, 2, 4, 4)) * rng.choice([-1.0, 1.0], (3, 2, 4, 4))
        alpha = rng.uniform(-0.99, 0.99, (3, 2, 4, 4))
        out = residual_scale(Tensor(ref), Tensor(alpha)).data
        pos = alpha > 0
        neg = alpha < 0
        assert np.all(np.abs(out[pos]) > np.abs(ref[pos]))
        assert np.all(np.abs(out[neg]) < np.abs(ref[neg]))

    def test_factor_monotonic_in_preactivation(self):
        zs = np.linspace(-6, 6, 121)
        factors = 1.0 + ops.tanh_op(Tensor(zs)).data
        assert np.all(np.diff(factors) > 0)


class TestAdaptiveScalingForward:
    def test_fresh_init_is_passthrough(self, rng):
        params = init_scaling_params(2, rng)
        ref = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
        tar = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
        out = apply_adaptive_scaling(ref, tar, params)
        assert np.array_equal(out.data, ref.data)

    def test_gradcheck_scale_net_weights(self, rng):
        params = init_scaling_params(2, rng)
        for p in params.values():
            p.data += rng.normal(0, 0.1, p.shape)
        ref = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
        tar = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
        w = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
        res = check_gradients(
            "scale_weights",
            lambda: ops.sum(ops.mul(apply_adaptive_scaling(ref, tar, params), w)),
            list(params.values()),
        )
        assert res.passed and res.max_rel_err < 1e-4

    def test_training_suppresses_zeroed_channel(self):
        rng = np.random.default_rng(3)
        ref = Tensor(rng.uniform(0.2, 1.0, (2, 3, 4, 4)))
        tar = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
        target = ref.data.copy()
        target[:, 1] = 0.0
        target = Tensor(target)
        params = init_scaling_params(3, np.random.default_rng(1))
        opt = init_adam_state(params)
        for _ in range(400):
            with GradTape():
                loss = mse(apply_adaptive_scaling(ref, tar, params), target)
                for p in params.values():
                    p.grad = None
                backward(loss)
                adam_update(params, {k: p.grad for k, p in params.items()}, opt, lr=0.05)
        with no_grad():
            alpha = compute_scale_map(ref, tar, params).alpha.data
        assert alpha[:, 1].mean() < -0.5
