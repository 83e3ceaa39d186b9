import numpy as np
import pytest

from refedit import ops
from refedit.alignment import (
    AffineParams,
    apply_spatial_alignment,
    bilinear_sample,
    generate_grid,
    init_alignment_params,
    invert_theta,
    predict_affine,
)
from refedit.engine import GradTape, ShapeError, Tensor, backward, no_grad
from refedit.gradcheck import check_gradients
from refedit.optim import adam_update, init_adam_state
from refedit.pipeline import mse


def gaussian_blob(size, cx, cy, sigma=1.6):
    ys, xs = np.mgrid[0:size, 0:size]
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))


class TestPredictAffine:
    def test_identity_at_init(self, rng):
        params = init_alignment_params(3, rng)
        feat = Tensor(rng.uniform(size=(2, 3, 8, 8)))
        theta = predict_affine(feat, params).theta.data
        assert np.array_equal(theta, np.tile([1.0, 0, 0, 0, 1, 0], (2, 1)))

    def test_too_small_input(self, rng):
        params = init_alignment_params(1, rng)
        with pytest.raises(ShapeError):
            predict_affine(Tensor(np.zeros((1, 1, 3, 3))), params)

    def test_gradcheck_theta_wrt_weights(self, rng):
        params = init_alignment_params(1, rng)
        for p in params.values():
            p.data += rng.normal(0, 0.05, p.shape)
        feat = Tensor(rng.uniform(-1, 1, (1, 1, 4, 4)))
        w = Tensor(rng.uniform(-1, 1, (1, 6)))
        res = check_gradients(
            "theta", lambda: ops.sum(ops.mul(predict_affine(feat, params).theta, w)), list(params.values())
        )
        assert res.passed and res.max_rel_err < 1e-4


class TestGenerateGrid:
    def test_identity_2x2_pixel_centers(self):
        grid = generate_grid(AffineParams.identity(1), 2, 2).coords.data[0]
        expected = {(-0.5, -0.5), (0.5, -0.5), (-0.5, 0.5), (0.5, 0.5)}
        got = {(grid[y, x, 0], grid[y, x, 1]) for y in range(2) for x in range(2)}
        assert got == expected

    def test_translation_shifts_x(self):
        theta = Tensor(np.array([[1.0, 0, 1.0, 0, 1, 0]]))
        base = generate_grid(AffineParams.identity(1), 3, 3).coords.data
        shifted = generate_grid(AffineParams(theta), 3, 3).coords.data
        assert np.allclose(shifted[..., 0], base[..., 0] + 1.0)
        assert np.allclose(shifted[..., 1], base[..., 1])

    def test_scale_halves_span(self):
        theta = Tensor(np.array([[0.5, 0, 0, 0, 0.5, 0]]))
        grid = generate_grid(AffineParams(theta), 4, 4).coords.data
        assert grid[..., 0].min() >= -0.5 and grid[..., 0].max() <= 0.5
        assert grid[..., 1].min() >= -0.5 and grid[..., 1].max() <= 0.5


class TestBilinearSample:
    def test_identity_grid_reproduces_source(self, rng):
        src = Tensor(rng.uniform(size=(2, 3, 5, 7)))
        grid = generate_grid(AffineParams.identity(2), 5, 7)
        out = bilinear_sample(src, grid)
        assert np.abs(out.data - src.data).max() < 1e-12

    def test_midpoint_between_two_pixels(self):
        src = Tensor(np.array([[[[0.0, 4.0]]]]))  # 1x2 image, pixels at x_norm -0.5, +0.5
        grid = Tensor(np.zeros((1, 1, 1, 2)))  # x_norm = 0: exactly midway
        assert bilinear_sample(src, grid).data.reshape(()) == 2.0

    def test_fully_outside_is_zero(self, rng):
        src = Tensor(rng.uniform(size=(1, 2, 4, 4)))
        grid = Tensor(np.full((1, 3, 3, 2), 5.0))
        assert np.array_equal(bilinear_sample(src, grid).data, np.zeros((1, 2, 3, 3)))

    def test_grid_gradient_nonzero_on_ramp(self):
        ramp = Tensor(np.tile(np.linspace(0, 1, 6), (6, 1))[None, None], requires_grad=False)
        grid = Tensor(np.random.default_rng(1).uniform(-0.6, 0.6, (1, 4, 4, 2)), requires_grad=True)
        with GradTape():
            backward(ops.sum(bilinear_sample(ramp, grid)))
        # the ramp varies along x, so every x-coordinate gradient is nonzero
        assert np.all(np.abs(grid.grad[..., 0]) > 0)


class TestApplySpatialAlignment:
    def test_identity_at_init(self, rng):
        params = init_alignment_params(2, rng)
        feat = Tensor(rng.uniform(size=(2, 2, 8, 8)))
        out = apply_spatial_alignment(feat, params)
        assert out.shape == feat.shape
        assert np.abs(out.data - feat.data).max() < 1e-12

    def test_warp_then_inverse_recovers_interior(self):
        size = 16
        img = Tensor(gaussian_blob(size, 7.5, 7.5, sigma=4.0)[None, None])
        theta = np.array([[0.9, 0.1, 0.05, -0.08, 1.1, -0.03]])
        with no_grad():
            warped = bilinear_sample(img, generate_grid(AffineParams(Tensor(theta)), size, size))
            back = bilinear_sample(warped, generate_grid(AffineParams(Tensor(invert_theta(theta))), size, size))
        interior = (slice(None), slice(None), slice(2, -2), slice(2, -2))
        mse_val = float(np.mean((back.data[interior] - img.data[interior]) ** 2))
        assert mse_val < 5e-2

    def test_end_to_end_gradcheck(self, rng):
        params = init_alignment_params(1, rng)
        for p in params.values():
            p.data += rng.normal(0, 0.05, p.shape)
        feat = Tensor(rng.uniform(-1, 1, (1, 1, 5, 5)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (1, 1, 5, 5)))
        res = check_gradients(
            "alignment_e2e",
            lambda: ops.sum(ops.mul(apply_spatial_alignment(feat, params), w)),
            [feat] + list(params.values()),
            rtol=1e-3,
        )
        assert res.passed

    def test_training_undoes_translation(self):
        # two inputs shifted opposite ways; the module must learn input-conditioned warps
        size = 8
        shifts = [-2, 2]
        inputs = Tensor(np.stack([[gaussian_blob(size, size / 2 - 0.5 + dx, size / 2 - 0.5)] for dx in shifts]))
        target = Tensor(np.stack([[gaussian_blob(size, size / 2 - 0.5, size / 2 - 0.5)]] * 2))
        params = init_alignment_params(1, np.random.default_rng(0))
        opt = init_adam_state(params)
        with no_grad():
            init_loss = float(mse(apply_spatial_alignment(inputs, params), target).data)
        for _ in range(500):
            with GradTape():
                loss = mse(apply_spatial_alignment(inputs, params), target)
                for p in params.values():
                    p.grad = None
                backward(loss)
                adam_update(params, {k: p.grad for k, p in params.items()}, opt, lr=0.01)
        final_loss = float(loss.data)
        assert final_loss <= init_loss / 10
        theta = predict_affine(inputs, params).theta.data
        assert np.abs(theta[0] - theta[1]).max() > 1e-3
