import dataclasses

import numpy as np
import pytest

from refedit.config import ModelConfig
from refedit.data import generate_synthetic, make_batch
from refedit.engine import GradTape, ShapeError, Tensor, backward, no_grad
from refedit.optim import AdamState, adam_update, frozen_param_names, init_adam_state, parameter_groups
from refedit.pipeline import (
    EditingInputs,
    adapter_token,
    assemble_target_input,
    decode_latent,
    downsample_mask,
    dual_forward,
    encode_image,
    init_model_params,
    load_checkpoint,
    mse,
    predict_noise,
    reference_forward,
    sample,
    save_checkpoint,
    site_widths,
    training_step,
)
from refedit.schedule import DiffusionSchedule, add_noise, build_schedule


@pytest.fixture
def setup(tiny_config, rng):
    params = init_model_params(tiny_config, rng)
    samples = generate_synthetic("copy-patch", 4, 16, seed=3)
    inputs, gt = make_batch(samples, [0, 1])
    sched = build_schedule(tiny_config.T)
    return tiny_config, params, inputs, gt, sched


def forward_once(config, params, inputs, gt, sched, seed=11):
    rng = np.random.default_rng(seed)
    with no_grad():
        z0 = encode_image(Tensor(gt), params, config)
        t_arr = rng.integers(0, sched.T, size=z0.shape[0])
        eps = Tensor(rng.standard_normal(z0.shape))
        z_t = add_noise(z0, eps, t_arr, sched)
        z_masked = encode_image(Tensor(inputs.target_image * (1 - inputs.mask)), params, config)
        cond = assemble_target_input(z_t, inputs.mask, z_masked)
        return dual_forward(z_t, cond, Tensor(inputs.ref_image), t_arr, params, config).data


class TestEncoder:
    def test_downsample_arithmetic(self, setup):
        config, params, inputs, gt, _ = setup
        z = encode_image(Tensor(gt), params, config)
        assert z.shape == (2, config.latent_channels, 4, 4)

    def test_zero_image_zero_bias_gives_zero_latent(self, setup):
        config, params, *_ = setup
        z = encode_image(Tensor(np.zeros((1, 3, 16, 16))), params, config)
        assert np.array_equal(z.data, np.zeros_like(z.data))

    def test_indivisible_dims_rejected(self, setup):
        config, params, *_ = setup
        with pytest.raises(ShapeError):
            encode_image(Tensor(np.zeros((1, 3, 18, 18))), params, config)


class TestSchedule:
    def test_single_step(self):
        sched = build_schedule(1, 1e-4, 0.02)
        assert sched.betas.shape == (1,) and sched.betas[0] == 1e-4

    def test_alpha_bar_strictly_decreasing(self):
        sched = build_schedule(50)
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert sched.alpha_bar[0] > 0.99

    def test_cumprod_matches_scalar_loop(self):
        sched = build_schedule(50, 1e-4, 0.02)
        acc, expected = 1.0, []
        for beta in sched.betas:
            acc *= 1.0 - beta
            expected.append(acc)
        assert np.abs(sched.alpha_bar - np.array(expected)).max() < 1e-12

    def test_invalid_range_rejected(self):
        with pytest.raises(ValueError):
            build_schedule(10, 0.0, 0.02)
        with pytest.raises(ValueError):
            build_schedule(10, 0.5, 0.2)
        with pytest.raises(ValueError):
            build_schedule(0)


class TestAddNoise:
    def test_alpha_bar_one_returns_signal(self, rng):
        sched = DiffusionSchedule(T=1, betas=np.array([1e-4]), alpha_bar=np.array([1.0]))
        z0 = Tensor(rng.standard_normal((2, 3, 4, 4)))
        eps = Tensor(rng.standard_normal((2, 3, 4, 4)))
        assert np.array_equal(add_noise(z0, eps, 0, sched).data, z0.data)

    def test_alpha_bar_zero_returns_noise(self, rng):
        sched = DiffusionSchedule(T=1, betas=np.array([1e-4]), alpha_bar=np.array([0.0]))
        z0 = Tensor(rng.standard_normal((2, 3, 4, 4)))
        eps = Tensor(rng.standard_normal((2, 3, 4, 4)))
        assert np.array_equal(add_noise(z0, eps, 0, sched).data, eps.data)

    def test_variance_preserved_monte_carlo(self, rng):
        sched = build_schedule(50)
        n = 100_000
        z0 = Tensor(rng.standard_normal((1, n)))
        eps = Tensor(rng.standard_normal((1, n)))
        for t in (0, 25, 49):
            var = float(np.var(add_noise(z0, eps, t, sched).data))
            assert abs(var - 1.0) < 0.05

    def test_out_of_range_timestep(self, rng):
        sched = build_schedule(10)
        z = Tensor(rng.standard_normal((1, 2)))
        with pytest.raises(ValueError):
            add_noise(z, z, 10, sched)
        with pytest.raises(ValueError):
            add_noise(z, z, -1, sched)


class TestAssemble:
    def test_channel_count(self, rng):
        z = Tensor(rng.standard_normal((1, 4, 8, 8)))
        mask = np.zeros((1, 1, 32, 32))
        cond = assemble_target_input(z, mask, Tensor(rng.standard_normal((1, 4, 8, 8))))
        assert cond.shape == (1, 9, 8, 8)

    def test_zero_mask(self, setup):
        config, params, inputs, gt, _ = setup
        mask = np.zeros_like(inputs.mask)
        z_masked = encode_image(Tensor(inputs.target_image * (1 - mask)), params, config)
        z_full = encode_image(Tensor(inputs.target_image), params, config)
        assert np.array_equal(z_masked.data, z_full.data)
        cond = assemble_target_input(z_full, mask, z_masked)
        phi = cond.data[:, config.latent_channels]
        assert np.array_equal(phi, np.zeros_like(phi))

    def test_checkerboard_blocks_average_to_half(self):
        # 2x2-block checkerboard: every 4x4 cell holds two of each -> 0.5
        tile = np.kron(np.indices((4, 4)).sum(axis=0) % 2, np.ones((2, 2)))
        mask = tile[None, None]
        phi = downsample_mask(mask)
        assert np.array_equal(phi, np.full((1, 1, 2, 2), 0.5))


class TestReferenceForward:
    def test_disabled_flags_return_raw_features(self, setup, rng):
        config, params, inputs, *_ = setup
        cfg_off = dataclasses.replace(config, enable_sam=False, enable_paf=False, enable_arsm=False)
        with no_grad():
            feats = reference_forward(Tensor(inputs.ref_image), params, cfg_off)
        widths = dict(site_widths(config))
        assert [f.shape[1] for f in feats] == [widths["mid"], widths["up0"], widths["up1"]]

    def test_fresh_alignment_is_identity(self, setup):
        config, params, inputs, *_ = setup
        cfg_off = dataclasses.replace(config, enable_sam=False, enable_arsm=False)
        cfg_sam = dataclasses.replace(config, enable_sam=True, enable_arsm=False)
        with no_grad():
            feats_off = reference_forward(Tensor(inputs.ref_image), params, cfg_off)
            feats_sam = reference_forward(Tensor(inputs.ref_image), params, cfg_sam)
        for a, b in zip(feats_off, feats_sam):
            assert np.abs(a.data - b.data).max() < 1e-12

    def test_fresh_scaling_is_identity(self, setup, rng):
        config, params, inputs, *_ = setup
        cfg_off = dataclasses.replace(config, enable_sam=False, enable_arsm=False)
        cfg_arsm = dataclasses.replace(config, enable_sam=False, enable_arsm=True)
        with no_grad():
            feats_off = reference_forward(Tensor(inputs.ref_image), params, cfg_off)
            tfeats = [Tensor(rng.standard_normal(f.shape)) for f in feats_off]
            feats_on = reference_forward(Tensor(inputs.ref_image), params, cfg_arsm, target_features=tfeats)
        for a, b in zip(feats_off, feats_on):
            assert np.array_equal(a.data, b.data)

    def test_scaling_without_target_features_rejected(self, setup):
        config, params, inputs, *_ = setup
        with pytest.raises(ValueError):
            with no_grad():
                reference_forward(Tensor(inputs.ref_image), params, config)


class TestPredictNoise:
    def test_output_shape_and_isolation(self, setup, rng):
        config, params, inputs, gt, sched = setup
        cfg_off = dataclasses.replace(config, enable_paf=False)
        with no_grad():
            z0 = encode_image(Tensor(gt), params, config)
            z_masked = encode_image(Tensor(inputs.target_image * (1 - inputs.mask)), params, config)
            cond = assemble_target_input(z0, inputs.mask, z_masked)
            feats = [Tensor(rng.standard_normal(s)) for s in ((2, 16, 1, 1), (2, 16, 2, 2), (2, 8, 4, 4))]
            out1 = predict_noise(z0, cond, feats, 3, params, cfg_off)
            for f in feats:
                f.data += 1.0
            out2 = predict_noise(z0, cond, feats, 3, params, cfg_off)
        assert out1.shape == z0.shape
        assert np.array_equal(out1.data, out2.data)

    def test_composition_matches_dual_forward_without_scaling(self, setup):
        config, params, inputs, gt, sched = setup
        cfg = dataclasses.replace(config, enable_arsm=False)
        with no_grad():
            z0 = encode_image(Tensor(gt), params, cfg)
            z_masked = encode_image(Tensor(inputs.target_image * (1 - inputs.mask)), params, cfg)
            cond = assemble_target_input(z0, inputs.mask, z_masked)
            feats = reference_forward(Tensor(inputs.ref_image), params, cfg)
            token = adapter_token(Tensor(inputs.ref_image), params, cfg)
            composed = predict_noise(z0, cond, feats, 3, params, cfg, ref_token=token)
            fused = dual_forward(z0, cond, Tensor(inputs.ref_image), 3, params, cfg)
        assert np.array_equal(composed.data, fused.data)

    def test_bad_conditioning_channels(self, setup):
        config, params, inputs, gt, _ = setup
        with no_grad():
            z0 = encode_image(Tensor(gt), params, config)
            with pytest.raises(ShapeError):
                predict_noise(z0, z0, None, 0, params, config)


class TestAdam:
    def test_zero_gradient_leaves_parameter_unchanged(self):
        p = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
        state = init_adam_state(p)
        before = p["w"].data.copy()
        adam_update(p, {"w": np.zeros(2)}, state, lr=0.1)
        assert np.array_equal(p["w"].data, before)

    def test_scalar_oracle_one_step(self):
        p = {"w": Tensor(np.array([0.5]), requires_grad=True)}
        state = init_adam_state(p)
        adam_update(p, {"w": np.array([1.0])}, state, lr=0.1)
        # by hand: m=0.1, v=0.001, m_hat=1, v_hat=1, step=0.1/(1+1e-8)
        expected = 0.5 - 0.1 * 1.0 / (np.sqrt(1.0) + 1e-8)
        assert abs(p["w"].data[0] - expected) < 1e-15

    def test_two_steps_equal_batched_replay(self, rng):
        g1, g2 = rng.standard_normal(3), rng.standard_normal(3)
        base = rng.standard_normal(3)

        def run():
            p = {"w": Tensor(base.copy(), requires_grad=True)}
            state = init_adam_state(p)
            adam_update(p, {"w": g1}, state, lr=0.05)
            adam_update(p, {"w": g2}, state, lr=0.05)
            return p["w"].data

        assert np.array_equal(run(), run())

    def test_missing_gradient_skipped(self):
        p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
        state = init_adam_state(p)
        adam_update(p, {"w": None}, state, lr=0.1)
        assert np.array_equal(p["w"].data, [1.0])


class TestFreeze:
    @pytest.mark.parametrize("flag,group", [("freeze_ref", "ref"), ("freeze_tar", "tar"), ("freeze_adapter", "adapter")])
    def test_frozen_group_bitwise_unchanged(self, setup, flag, group):
        config, params, inputs, gt, sched = setup
        cfg = dataclasses.replace(config, **{flag: True})
        groups = parameter_groups(params)
        before = {name: params[name].data.tobytes() for name in groups[group]}
        opt = init_adam_state(params)
        rng = np.random.default_rng(1)
        for _ in range(3):
            training_step(inputs, gt, params, opt, sched, cfg, rng)
        after = {name: params[name].data.tobytes() for name in groups[group]}
        assert before == after

    def test_frozen_names_by_prefix(self, setup):
        config, params, *_ = setup
        cfg = dataclasses.replace(config, freeze_ref=True, freeze_adapter=True)
        frozen = frozen_param_names(params, cfg)
        assert all(n.startswith(("unet_ref.", "adapter.")) for n in frozen)
        assert any(n.startswith("unet_ref.") for n in frozen)
        assert not any(n.startswith("unet_tar.") for n in frozen)


class TestTrainingStep:
    def test_perfect_prediction_gives_zero_loss(self, rng):
        eps = Tensor(rng.standard_normal((2, 4, 8, 8)))
        assert mse(eps, eps).item() == 0.0

    def test_loss_finite_and_params_move(self, setup):
        config, params, inputs, gt, sched = setup
        opt = init_adam_state(params)
        before = params["unet_tar.out.w"].data.copy()
        loss = training_step(inputs, gt, params, opt, sched, config, np.random.default_rng(2))
        assert np.isfinite(loss) and loss > 0
        assert not np.array_equal(before, params["unet_tar.out.w"].data)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_diagnostic_names_op(self, setup):
        config, params, inputs, gt, sched = setup
        params["unet_tar.in.w"].data[0, 0, 0, 0] = np.inf
        with pytest.raises(FloatingPointError, match="conv2d"):
            training_step(inputs, gt, params, init_adam_state(params), sched, config, np.random.default_rng(2))


class TestSample:
    def test_unedited_region_bitwise_preserved(self, setup):
        config, params, inputs, gt, sched = setup
        out = sample(inputs.target_image, inputs.mask, inputs.ref_image, params, sched, config, seed=5)
        off = inputs.mask == 0
        assert np.array_equal(
            np.broadcast_to(off, out.shape) * out, np.broadcast_to(off, out.shape) * inputs.target_image
        )

    def test_same_seed_identical_output(self, setup):
        config, params, inputs, *_ , sched = setup
        a = sample(inputs.target_image, inputs.mask, inputs.ref_image, params, sched, config, seed=9)
        b = sample(inputs.target_image, inputs.mask, inputs.ref_image, params, sched, config, seed=9)
        assert np.array_equal(a, b)

    def test_output_in_unit_range_inside_mask(self, setup):
        config, params, inputs, *_ , sched = setup
        out = sample(inputs.target_image, inputs.mask, inputs.ref_image, params, sched, config, seed=5)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestEditingInputs:
    def test_rejects_out_of_range_images(self, rng):
        img = rng.uniform(0, 1, (1, 3, 8, 8))
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            EditingInputs(ref_image=img * 2, target_image=img, mask=np.zeros((1, 1, 8, 8)))

    def test_rejects_non_binary_mask(self, rng):
        img = rng.uniform(0, 1, (1, 3, 8, 8))
        with pytest.raises(ValueError, match="binary"):
            EditingInputs(ref_image=img, target_image=img, mask=np.full((1, 1, 8, 8), 0.5))

    def test_rejects_shape_mismatch(self, rng):
        img = rng.uniform(0, 1, (1, 3, 8, 8))
        with pytest.raises(ValueError):
            EditingInputs(ref_image=img, target_image=img, mask=np.zeros((1, 1, 4, 4)))


class TestCheckpointRoundTrip:
    def test_save_load_bitwise(self, setup, tmp_path):
        config, params, *_ = setup
        save_checkpoint(tmp_path / "ckpt", params, config, step=42)
        loaded, cfg2, step = load_checkpoint(tmp_path / "ckpt")
        assert step == 42 and cfg2 == config
        assert sorted(loaded) == sorted(params)
        for name in params:
            assert loaded[name].data.tobytes() == params[name].data.tobytes()

    def test_checkpoint_names_carry_module_prefixes(self, setup):
        _, params, *_ = setup
        for prefix in ("sam.", "arsm.mid.", "arsm.up0.", "paf.mid.", "paf.up1.", "vae.", "unet_ref.", "unet_tar.", "adapter."):
            assert any(name.startswith(prefix) for name in params), prefix


class TestAblationIdentity:
    def test_all_four_configs_identical_at_fresh_init(self, setup):
        config, params, inputs, gt, sched = setup
        outs = []
        for sam, paf, arsm in [(False, False, False), (True, False, False), (True, True, False), (True, True, True)]:
            cfg = dataclasses.replace(config, enable_sam=sam, enable_paf=paf, enable_arsm=arsm)
            outs.append(forward_once(cfg, params, inputs, gt, sched))
        for other in outs[1:]:
            assert np.array_equal(outs[0], other)
