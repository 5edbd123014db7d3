"""Latent codec, interpolation path, losses, Euler sampling, checkpoints."""

import numpy as np
import pytest
import torch

from transtext.checkpoint import load_checkpoint, save_checkpoint
from transtext.flowmatch import (
    POOL,
    SampleConfig,
    TrainConfig,
    compute_losses,
    decode_frames,
    decode_latent,
    encode_frames,
    encode_latent,
    euler_integrate,
    interpolate_path,
    latent_alpha_mask,
    sample_euler,
    target_velocity,
)
from transtext.layout import LayoutMode, concat_joint


class TestLatentCodec:
    def test_constant_clip_pools_to_constant(self):
        frames = np.full((2, 3, 4, 4), 0.3)
        np.testing.assert_array_equal(encode_frames(frames), 0.3)

    def test_checkerboard_pools_to_half(self):
        board = np.indices((4, 4)).sum(axis=0) % 2
        frames = np.broadcast_to(board, (1, 3, 4, 4)).astype(np.float64)
        np.testing.assert_array_equal(encode_frames(frames), 0.5)

    def test_decode_nearest_neighbor(self):
        latent = np.arange(4, dtype=np.float64).reshape(1, 1, 2, 2)
        up = decode_frames(latent)
        assert up.shape == (1, 1, 4, 4)
        np.testing.assert_array_equal(up[0, 0, :2, :2], 0.0)
        np.testing.assert_array_equal(up[0, 0, 2:, 2:], 3.0)

    def test_encode_decode_identity_on_pooled_grids(self):
        rng = np.random.default_rng(0)
        latent = rng.random((3, 3, 4, 6))
        np.testing.assert_array_equal(encode_frames(decode_frames(latent)), latent)

    def test_indivisible_dims_rejected(self):
        with pytest.raises(ValueError, match="pooling"):
            encode_frames(np.zeros((1, 3, 5, 4)))

    def test_pooling_commutes_with_width_concat(self):
        rng = np.random.default_rng(1)
        rgb = rng.random((3, 3, 8, 8))
        alpha = rng.random((3, 3, 8, 8))
        joint_then_pool = encode_latent(concat_joint(rgb, alpha, LayoutMode.WIDTH))
        pool_then_joint = np.concatenate([encode_frames(rgb), encode_frames(alpha)], axis=3)
        np.testing.assert_array_equal(joint_then_pool, pool_then_joint)

    def test_decode_latent_sets_boundary(self):
        latent = np.zeros((4, 3, 4, 8))
        comp = decode_latent(latent, LayoutMode.TEMPORAL)
        assert comp.boundary == 2
        comp = decode_latent(latent, LayoutMode.WIDTH)
        assert comp.boundary == 8  # 16-pixel-wide decoded frames


class TestInterpolate:
    def test_endpoints(self):
        rng = np.random.default_rng(2)
        x0 = rng.random((2, 3, 4, 4))
        x1 = rng.random((2, 3, 4, 4))
        np.testing.assert_array_equal(interpolate_path(x0, x1, 0.0), x0)
        np.testing.assert_array_equal(interpolate_path(x0, x1, 1.0), x1)

    def test_midpoint_value(self):
        x0 = np.zeros((1, 1, 2, 2))
        x1 = np.full((1, 1, 2, 2), 2.0)
        np.testing.assert_array_equal(interpolate_path(x0, x1, 0.5), 1.0)

    def test_target_velocity(self):
        x0 = np.ones((1, 1, 2, 2))
        x1 = np.full((1, 1, 2, 2), 3.0)
        np.testing.assert_array_equal(target_velocity(x0, x1), 2.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            interpolate_path(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 4)), 0.5)


class TestAlphaMask:
    def test_width_mask(self):
        mask = latent_alpha_mask(LayoutMode.WIDTH, (2, 3, 4, 8))
        assert mask[:, :, :, 4:].all() and not mask[:, :, :, :4].any()

    def test_height_mask(self):
        mask = latent_alpha_mask(LayoutMode.HEIGHT, (2, 3, 8, 4))
        assert mask[:, :, 4:, :].all() and not mask[:, :, :4, :].any()

    def test_temporal_mask(self):
        mask = latent_alpha_mask(LayoutMode.TEMPORAL, (6, 3, 4, 4))
        assert mask[3:].all() and not mask[:3].any()


class TestLosses:
    def setup_method(self):
        gen = torch.Generator().manual_seed(3)
        self.shape = (2, 4, 3, 4, 8)
        self.x0 = torch.randn(self.shape, generator=gen, dtype=torch.float64)
        self.x1 = torch.randn(self.shape, generator=gen, dtype=torch.float64)
        self.t = torch.rand(2, generator=gen, dtype=torch.float64)
        self.x_t = interpolate_path(self.x0, self.x1, self.t.view(-1, 1, 1, 1, 1))

    def test_perfect_velocity_zeroes_both(self):
        v = self.x1 - self.x0
        mse, rec, total = compute_losses(
            v, self.x0, self.x1, self.x_t, self.t, LayoutMode.WIDTH, 0.3
        )
        assert float(mse) < 1e-12 and float(rec) < 1e-12 and float(total) < 1e-12

    def test_t_one_zeroes_rec(self):
        gen = torch.Generator().manual_seed(4)
        v = torch.randn(self.shape, generator=gen, dtype=torch.float64)
        t = torch.ones(2, dtype=torch.float64)
        x_t = interpolate_path(self.x0, self.x1, t.view(-1, 1, 1, 1, 1))
        _, rec, _ = compute_losses(v, self.x0, self.x1, x_t, t, LayoutMode.WIDTH, 0.3)
        assert float(rec) == 0.0

    def test_lambda_zero_total_is_mse(self):
        gen = torch.Generator().manual_seed(5)
        v = torch.randn(self.shape, generator=gen, dtype=torch.float64)
        mse, _, total = compute_losses(
            v, self.x0, self.x1, self.x_t, self.t, LayoutMode.WIDTH, 0.0
        )
        assert float(total) == float(mse)

    def test_scalar_oracle_recomputation(self):
        # independent per-element loop over the defining formulas
        gen = torch.Generator().manual_seed(6)
        shape = (1, 2, 3, 4, 8)
        x0 = torch.randn(shape, generator=gen, dtype=torch.float64)
        x1 = torch.randn(shape, generator=gen, dtype=torch.float64)
        v = torch.randn(shape, generator=gen, dtype=torch.float64)
        t = torch.rand(1, generator=gen, dtype=torch.float64)
        x_t = interpolate_path(x0, x1, t.view(-1, 1, 1, 1, 1))
        lam = 0.3
        mse, rec, total = compute_losses(v, x0, x1, x_t, t, LayoutMode.WIDTH, lam)

        a0, a1, av, at = (z[0].numpy() for z in (x0, x1, v, x_t))
        tv = float(t[0])
        mse_sum = 0.0
        rec_sum = 0.0
        n_all = 0
        n_alpha = 0
        for f in range(2):
            for c in range(3):
                for y in range(4):
                    for x in range(8):
                        target = a1[f, c, y, x] - a0[f, c, y, x]
                        mse_sum += (av[f, c, y, x] - target) ** 2
                        n_all += 1
                        if x >= 4:  # alpha half under the width layout
                            recon = at[f, c, y, x] + (1 - tv) * av[f, c, y, x]
                            rec_sum += (a1[f, c, y, x] - recon) ** 2
                            n_alpha += 1
        assert abs(float(mse) - mse_sum / n_all) < 1e-10
        assert abs(float(rec) - rec_sum / n_alpha) < 1e-10
        assert abs(float(total) - (mse_sum / n_all + lam * rec_sum / n_alpha)) < 1e-10

    def test_t_out_of_range_rejected(self):
        v = torch.zeros(self.shape, dtype=torch.float64)
        with pytest.raises(ValueError, match="t must lie"):
            compute_losses(
                v, self.x0, self.x1, self.x_t, torch.tensor([1.5, 0.2]), LayoutMode.WIDTH, 0.3
            )

    def test_nonnegative_and_zero_iff_perfect(self):
        gen = torch.Generator().manual_seed(7)
        for _ in range(20):
            v = torch.randn(self.shape, generator=gen, dtype=torch.float64)
            mse, rec, total = compute_losses(
                v, self.x0, self.x1, self.x_t, self.t, LayoutMode.TEMPORAL, 0.3
            )
            assert float(mse) >= 0 and float(rec) >= 0 and float(total) >= 0
            if not torch.equal(v, self.x1 - self.x0):
                assert float(total) > 0


def dyadic(shape, gen, grid=2.0**-10, span=2**10):
    """Random values on a dyadic grid so Euler sums stay exact in float64."""
    ints = torch.randint(-span, span + 1, shape, generator=gen)
    return ints.to(torch.float64) * grid


class TestEuler:
    @pytest.mark.parametrize("n", [1, 5, 50])
    def test_linear_field_reaches_x1_exactly(self, n):
        gen = torch.Generator().manual_seed(8)
        x0 = dyadic((2, 3, 4, 4), gen)
        w = dyadic((2, 3, 4, 4), gen)
        x1 = x0 + n * w  # every partial sum representable exactly
        velocity = x1 - x0

        out = euler_integrate(lambda x, t: velocity, x0, n)
        assert torch.equal(out, x1)

    def test_one_step_constant_stub(self):
        gen = torch.Generator().manual_seed(9)
        x0 = torch.randn((1, 3, 2, 2), generator=gen, dtype=torch.float64)
        c = torch.randn((1, 3, 2, 2), generator=gen, dtype=torch.float64)
        out = euler_integrate(lambda x, t: c.clone(), x0, 1)
        assert torch.equal(out, x0 + c)


class TestSampleEuler:
    def make_model(self, seed=0):
        from transtext.model import DenoiserConfig
        from transtext.pipeline import build_model

        return build_model(
            DenoiserConfig(), (3, 3, 4, 8), (3, 4, 8), LayoutMode.WIDTH, seed=seed, num_effects=4
        )

    def test_fixed_seed_bit_deterministic(self):
        model = self.make_model()
        ref = np.zeros((3, 4, 8))
        cfg = SampleConfig(num_steps=4, cfg_scale=5.0, seed=77)
        a = sample_euler(model, ref, 1, cfg, LayoutMode.WIDTH)
        b = sample_euler(model, ref, 1, cfg, LayoutMode.WIDTH)
        np.testing.assert_array_equal(a.frames, b.frames)

    def test_cfg_scale_one_equals_pure_conditional(self):
        model = self.make_model(seed=3)
        ref = np.zeros((3, 4, 8))
        out = sample_euler(model, ref, 0, SampleConfig(num_steps=3, cfg_scale=1.0, seed=5), LayoutMode.WIDTH)

        # manual conditional-only integration with the same noise
        import torch as th

        gen = th.Generator().manual_seed(5)
        x = th.randn((1, 3, 3, 4, 8), generator=gen, dtype=th.float32)
        reft = th.zeros((1, 3, 4, 8))
        eff = th.tensor([0])
        with th.no_grad():
            for k in range(3):
                t = th.tensor(k / 3)
                x = x + model(x, t, eff, reft) / 3
        from transtext.flowmatch import decode_latent, from_model_space

        expected = decode_latent(from_model_space(x[0].to(th.float64).numpy()), LayoutMode.WIDTH)
        np.testing.assert_array_equal(out.frames, expected.frames)

    def test_layout_mismatch_rejected(self):
        model = self.make_model()
        with pytest.raises(ValueError, match="layout"):
            sample_euler(model, np.zeros((3, 4, 8)), 0, SampleConfig(num_steps=1), LayoutMode.HEIGHT)


class TestCheckpointFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        tensors = {
            "a.weight": rng.standard_normal((3, 4)),
            "b.bias": rng.standard_normal(7),
            "scalar": np.array(2.5),
        }
        config = {"layout": "width", "nested": {"k": 1}}
        path = tmp_path / "model.ttxt"
        save_checkpoint(path, config, tensors)
        got_config, got = load_checkpoint(path)
        assert got_config == config
        for name, arr in tensors.items():
            np.testing.assert_array_equal(got[name], arr)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.ttxt"
        save_checkpoint(path, {}, {"w": np.zeros(2)})
        raw = path.read_bytes()
        assert raw[:4] == b"TTXT"
        assert int.from_bytes(raw[4:8], "little") == 1
        blob_len = int.from_bytes(raw[8:16], "little")
        assert raw[16 : 16 + blob_len] == b"{}"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ttxt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_deterministic_bytes(self, tmp_path):
        tensors = {"z": np.ones(3), "a": np.arange(4.0)}
        save_checkpoint(tmp_path / "1.ttxt", {"s": 1}, tensors)
        save_checkpoint(tmp_path / "2.ttxt", {"s": 1}, dict(reversed(tensors.items())))
        assert (tmp_path / "1.ttxt").read_bytes() == (tmp_path / "2.ttxt").read_bytes()


class TestTrainConfig:
    def test_defaults_match_contract(self):
        cfg = TrainConfig()
        assert cfg.lambda_rec == 0.3
        assert cfg.weight_decay == 1e-2
        assert cfg.cond_drop_prob == 0.1
        assert cfg.learning_rate == 1e-3

    def test_invalid_values(self):
        with pytest.raises(ValueError):
            TrainConfig(lambda_rec=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(cond_drop_prob=1.0)

    def test_sample_defaults(self):
        cfg = SampleConfig()
        assert cfg.num_steps == 50
        assert cfg.cfg_scale == 5.0


def tiny_trainer(seed=0, lr=1e-3, weight_decay=1e-2, steps=3):
    from transtext.flowmatch import Trainer
    from transtext.model import DenoiserConfig
    from transtext.pipeline import build_model

    gen = torch.Generator().manual_seed(100)
    x1 = torch.rand((4, 3, 3, 4, 8), generator=gen, dtype=torch.float64) * 2 - 1
    refs = torch.rand((4, 3, 4, 8), generator=gen, dtype=torch.float64) * 2 - 1
    effects = torch.randint(0, 4, (4,), generator=gen)
    model = build_model(
        DenoiserConfig(), (3, 3, 4, 8), (3, 4, 8), LayoutMode.WIDTH, seed=seed, num_effects=4
    )
    cfg = TrainConfig(
        steps=steps, batch_size=2, seed=seed, learning_rate=lr, weight_decay=weight_decay,
        layout=LayoutMode.WIDTH,
    )
    return Trainer(model, cfg, x1, refs, effects)


class TestTrainer:
    def test_zero_lr_zero_decay_keeps_params(self):
        trainer = tiny_trainer(lr=0.0, weight_decay=0.0, steps=2)
        before = {n: p.detach().clone() for n, p in trainer.model.named_parameters()}
        trainer.run(quiet=True)
        for n, p in trainer.model.named_parameters():
            assert torch.equal(p, before[n]), n

    def test_fixed_seed_identical_loss_trajectory(self):
        a = tiny_trainer(seed=3).run(quiet=True)
        b = tiny_trainer(seed=3).run(quiet=True)
        assert a == b

    def test_loss_decreases_on_average(self):
        records = tiny_trainer(seed=1, steps=60).run(quiet=True)
        first = np.mean([r["total"] for r in records[:10]])
        last = np.mean([r["total"] for r in records[-10:]])
        assert last < first

    def test_nonfinite_aborts_with_diagnostic(self):
        trainer = tiny_trainer(steps=1)
        with torch.no_grad():
            trainer.x1[0, 0, 0, 0, 0] = float("nan")
        with pytest.raises(RuntimeError, match="non-finite loss"):
            for _ in range(50):
                trainer.train_step()
