"""Tests for the denoiser architecture and the diffusion training/sampling API."""

from __future__ import annotations

import numpy as np
import pytest

from shapesculpt import autodiff as ad
from shapesculpt import diffusion as df
from shapesculpt import network as net
from shapesculpt.shapegen import FamilySpec, generate_dataset
from shapesculpt.wavelet import dwt3


def tiny_config(**overrides) -> df.ModelConfig:
    base = dict(
        resolution=16,
        width=8,
        latent_dim=16,
        temb_dim=16,
        gn_groups=4,
        t_steps=60,
    )
    base.update(overrides)
    return df.ModelConfig(**base)


def random_wavelet(cfg: df.ModelConfig, seed: int):
    rng = np.random.default_rng(seed)
    side = cfg.grid_side
    arr = rng.standard_normal((8, side, side, side)).astype(np.float32) * 0.05
    return df.array_to_wavelet(arr, cfg)


def tiny_dataset(cfg: df.ModelConfig, count: int = 4, seed: int = 0):
    spec = FamilySpec(family="box_table", count=count, seed=seed, resolution=cfg.resolution)
    return [dwt3(vol) for vol, _ in generate_dataset(spec)]


@pytest.fixture(scope="module")
def tiny_ckpt():
    cfg = tiny_config(scale_exponents=(0,) * 8)
    params = net.init_params(cfg, np.random.default_rng(7))
    return df.Checkpoint(config=cfg, params={k: v.data.copy() for k, v in params.items()})


# ---------------------------------------------------------------------------
# Noise schedule


def test_schedule_defaults():
    sched = df.NoiseSchedule.linear()
    assert sched.t_steps == 1000
    assert sched.betas[0] == pytest.approx(1e-4)
    assert sched.betas[-1] == pytest.approx(0.02)
    assert np.all(np.diff(sched.alpha_bar) < 0.0)
    assert sched.alpha_bar[0] == pytest.approx(1.0 - 1e-4)


def test_schedule_matches_cumulative_product_oracle():
    sched = df.NoiseSchedule.linear(t_steps=50)
    prod = 1.0
    for i in range(50):
        prod *= 1.0 - sched.betas[i]
        assert sched.alpha_bar[i] == pytest.approx(prod, rel=1e-12)


def test_schedule_rejects_bad_betas():
    with pytest.raises(ValueError):
        df.NoiseSchedule(3, np.array([0.1, 0.2]), np.array([0.9, 0.8]), np.array([0.9, 0.72]))
    betas = np.array([0.1, 0.05, 0.2])
    with pytest.raises(ValueError):
        df.NoiseSchedule(3, betas, 1.0 - betas, np.cumprod(1.0 - betas))
    betas = np.array([0.1, 0.5, 1.5])
    with pytest.raises(ValueError):
        df.NoiseSchedule(3, betas, 1.0 - betas, np.cumprod(1.0 - betas))


def test_forward_mix_identity_scalar_oracle():
    # x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, checked by hand.
    sched = df.NoiseSchedule.linear(t_steps=20)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(5)
    eps = rng.standard_normal(5)
    t = 11
    mixed = np.sqrt(sched.alpha_bar[t]) * x0 + np.sqrt(1.0 - sched.alpha_bar[t]) * eps
    ab = float(np.prod(1.0 - sched.betas[: t + 1]))
    expected = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    np.testing.assert_allclose(mixed, expected, rtol=1e-10)


# ---------------------------------------------------------------------------
# Channel packing and scaling


def test_pack_roundtrip():
    cfg = tiny_config()
    wv = random_wavelet(cfg, 3)
    arr = df.wavelet_to_array(wv)
    assert arr.shape == (8, cfg.grid_side, cfg.grid_side, cfg.grid_side)
    back = df.array_to_wavelet(arr, cfg)
    np.testing.assert_array_equal(back.coarse, wv.coarse)
    for tag, grid in wv.details[0].items():
        np.testing.assert_array_equal(back.details[0][tag], grid)


def test_normalize_roundtrip_is_bit_exact():
    cfg = tiny_config(scale_exponents=(3, -2, 0, 7, -9, 1, 4, -1))
    rng = np.random.default_rng(5)
    arr = rng.standard_normal((8, 8, 8, 8)).astype(np.float32)
    back = df.denormalize_channels(df.normalize_channels(arr, cfg), cfg)
    assert back.tobytes() == arr.tobytes()


def test_scale_exponents_recover_powers_of_two():
    rng = np.random.default_rng(9)
    data = rng.standard_normal((10, 3, 4, 4, 4))
    data[:, 0] *= 2.0**-5
    data[:, 1] *= 2.0**2
    exps = df._scale_exponents_from(data)
    assert exps[0] == 5
    assert exps[1] == -2
    assert exps[2] == 0


# ---------------------------------------------------------------------------
# Architecture contract


def test_output_stage_has_sixteen_layers(tiny_ckpt):
    assert net.OUTPUT_LAYER_COUNT == 16
    cfg = tiny_ckpt.config
    params = tiny_ckpt.param_tensors()
    side = cfg.grid_side
    x = ad.Tensor(np.random.default_rng(0).standard_normal((1, 8, side, side, side)).astype(np.float32))
    z = ad.Tensor(np.zeros(cfg.latent_dim, dtype=np.float32))
    eps, acts, skips = net.unet_forward(params, cfg, x, 10, z, collect=True)
    assert eps.data.shape == x.data.shape
    assert len(acts) == 16
    for j in range(1, 17):
        c = net.feature_channels(j, cfg.width)
        s = net.feature_side(j, side)
        assert acts[j - 1].data.shape == (1, c, s, s, s), f"layer {j}"
    assert set(skips) == {"e1", "e2"}


def test_feature_dims_by_layer():
    assert net.feature_channels(16, 8) == 8
    assert net.feature_side(16, 16) == 16
    assert net.feature_channels(12, 8) == 8
    assert net.feature_side(12, 16) == 16
    assert net.feature_channels(9, 8) == 16
    assert net.feature_side(9, 16) == 8
    assert net.feature_channels(1, 8) == 32
    assert net.feature_side(1, 16) == 4
    with pytest.raises(ValueError):
        net.feature_channels(0, 8)
    with pytest.raises(ValueError):
        net.feature_side(17, 16)


def test_receptive_radius_walk():
    assert net.receptive_radius_after(16) == 1
    assert net.receptive_radius_after(12) == 5
    assert net.receptive_radius_after(9) == 9
    radii = [net.receptive_radius_after(j) for j in range(1, 17)]
    assert all(a >= b for a, b in zip(radii, radii[1:]))


def test_stop_at_layer_skips_tail(tiny_ckpt):
    cfg = tiny_ckpt.config
    params = tiny_ckpt.param_tensors()
    side = cfg.grid_side
    x = ad.Tensor(np.random.default_rng(1).standard_normal((1, 8, side, side, side)).astype(np.float32))
    z = ad.Tensor(np.zeros(cfg.latent_dim, dtype=np.float32))
    eps, acts, _ = net.unet_forward(params, cfg, x, 5, z, collect=True, stop_at_layer=12)
    assert eps is None
    assert len(acts) == 12
    eps_full, acts_full, _ = net.unet_forward(params, cfg, x, 5, z, collect=True)
    assert acts[11].data.tobytes() == acts_full[11].data.tobytes()


@pytest.mark.parametrize("j", [5, 9, 12, 16])
def test_complete_from_matches_full_pass(tiny_ckpt, j):
    cfg = tiny_ckpt.config
    params = tiny_ckpt.param_tensors()
    side = cfg.grid_side
    x = ad.Tensor(np.random.default_rng(2).standard_normal((1, 8, side, side, side)).astype(np.float32))
    z = ad.Tensor(np.random.default_rng(3).standard_normal(cfg.latent_dim).astype(np.float32))
    eps_full, acts, skips = net.unet_forward(params, cfg, x, 30, z, collect=True)
    resumed = net.complete_from(params, cfg, acts[j - 1], j, 30, z, skips)
    assert resumed.data.tobytes() == eps_full.data.tobytes()


def test_config_validation():
    with pytest.raises(ValueError):
        df.ModelConfig(resolution=20)  # grid side 10 breaks the down path
    with pytest.raises(ValueError):
        df.ModelConfig(levels=2)
    with pytest.raises(ValueError):
        df.ModelConfig(channels=4)
    with pytest.raises(ValueError):
        df.ModelConfig(scale_exponents=(1, 2))


# ---------------------------------------------------------------------------
# Training


def test_train_smoke_loss_decreases():
    cfg = tiny_config()
    data = tiny_dataset(cfg, count=4, seed=11)
    ckpt = df.train(data, df.TrainConfig(steps=60, batch_size=4, lr=2e-3, seed=0, log_every=0), cfg)
    losses = ckpt.train_losses
    assert len(losses) == 60
    assert all(np.isfinite(losses))
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    assert ckpt.config.scale_exponents is not None


def test_train_is_deterministic():
    cfg = tiny_config()
    data = tiny_dataset(cfg, count=2, seed=4)
    tc = df.TrainConfig(steps=5, batch_size=2, lr=1e-3, seed=123, log_every=0)
    a = df.train(data, tc, cfg)
    b = df.train(data, tc, cfg)
    assert sorted(a.params) == sorted(b.params)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes(), k
    c = df.train(data, df.TrainConfig(steps=5, batch_size=2, lr=1e-3, seed=124, log_every=0), cfg)
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params)


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        df.train([], df.TrainConfig(steps=1))


# ---------------------------------------------------------------------------
# Encoding and latent refinement


def test_encode_shape_and_determinism(tiny_ckpt):
    wv = random_wavelet(tiny_ckpt.config, 21)
    z1 = df.encode(wv, tiny_ckpt)
    z2 = df.encode(wv, tiny_ckpt)
    assert z1.shape == (tiny_ckpt.config.latent_dim,)
    assert z1.dtype == np.float32
    assert z1.tobytes() == z2.tobytes()


def test_encode_rejects_mismatched_volume(tiny_ckpt):
    other = tiny_config(resolution=32, scale_exponents=(0,) * 8)
    wv = random_wavelet(other, 0)
    with pytest.raises(ValueError):
        df.encode(wv, tiny_ckpt)


def test_refine_latent_steps_zero_is_noop(tiny_ckpt):
    wv = random_wavelet(tiny_ckpt.config, 2)
    z0 = np.random.default_rng(0).standard_normal(tiny_ckpt.config.latent_dim).astype(np.float32)
    out = df.refine_latent(z0, wv, tiny_ckpt, steps=0)
    assert out.tobytes() == z0.tobytes()
    assert out is not z0


def test_refine_latent_reduces_denoising_loss(tiny_ckpt):
    wv = random_wavelet(tiny_ckpt.config, 13)
    z0 = df.encode(wv, tiny_ckpt)
    z1 = df.refine_latent(z0, wv, tiny_ckpt, steps=25, lr=1e-2, seed=5)
    before = df.denoising_loss(z0, wv, tiny_ckpt, seed=5)
    after = df.denoising_loss(z1, wv, tiny_ckpt, seed=5)
    assert after < before
    z1_again = df.refine_latent(z0, wv, tiny_ckpt, steps=25, lr=1e-2, seed=5)
    assert z1.tobytes() == z1_again.tobytes()


# ---------------------------------------------------------------------------
# Deterministic sampling


def test_denoise_to_top_index_returns_seed_state(tiny_ckpt):
    cfg = tiny_ckpt.config
    z = np.zeros(cfg.latent_dim, dtype=np.float32)
    top = cfg.t_steps - 1
    wv = df.denoise_to(z, 42, top, tiny_ckpt)
    side = cfg.grid_side
    expected = np.random.default_rng(42).standard_normal(
        size=(8, side, side, side), dtype=np.float32
    )
    got = df.wavelet_to_array(wv)
    assert got.tobytes() == df.denormalize_channels(expected, cfg).tobytes()


def test_denoise_to_rejects_bad_stop(tiny_ckpt):
    z = np.zeros(tiny_ckpt.config.latent_dim, dtype=np.float32)
    with pytest.raises(ValueError):
        df.denoise_to(z, 0, tiny_ckpt.config.t_steps, tiny_ckpt)
    with pytest.raises(ValueError):
        df.denoise_to(z, 0, -1, tiny_ckpt)


def test_denoise_to_is_deterministic(tiny_ckpt):
    z = np.random.default_rng(8).standard_normal(tiny_ckpt.config.latent_dim).astype(np.float32)
    a = df.denoise_to(z, 31, 40, tiny_ckpt)
    b = df.denoise_to(z, 31, 40, tiny_ckpt)
    assert df.wavelet_to_array(a).tobytes() == df.wavelet_to_array(b).tobytes()


def test_decode_from_t_zero_is_identity(tiny_ckpt):
    cfg = tiny_ckpt.config
    wv = random_wavelet(cfg, 17)
    z = np.zeros(cfg.latent_dim, dtype=np.float32)
    out = df.decode_from(wv, z, 0, tiny_ckpt)
    assert df.wavelet_to_array(out).tobytes() == df.wavelet_to_array(wv).tobytes()


@pytest.mark.parametrize("t_split", [1, 20, 58])
def test_trajectory_splitting_is_exact(tiny_ckpt, t_split):
    z = np.random.default_rng(6).standard_normal(tiny_ckpt.config.latent_dim).astype(np.float32)
    full = df.denoise_to(z, 99, 0, tiny_ckpt)
    frozen = df.denoise_to(z, 99, t_split, tiny_ckpt)
    resumed = df.decode_from(frozen, z, t_split, tiny_ckpt)
    assert df.wavelet_to_array(resumed).tobytes() == df.wavelet_to_array(full).tobytes()


# ---------------------------------------------------------------------------
# Checkpoint files


def test_checkpoint_roundtrip_and_byte_stability(tmp_path, tiny_ckpt):
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    df.save_checkpoint(tiny_ckpt, p1)
    loaded = df.load_checkpoint(p1)
    assert loaded.config == tiny_ckpt.config
    assert sorted(loaded.params) == sorted(tiny_ckpt.params)
    for k in loaded.params:
        assert loaded.params[k].tobytes() == tiny_ckpt.params[k].astype("<f4").tobytes()
    df.save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        df.load_checkpoint(p)


# ---------------------------------------------------------------------------
# Config files


def test_parse_kv_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nsteps = 20\nlr=1e-3\n\nseed=4\n")
    assert df.parse_kv_file(p) == {"steps": "20", "lr": "1e-3", "seed": "4"}


def test_parse_kv_file_reports_line(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("steps=1\nbogus line\n")
    with pytest.raises(ValueError, match=":2:"):
        df.parse_kv_file(p)
