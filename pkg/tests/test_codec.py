import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from latrack.codec import (
    CodecAE, ImageCrop, add_noise, compute_schedule, encode_crop, load_codec,
    pretrain_codec, save_codec,
)
from latrack.errors import ConfigError, DataError, RangeError, ShapeError


def test_schedule_first_step_matches_hand_value():
    sched = compute_schedule(1000, 8.5e-4, 1.2e-2)
    assert sched.alpha_bar_at(1) == pytest.approx(0.99915, abs=1e-12)


def test_schedule_two_step_hand_product():
    sched = compute_schedule(2, 0.1, 0.2)
    assert sched.alpha_bar_at(2) == pytest.approx(0.72, abs=1e-12)
    assert sched.beta[0] == pytest.approx(0.1)
    assert sched.beta[1] == pytest.approx(0.2)


def test_schedule_rejects_bad_ranges():
    with pytest.raises(ConfigError):
        compute_schedule(1, 0.5, 0.5)
    with pytest.raises(ConfigError):
        compute_schedule(10, 0.2, 0.1)
    with pytest.raises(ConfigError):
        compute_schedule(0, 0.1, 0.2)
    with pytest.raises(ConfigError):
        compute_schedule(10, 0.0, 0.2)


def test_schedule_monotone_and_unitary():
    sched = compute_schedule()
    assert np.all(np.diff(sched.beta) > 0)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all((sched.alpha_bar > 0) & (sched.alpha_bar < 1))
    ident = np.sqrt(sched.alpha_bar) ** 2 + np.sqrt(1.0 - sched.alpha_bar) ** 2
    assert np.max(np.abs(ident - 1.0)) < 1e-12


def test_add_noise_zero_eps_scales_signal():
    sched = compute_schedule()
    z0 = torch.ones(4, 8, 8)
    out = add_noise(z0, 1, sched, eps=torch.zeros_like(z0))
    assert torch.allclose(out, math.sqrt(0.99915) * z0, atol=1e-7)


def test_add_noise_zero_signal_scales_eps():
    sched = compute_schedule()
    eps = torch.randn(4, 8, 8)
    out = add_noise(torch.zeros_like(eps), 1, sched, eps=eps)
    assert torch.allclose(out, math.sqrt(1 - 0.99915) * eps, atol=1e-7)


def test_add_noise_timestep_range():
    sched = compute_schedule(t_max=10)
    z0 = torch.zeros(1, 2, 2)
    with pytest.raises(RangeError):
        add_noise(z0, 0, sched)
    with pytest.raises(RangeError):
        add_noise(z0, 11, sched)


def test_add_noise_inference_mode_is_deterministic():
    sched = compute_schedule()
    z0 = torch.randn(4, 4, 4)
    a = add_noise(z0, 1, sched, sample=False)
    b = add_noise(z0, 1, sched, sample=False)
    assert torch.equal(a, b)
    assert torch.allclose(a, math.sqrt(0.99915) * z0, atol=1e-7)


def test_add_noise_seeded_draws_reproducible():
    sched = compute_schedule()
    z0 = torch.randn(4, 4, 4)
    a = add_noise(z0, 1, sched, rng_seed=42)
    b = add_noise(z0, 1, sched, rng_seed=42)
    c = add_noise(z0, 1, sched, rng_seed=43)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


@settings(max_examples=25, deadline=None)
@given(st.floats(min_value=-4.0, max_value=4.0).filter(lambda a: abs(a) > 1e-3))
def test_add_noise_affine_in_signal_and_noise(a):
    sched = compute_schedule()
    gen = torch.Generator().manual_seed(7)
    z0 = torch.randn(4, 6, 6, generator=gen)
    eps = torch.randn(4, 6, 6, generator=gen)
    lhs = add_noise(a * z0, 1, sched, eps=a * eps)
    rhs = a * add_noise(z0, 1, sched, eps=eps)
    rel = float((lhs - rhs).abs().max() / rhs.abs().max())
    assert rel <= 1e-6


def test_encode_shapes_and_determinism(rng):
    torch.manual_seed(0)
    codec = CodecAE(base_channels=8)
    crop = ImageCrop(pixels=rng.random((3, 128, 128), dtype=np.float32))
    a = encode_crop(crop, codec, allow_untrained=True)
    assert tuple(a.values.shape) == (4, 16, 16)
    assert a.scale_applied
    b = encode_crop(crop, codec, allow_untrained=True)
    assert torch.equal(a.values, b.values)
    small = ImageCrop(pixels=rng.random((3, 64, 64), dtype=np.float32))
    assert tuple(encode_crop(small, codec, allow_untrained=True).values.shape) == (4, 8, 8)


def test_encode_rejects_non_divisible_dims(rng):
    codec = CodecAE(base_channels=8)
    crop = ImageCrop(pixels=rng.random((3, 60, 60), dtype=np.float32))
    with pytest.raises(ShapeError):
        encode_crop(crop, codec, allow_untrained=True)


def test_encode_requires_pretrained_codec_unless_flagged(rng):
    codec = CodecAE(base_channels=8)
    crop = ImageCrop(pixels=rng.random((3, 64, 64), dtype=np.float32))
    with pytest.raises(ConfigError):
        encode_crop(crop, codec)
    codec.freeze()
    assert tuple(encode_crop(crop, codec).values.shape) == (4, 8, 8)


def test_image_crop_validation(rng):
    with pytest.raises(DataError):
        ImageCrop(pixels=np.full((3, 8, 8), 2.0, dtype=np.float32))
    bad = np.zeros((3, 8, 8), dtype=np.float32)
    bad[0, 0, 0] = np.nan
    with pytest.raises(DataError):
        ImageCrop(pixels=bad)
    with pytest.raises(ConfigError):
        ImageCrop(pixels=np.zeros((3, 8, 8), dtype=np.float32), modality_tag="sonar")


def test_pretrain_memorizes_constant_gray():
    crops = [np.full((3, 32, 32), 0.5, dtype=np.float32) for _ in range(8)]
    codec = pretrain_codec(crops, steps=500, rng_seed=0, base_channels=8, batch_size=8)
    recon = codec(torch.from_numpy(np.stack(crops[:4])))
    mse = float(((recon - 0.5) ** 2).mean())
    assert mse <= 1e-3
    assert codec.frozen
    assert all(not p.requires_grad for p in codec.parameters())


def test_pretrain_preconditions():
    with pytest.raises(DataError):
        pretrain_codec([], steps=10)
    crops = [np.zeros((3, 16, 16), dtype=np.float32)]
    with pytest.raises(ConfigError):
        pretrain_codec(crops, steps=0)


def test_latent_scale_calibration_on_held_out(tiny_root):
    from latrack.trainer import build_codec_corpus

    train_crops = build_codec_corpus(tiny_root, n_crops=40, rng_seed=2)
    held_out = build_codec_corpus(tiny_root, n_crops=32, rng_seed=9, splits=("val",))
    codec = pretrain_codec(train_crops, steps=300, rng_seed=3, base_channels=8,
                           calibration_set=held_out)
    stack = torch.from_numpy(np.stack([c.pixels for c in held_out]))
    lat = codec.encode(stack) * codec.latent_scale
    per_channel = lat.std(dim=(0, 2, 3))
    assert float(lat.std()) == pytest.approx(1.0, rel=0.05)
    assert float(per_channel.min()) > 0.8 and float(per_channel.max()) < 1.25
    # calibration folds into the conv weights without disturbing reconstruction
    recon = codec(stack)
    assert torch.isfinite(recon).all()
    assert float(((recon - stack) ** 2).mean()) < 0.1


def test_codec_checkpoint_roundtrip(tmp_path, rng):
    crops = [rng.random((3, 32, 32), dtype=np.float32) for _ in range(6)]
    codec = pretrain_codec(crops, steps=15, rng_seed=0, base_channels=8)
    path = tmp_path / "codec.npz"
    save_codec(path, codec, config={"note": 1})
    loaded, meta = load_codec(path)
    assert meta["latent_scale"] == pytest.approx(codec.latent_scale)
    assert meta["f"] == 8 and meta["c_z"] == 4
    x = torch.from_numpy(np.stack(crops[:2]))
    assert torch.equal(codec.encode(x), loaded.encode(x))
