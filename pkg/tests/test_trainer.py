import json
import math

import numpy as np
import pytest
import torch

from latrack.errors import ConfigError, RangeError
from latrack.data import SynthDataset
from latrack.model import build_model, load_model
from latrack.trainer import (
    BatchSampler, TrainConfig, TunableMask, batch_loss, cosine_lr, param_checksums,
    sample_batch, train_stage1, train_stage2, verify_frozen,
)


def test_cosine_lr_anchors():
    assert cosine_lr(0, 100, 1e-3) == pytest.approx(1e-3)
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(1e-5)
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5.05e-4, abs=1e-12)


def test_cosine_lr_range_errors():
    with pytest.raises(RangeError):
        cosine_lr(101, 100, 1e-3)
    with pytest.raises(RangeError):
        cosine_lr(-1, 100, 1e-3)


def test_train_config_defaults_match_contract():
    cfg = TrainConfig()
    assert cfg.lambda_giou == 2.0 and cfg.lambda_l1 == 5.0
    assert not cfg.rgb_only and not cfg.no_zero_init and not cfg.tune_unet_stage2
    with pytest.raises(ConfigError):
        TrainConfig(stage=3)
    with pytest.raises(ConfigError):
        TrainConfig(stage=2, scope="sonar")


def test_tunable_mask_stage1(tiny_model):
    mask = TunableMask(stage=1)
    names = [n for n, _ in tiny_model.named_parameters()]
    trainable = {n for n in names if mask.trainable(n)}
    for n in trainable:
        assert ".sa." in n or n.startswith("head.")
    assert any(n.startswith("unet.") and ".sa." in n for n in trainable)
    assert all(not n.startswith("codec.") for n in trainable)
    assert all(not n.startswith("text.") for n in trainable)
    # every self-attention and head parameter is covered
    for n in names:
        if ".sa." in n or n.startswith("head."):
            assert n in trainable


def test_tunable_mask_stage2():
    mask = TunableMask(stage=2)
    assert mask.trainable("sub.depth.zconv.0.weight")
    assert mask.trainable("sub.generalist.enc.0.blocks.0.sa.q.weight")
    assert not mask.trainable("unet.enc.0.blocks.0.sa.q.weight")
    assert not mask.trainable("head.cls.2.bias")
    assert not mask.trainable("codec.enc.0.0.weight")
    unlocked = TunableMask(stage=2, tune_unet_stage2=True)
    assert unlocked.trainable("unet.enc.0.blocks.0.sa.q.weight")
    assert not unlocked.trainable("unet.enc.0.blocks.0.res.conv1.weight")


def test_stage1_batches_have_no_aux(tiny_root, tiny_model):
    ds = SynthDataset(tiny_root, "train")
    batch = sample_batch(ds, 1, None, np.random.default_rng(0), tiny_model.vocab,
                         batch_size=4, cond_length=8)
    assert "aux_search_px" not in batch
    assert batch["search_px"].shape == (4, 3, 128, 128)
    assert batch["template_px"].shape == (4, 3, 64, 64)
    assert batch["y"].shape == (4, 16, 16)
    assert batch["gt_box"].shape == (4, 4)


def test_generalist_batch_mixes_modalities(tiny_root, tiny_model):
    ds = SynthDataset(tiny_root, "train")
    batch = sample_batch(ds, 2, "generalist", np.random.default_rng(3), tiny_model.vocab,
                         batch_size=12, cond_length=8)
    assert set(batch["modalities"]) == {"depth", "thermal", "event"}
    assert batch["aux_search_px"].shape == (12, 3, 128, 128)
    # stage-2 batches carry the null caption everywhere
    assert (batch["token_ids"][:, 0] == 1).all()


def test_batch_sampling_deterministic(tiny_root, tiny_model):
    ds = SynthDataset(tiny_root, "train")
    a = sample_batch(ds, 1, None, np.random.default_rng(42), tiny_model.vocab, batch_size=3)
    b = sample_batch(ds, 1, None, np.random.default_rng(42), tiny_model.vocab, batch_size=3)
    assert torch.equal(a["search_px"], b["search_px"])
    assert torch.equal(a["token_ids"], b["token_ids"])
    assert a["cells"] == b["cells"]


def test_template_comes_from_frame_zero(tiny_root, tiny_model):
    from latrack.data import crop_template

    ds = SynthDataset(tiny_root, "train")
    sampler = BatchSampler(ds, 1, None, tiny_model.vocab, rng=np.random.default_rng(0))
    batch = sampler.sample(2)
    found = False
    for idx in range(len(ds)):
        rec = ds[idx]
        manual = crop_template(rec.frame(0, "rgb"), rec.boxes[0])
        for i in range(2):
            if torch.equal(batch["template_px"][i], torch.from_numpy(manual.pixels)):
                found = True
    assert found


def test_stage1_freeze_contract_and_checkpoint(tiny_root, tiny_cfg, tiny_codec, tmp_path):
    out = tmp_path / "s1.npz"
    log = tmp_path / "s1.jsonl"
    model, val, _ = train_stage1(tiny_cfg, tiny_root, tiny_codec,
                                 out_path=out, log_path=log)
    # non-self-attention UNet parameters bit-identical to a fresh init
    reference = build_model(tiny_cfg["model"], tiny_codec)
    for (name, p), (_, q) in zip(model.named_parameters(), reference.named_parameters()):
        if name.startswith("unet.") and ".sa." not in name:
            assert torch.equal(p, q), name
        if name.startswith(("codec.", "text.")):
            assert torch.equal(p, q), name
    # self-attention and head parameters actually moved
    moved = [n for (n, p), (_, q) in zip(model.named_parameters(), reference.named_parameters())
             if not torch.equal(p, q)]
    assert any(".sa." in n for n in moved) and any(n.startswith("head.") for n in moved)

    # checkpoint reload reproduces the validation loss
    loaded, meta = load_model(out)
    assert meta["stage"] == 1
    cfg = TrainConfig.from_run_config(tiny_cfg, stage=1)
    ds = SynthDataset(tiny_root, "val")
    sampler = BatchSampler(ds, 1, None, model.vocab, rng=np.random.default_rng([cfg.seed, 99]))
    batch = sampler.sample(4)
    with torch.no_grad():
        a, _ = batch_loss(model, batch, cfg, eps_seed=1)
        b, _ = batch_loss(loaded, batch, cfg, eps_seed=1)
    assert abs(float(a) - float(b)) <= 1e-6
    # training log is JSONL with loss components
    entries = [json.loads(line) for line in log.read_text().splitlines()]
    assert any("val_loss" in e for e in entries)
    assert all(math.isfinite(e["loss"]) for e in entries if "loss" in e)


def test_stage2_freeze_contract_and_zero_init_start(tiny_root, tiny_cfg, tiny_codec, tmp_path):
    s1 = tmp_path / "s1.npz"
    model1, _, _ = train_stage1(tiny_cfg, tiny_root, tiny_codec, out_path=s1)
    before = param_checksums(model1)

    s2 = tmp_path / "s2.npz"
    model2, _, _ = train_stage2(tiny_cfg, tiny_root, s1, "thermal", out_path=s2)
    after = param_checksums(model2)
    for name, digest in before.items():
        assert after[name] == digest, f"frozen parameter {name} changed in stage 2"
    assert any(n.startswith("sub.thermal.") for n in after)
    mask = TunableMask(stage=2)
    assert verify_frozen(before, {k: after[k] for k in before}, mask) == []

    # at step 0 a fresh clone reproduces the stage-1 model's outputs exactly
    from latrack.submodule import clone_submodule, fused_forward

    fresh = clone_submodule(model1.unet, "thermal")
    gen = torch.Generator().manual_seed(0)
    s = torch.randn(1, 4, 16, 16, generator=gen)
    g = torch.randn(1, 4, 8, 8, generator=gen)
    cond = torch.randn(1, 8, tiny_cfg["model"]["d_cond"], generator=gen)
    with torch.no_grad():
        base, _ = model1.unet(s, g, cond, t=1)
        fused = fused_forward((s, g), (s, g), cond, 1, model1.unet, fresh)
    assert torch.equal(base.search, fused.search)


def test_stage2_requires_stage1_checkpoint(tiny_root, tiny_cfg, tiny_codec, tmp_path):
    bogus = tmp_path / "codec_only.npz"
    from latrack.codec import save_codec

    save_codec(bogus, tiny_codec)
    with pytest.raises(ConfigError):
        train_stage2(tiny_cfg, tiny_root, bogus, "depth")


def test_generalist_produces_single_parameter_family(tiny_root, tiny_cfg, tiny_codec, tmp_path):
    s1 = tmp_path / "s1.npz"
    train_stage1(tiny_cfg, tiny_root, tiny_codec, out_path=s1)
    model, _, _ = train_stage2(tiny_cfg, tiny_root, s1, "generalist")
    sub_names = {n.split(".")[1] for n, _ in model.named_parameters() if n.startswith("sub.")}
    assert sub_names == {"generalist"}


def test_rgb_only_flag_bypasses_stage2(tiny_root, tiny_cfg, tiny_codec, tmp_path):
    s1 = tmp_path / "s1.npz"
    train_stage1(tiny_cfg, tiny_root, tiny_codec, out_path=s1)
    cfg = TrainConfig.from_run_config(tiny_cfg, stage=2, scope="depth")
    cfg.rgb_only = True
    with pytest.raises(ConfigError):
        train_stage2(tiny_cfg, tiny_root, s1, "depth", cfg=cfg)


def test_training_reproducible_across_runs(tiny_root, tiny_cfg, tiny_codec):
    _, val_a, _ = train_stage1(tiny_cfg, tiny_root, tiny_codec)
    _, val_b, _ = train_stage1(tiny_cfg, tiny_root, tiny_codec)
    assert abs(val_a - val_b) <= 1e-5


def test_stage1_requires_frozen_codec(tiny_root, tiny_cfg):
    from latrack.codec import CodecAE

    thawed = CodecAE(base_channels=8)
    with pytest.raises(ConfigError):
        train_stage1(tiny_cfg, tiny_root, thawed)
