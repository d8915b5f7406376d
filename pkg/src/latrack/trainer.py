"""Two-stage training protocol with mechanically enforced freeze contracts.

Stage 1 tunes the UNet self-attention layers and the tracking head on RGB /
captioned data. Stage 2 freezes everything trained so far, clones the
encoder+middle into a sub-module (one scope, or the generalist) and tunes
only that. The codec is frozen in every stage. Trainability is decided by a
pure name predicate over checkpoint parameter names and verified post-hoc by
parameter checksums.
"""

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .codec import add_noise, encode_batch, pretrain_codec
from .data import SynthDataset, box_to_crop_coords, crop_search, crop_template
from .errors import ConfigError, DataError, RangeError
from .head import boxes_at_cells, focal_loss, giou_loss, l1_loss, make_gaussian_target, total_loss
from .model import TrackerModel, build_model, load_model, save_model
from .submodule import SCOPES, clone_submodule
from .text import tokenize

AUX_MODALITIES = ("depth", "thermal", "event")


@dataclass
class TrainConfig:
    stage: int = 1
    scope: str | None = None
    batch_size: int = 8
    steps: int = 1500
    lr_backbone: float = 1e-4
    lr_head: float = 1e-3
    weight_decay: float = 1e-3
    betas: tuple = (0.9, 0.999)
    floor_frac: float = 0.01
    lambda_giou: float = 2.0
    lambda_l1: float = 5.0
    caption_dropout: float = 0.5
    seed: int = 1234
    val_interval: int = 100
    grad_clip: float = 1.0
    rgb_only: bool = False
    no_zero_init: bool = False
    tune_unet_stage2: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.stage == 2 and self.scope not in SCOPES:
            raise ConfigError(f"stage 2 needs a scope from {SCOPES}, got {self.scope!r}")

    @classmethod
    def from_run_config(cls, cfg, stage, scope=None, steps=None):
        t = cfg["train"]
        return cls(
            stage=stage, scope=scope,
            batch_size=t["batch_size"],
            steps=steps or (t["steps_stage1"] if stage == 1 else t["steps_stage2"]),
            lr_backbone=t["lr_backbone"], lr_head=t["lr_head"],
            weight_decay=t["weight_decay"], betas=tuple(t["betas"]),
            floor_frac=t["floor_frac"],
            lambda_giou=t["lambda_giou"], lambda_l1=t["lambda_l1"],
            caption_dropout=t["caption_dropout"], seed=t["seed"],
            val_interval=t["val_interval"], grad_clip=t["grad_clip"],
            rgb_only=t["rgb_only"], no_zero_init=t["no_zero_init"],
            tune_unet_stage2=t["tune_unet_stage2"],
        )


@dataclass
class TunableMask:
    """Name predicate deciding which checkpoint parameters may move."""

    stage: int
    tune_unet_stage2: bool = False

    def trainable(self, name):
        if name.startswith("codec."):
            return False
        if self.stage == 1:
            return ".sa." in name or name.startswith("head.")
        if name.startswith("sub."):
            return True
        return self.tune_unet_stage2 and name.startswith("unet.") and ".sa." in name


def cosine_lr(step, total_steps, base_lr, floor_frac=0.01):
    """Cosine annealing from base_lr down to floor_frac * base_lr."""
    if not 0 <= step <= total_steps:
        raise RangeError(f"step {step} outside [0, {total_steps}]")
    floor = floor_frac * base_lr
    return floor + (base_lr - floor) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def param_checksums(model, predicate=None):
    out = {}
    for name, p in model.named_parameters():
        if predicate is None or predicate(name):
            out[name] = hashlib.sha256(p.detach().cpu().numpy().tobytes()).hexdigest()
    return out


def verify_frozen(before, after, mask: TunableMask):
    """Names whose checksum changed despite being frozen (must be empty)."""
    return [n for n in before if not mask.trainable(n) and after[n] != before[n]]


def apply_mask(model, mask: TunableMask):
    for name, p in model.named_parameters():
        p.requires_grad_(mask.trainable(name))


# ---------------------------------------------------------------------------
# batch sampling


class BatchSampler:
    """Seeded (template, search, targets) batches from one dataset split.

    Stage 1 yields RGB pairs with caption dropout; stage 2 adds aligned
    auxiliary-modality pairs (a fixed scope, or per-sample for the generalist)
    and uses the null caption throughout.
    """

    def __init__(self, dataset: SynthDataset, stage, scope, vocab, cond_length=8,
                 caption_dropout=0.5, map_size=16, rng=None):
        if stage == 2 and scope not in SCOPES:
            raise ConfigError(f"stage 2 sampling needs a valid scope, got {scope!r}")
        self.ds = dataset
        self.stage = stage
        self.scope = scope
        self.vocab = vocab
        self.cond_length = cond_length
        self.caption_dropout = caption_dropout
        self.map_size = map_size
        self.rng = rng or np.random.default_rng(0)
        self._template_cache = {}

    def _template(self, idx, modality):
        key = (idx, modality)
        if key not in self._template_cache:
            rec = self.ds[idx]
            crop = crop_template(rec.frame(0, modality), rec.boxes[0], modality=modality)
            self._template_cache[key] = crop
        return self._template_cache[key]

    def _pick_frame(self, rec):
        for _ in range(50):
            k = int(self.rng.integers(1, rec.length))
            if rec.visible[k]:
                return k
        raise DataError(f"sequence {rec.name} has no visible frames after frame 0")

    def _jitter(self, box):
        x, y, w, h = box
        dx = self.rng.uniform(-0.2, 0.2) * w
        dy = self.rng.uniform(-0.2, 0.2) * h
        s = math.exp(self.rng.uniform(-0.15, 0.15))
        return (x + dx + w * (1 - s) / 2, y + dy + h * (1 - s) / 2, w * s, h * s)

    def sample(self, batch_size):
        rgb_t, rgb_s, aux_t, aux_s = [], [], [], []
        token_rows, targets, modalities = [], [], []
        for _ in range(batch_size):
            idx = int(self.rng.integers(len(self.ds)))
            rec = self.ds[idx]
            k = self._pick_frame(rec)
            ref = self._jitter(rec.boxes[k])

            rgb_t.append(self._template(idx, "rgb").pixels)
            search = crop_search(rec.frame(k, "rgb"), ref)
            rgb_s.append(search.pixels)

            if self.stage == 2:
                modality = self.scope if self.scope != "generalist" \
                    else AUX_MODALITIES[int(self.rng.integers(len(AUX_MODALITIES)))]
                modalities.append(modality)
                aux_t.append(self._template(idx, modality).pixels)
                aux_s.append(crop_search(rec.frame(k, modality), ref, modality=modality).pixels)
                caption = ""
            else:
                caption = "" if self.rng.random() < self.caption_dropout else rec.caption
            token_rows.append(tokenize(caption, self.vocab, self.cond_length))

            gt = box_to_crop_coords(rec.boxes[k], search.crop_params)
            cx = float(np.clip(gt.cx, 1e-4, 1 - 1e-4))
            cy = float(np.clip(gt.cy, 1e-4, 1 - 1e-4))
            w = float(np.clip(gt.w, 1e-3, 1.0))
            h = float(np.clip(gt.h, 1e-3, 1.0))
            targets.append(make_gaussian_target(
                type(gt)(cx=cx, cy=cy, w=w, h=h), self.map_size, self.map_size))

        # gt boxes (cx, cy, w, h) reassembled from cell + offset so the
        # regression targets and the box loss see exactly the same geometry
        centers = []
        for t in targets:
            row, col = t.cell
            centers.append([(col + float(t.offset[0])) / self.map_size,
                            (row + float(t.offset[1])) / self.map_size])
        box = np.concatenate([np.asarray(centers),
                              np.stack([t.size.numpy() for t in targets])], axis=1)
        batch = {
            "template_px": torch.from_numpy(np.stack(rgb_t)),
            "search_px": torch.from_numpy(np.stack(rgb_s)),
            "token_ids": torch.stack(token_rows),
            "y": torch.stack([t.y for t in targets]).float(),
            "cells": [t.cell for t in targets],
            "gt_box": torch.from_numpy(box).float(),
            "modalities": modalities,
        }
        if self.stage == 2:
            batch["aux_template_px"] = torch.from_numpy(np.stack(aux_t))
            batch["aux_search_px"] = torch.from_numpy(np.stack(aux_s))
        return batch


def sample_batch(dataset, stage, scope, rng, vocab, batch_size=8, **kwargs):
    """One-shot functional wrapper around BatchSampler."""
    sampler = BatchSampler(dataset, stage, scope, vocab, rng=rng, **kwargs)
    return sampler.sample(batch_size)


# ---------------------------------------------------------------------------
# loss over a batch


def batch_loss(model: TrackerModel, batch, cfg: TrainConfig, eps_seed, sub_scope=None):
    t = model.timestep
    s_lat = encode_batch(model.codec, batch["search_px"])
    g_lat = encode_batch(model.codec, batch["template_px"])
    s_t = add_noise(s_lat, t, model.schedule, rng_seed=eps_seed, sample=True)
    g_t = add_noise(g_lat, t, model.schedule, rng_seed=eps_seed + 1, sample=True)
    cond = model.encode_cond(batch["token_ids"])

    aux_pair = None
    if sub_scope is not None:
        a_s = encode_batch(model.codec, batch["aux_search_px"])
        a_g = encode_batch(model.codec, batch["aux_template_px"])
        aux_pair = (
            add_noise(a_s, t, model.schedule, rng_seed=eps_seed + 2, sample=True),
            add_noise(a_g, t, model.schedule, rng_seed=eps_seed + 3, sample=True),
        )

    features = model.forward_features(s_t, g_t, cond, sub_scope=sub_scope, aux_pair=aux_pair)
    maps = model.head(features)
    l_cls = focal_loss(maps.cls, batch["y"])
    pred = boxes_at_cells(maps, batch["cells"])
    l_giou = giou_loss(pred, batch["gt_box"].to(pred.dtype))
    l_l1 = l1_loss(pred, batch["gt_box"].to(pred.dtype))
    total = total_loss(l_cls, l_giou, l_l1, cfg.lambda_giou, cfg.lambda_l1)
    parts = {"cls": float(l_cls.detach()), "giou": float(l_giou.detach()),
             "l1": float(l_l1.detach())}
    return total, parts


# ---------------------------------------------------------------------------
# training stages


def _optimizer(model, mask, cfg):
    backbone, head = [], []
    for name, p in model.named_parameters():
        if not mask.trainable(name):
            continue
        (head if name.startswith("head.") else backbone).append((name, p))
    groups = []
    if backbone:
        groups.append({"params": [p for _, p in backbone], "lr": cfg.lr_backbone, "base_lr": cfg.lr_backbone})
    if head:
        groups.append({"params": [p for _, p in head], "lr": cfg.lr_head, "base_lr": cfg.lr_head})
    opt = torch.optim.AdamW(groups, betas=cfg.betas, weight_decay=cfg.weight_decay)
    trainable = [p for _, p in backbone + head]
    return opt, trainable


def _train_loop(model, train_ds, val_ds, cfg: TrainConfig, mask, out_path, log_path,
                sub_scope=None, run_cfg=None, log=None):
    apply_mask(model, mask)
    frozen_before = param_checksums(model)
    opt, trainable = _optimizer(model, mask, cfg)

    sampler = BatchSampler(train_ds, cfg.stage, cfg.scope, model.vocab,
                           cond_length=model.model_cfg["cond_length"],
                           caption_dropout=cfg.caption_dropout,
                           rng=np.random.default_rng([cfg.seed, cfg.stage]))
    val_sampler = BatchSampler(val_ds, cfg.stage, cfg.scope, model.vocab,
                               cond_length=model.model_cfg["cond_length"],
                               caption_dropout=cfg.caption_dropout,
                               rng=np.random.default_rng([cfg.seed, 99]))
    val_batch = val_sampler.sample(min(cfg.batch_size * 2, 16))

    def val_loss():
        with torch.no_grad():
            loss, _ = batch_loss(model, val_batch, cfg, eps_seed=cfg.seed * 7 + 5, sub_scope=sub_scope)
        return float(loss)

    records = []
    torch.manual_seed(cfg.seed)
    v0 = val_loss()
    records.append({"step": 0, "val_loss": v0})
    for step in range(cfg.steps):
        for group in opt.param_groups:
            group["lr"] = cosine_lr(step, cfg.steps, group["base_lr"], cfg.floor_frac)
        batch = sampler.sample(cfg.batch_size)
        loss, parts = batch_loss(model, batch, cfg, eps_seed=cfg.seed + step * 17,
                                 sub_scope=sub_scope)
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
        opt.step()
        entry = {"step": step + 1, "loss": float(loss.detach()),
                 "lr": [g["lr"] for g in opt.param_groups], **parts}
        if (step + 1) % cfg.val_interval == 0 or step + 1 == cfg.steps:
            entry["val_loss"] = val_loss()
            if log:
                log(f"stage {cfg.stage} step {step + 1}/{cfg.steps}: "
                    f"loss {entry['loss']:.4f} val {entry['val_loss']:.4f}")
        records.append(entry)

    violations = verify_frozen(frozen_before, param_checksums(model), mask)
    if violations:
        raise ConfigError(f"freeze contract violated for: {violations[:5]}")

    final_val = val_loss()
    meta = {
        "stage": cfg.stage, "scope": cfg.scope, "step": cfg.steps,
        "train_cfg": {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in cfg.__dict__.items()},
        "val_loss": final_val,
        "run_cfg_hash": run_cfg or "",
    }
    if out_path:
        save_model(out_path, model, extra_meta=meta)
    if log_path:
        with open(log_path, "w") as fh:
            fh.write(json.dumps({"config_hash": run_cfg or "", "stage": cfg.stage,
                                 "scope": cfg.scope, "seed": cfg.seed}, sort_keys=True) + "\n")
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return model, final_val, records


def train_stage1(run_cfg, data_root, codec, out_path=None, log_path=None, cfg=None, log=None):
    """Tune UNet self-attention + head on the RGB/caption training split."""
    from .config import config_hash

    if codec is None or not getattr(codec, "frozen", False):
        raise ConfigError("stage 1 requires a pretrained, frozen codec")
    cfg = cfg or TrainConfig.from_run_config(run_cfg, stage=1)
    model = build_model(run_cfg["model"], codec)
    train_ds = SynthDataset(data_root, "train")
    val_ds = SynthDataset(data_root, "val")
    mask = TunableMask(stage=1)
    return _train_loop(model, train_ds, val_ds, cfg, mask, out_path, log_path,
                       run_cfg=config_hash(run_cfg), log=log)


def train_stage2(run_cfg, data_root, stage1_ckpt, scope, out_path=None, log_path=None,
                 cfg=None, log=None):
    """Freeze the stage-1 model, clone and tune one sub-module."""
    from .config import config_hash

    cfg = cfg or TrainConfig.from_run_config(run_cfg, stage=2, scope=scope)
    if cfg.rgb_only:
        raise ConfigError("rgb_only ablation bypasses stage 2 entirely")
    model, meta = load_model(stage1_ckpt)
    if meta.get("stage") != 1:
        raise ConfigError(f"{stage1_ckpt} is not a stage-1 checkpoint")
    sub = clone_submodule(model.unet, scope, no_zero_init=cfg.no_zero_init,
                          input_mode=run_cfg["model"]["sub_input"], rng_seed=cfg.seed)
    model.attach_sub(sub)
    train_ds = SynthDataset(data_root, "train")
    val_ds = SynthDataset(data_root, "val")
    mask = TunableMask(stage=2, tune_unet_stage2=cfg.tune_unet_stage2)
    return _train_loop(model, train_ds, val_ds, cfg, mask, out_path, log_path,
                       sub_scope=scope, run_cfg=config_hash(run_cfg), log=log)


# ---------------------------------------------------------------------------
# codec corpus helper


def build_codec_corpus(data_root, n_crops=400, rng_seed=5, splits=("train",)):
    """Search-style crops across sequences and modalities for codec pretraining."""
    rng = np.random.default_rng(rng_seed)
    crops = []
    datasets = [SynthDataset(data_root, s) for s in splits]
    modalities = ("rgb", "rgb", "depth", "thermal", "event")  # rgb twice: it varies most
    while len(crops) < n_crops:
        ds = datasets[int(rng.integers(len(datasets)))]
        rec = ds[int(rng.integers(len(ds)))]
        k = int(rng.integers(rec.length))
        m = modalities[int(rng.integers(len(modalities)))]
        box = rec.boxes[k]
        if box[2] <= 0 or box[3] <= 0:
            continue
        jitter = rng.uniform(-0.3, 0.3, 2) * box[2:4]
        ref = (box[0] + jitter[0], box[1] + jitter[1], box[2], box[3])
        crops.append(crop_search(rec.frame(k, m), ref, modality=m if m != "rgb" else "rgb"))
    return crops


def pretrain_codec_from_data(run_cfg, data_root, out_path=None, log=None):
    from .codec import save_codec

    seed = run_cfg["train"]["seed"]
    corpus = build_codec_corpus(data_root, n_crops=400, rng_seed=seed)
    held_out = build_codec_corpus(data_root, n_crops=160, rng_seed=seed + 1, splits=("val",))
    codec = pretrain_codec(
        corpus,
        steps=run_cfg["train"]["steps_codec"],
        rng_seed=seed,
        c_z=run_cfg["model"]["c_z"],
        downsample_factor=run_cfg["model"]["downsample_factor"],
        base_channels=run_cfg["model"]["codec_channels"],
        calibration_set=held_out,
    )
    if log:
        log(f"codec pretrained on {len(corpus)} crops, latent scale {codec.latent_scale:.3f}")
    if out_path:
        from .config import config_hash

        save_codec(out_path, codec,
                   config={**run_cfg["model"], "config_hash": config_hash(run_cfg)})
    return codec
