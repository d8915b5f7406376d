"""Train a small tracker end to end and watch the freeze contracts hold.

Generates a pocket dataset, pretrains the codec, runs a short stage 1
(self-attention + head) and a short stage 2 (thermal sub-module), then checks
which parameter families actually moved.

This is a narrative walkthrough, not a benchmark; expect a couple of minutes.
For a tracker that actually tracks well, scale the step counts up (see
README, "Reproducing the acceptance runs").

Run:  python3 demos/03_train_small_tracker.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

import torch

from latrack.codec import load_codec
from latrack.config import validate_config
from latrack.data import build_spec, generate_sequence
from latrack.model import build_model, load_model
from latrack.trainer import param_checksums, pretrain_codec_from_data, train_stage1, train_stage2

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
cfg = validate_config({
    "model": {"base_channels": 32, "codec_channels": 16},
    "data": {"root": str(work / "data"), "length": 16,
             "splits": {"train": 24, "val": 4, "test_bright": 2, "test_dark": 2, "test_rgbn": 2}},
    "train": {"steps_codec": 300, "steps_stage1": 150, "steps_stage2": 80, "val_interval": 50},
})

print("1. generating the pocket dataset ...")
for split, count in cfg["data"]["splits"].items():
    for i in range(count):
        generate_sequence(build_spec(split, i, length=cfg["data"]["length"]),
                          work / "data" / split / f"{split}-{i:03d}")

print("2. pretraining the codec (frozen afterwards) ...")
codec = pretrain_codec_from_data(cfg, work / "data", out_path=work / "codec.npz", log=print)

print("3. stage 1: tune UNet self-attention + head on RGB/caption data ...")
model, val1, _ = train_stage1(cfg, work / "data", codec, out_path=work / "s1.npz", log=print)
fresh = build_model(cfg["model"], codec)
moved = [n for (n, p), (_, q) in zip(model.named_parameters(), fresh.named_parameters())
         if not torch.equal(p, q)]
print(f"   parameters that moved: {len(moved)} "
      f"(all self-attention or head: {all('.sa.' in n or n.startswith('head.') for n in moved)})")

print("4. stage 2: freeze everything, tune a thermal sub-module ...")
before = param_checksums(model)
model2, val2, _ = train_stage2(cfg, work / "data", work / "s1.npz", "thermal",
                               out_path=work / "s2_thermal.npz", log=print)
after = param_checksums(model2)
frozen_held = all(after[n] == before[n] for n in before)
print(f"   frozen families bit-identical through stage 2: {frozen_held}")
print(f"   new parameter family: sub.thermal.* "
      f"({sum(n.startswith('sub.thermal.') for n in after)} tensors)")
print(f"\ncheckpoints in {work}: codec.npz, s1.npz, s2_thermal.npz")
print(f"stage-1 val loss {val1:.4f}, stage-2 val loss {val2:.4f}")
