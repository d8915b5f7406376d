"""Run the online tracker over a sequence and score it with the OPE metrics.

Uses an untrained model (so the numbers are humble); the point is the loop:
init from frame 0, crop around the previous prediction, decode, map back,
then success/precision/F-score with the brute-force oracle cross-check.

Run:  python3 demos/04_track_and_evaluate.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

from latrack.codec import pretrain_codec
from latrack.config import validate_config
from latrack.data import SynthDataset, build_spec, generate_sequence
from latrack.evaluate import compute_metrics, emit_report, load_run, oracle_check
from latrack.model import build_model
from latrack.runtime import track_dataset
from latrack.trainer import build_codec_corpus

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
cfg = validate_config({"model": {"base_channels": 16, "codec_channels": 8,
                                 "d_cond": 32, "t_emb_dim": 32, "head_width": 16}})

print("1. a few test sequences ...")
for i in range(3):
    generate_sequence(build_spec("test_bright", i, length=12),
                      work / "data" / "test_bright" / f"test_bright-{i:03d}")
ds = SynthDataset(work / "data", "test_bright")

print("2. quick codec + untrained model ...")
codec = pretrain_codec(build_codec_corpus(work / "data", n_crops=32, rng_seed=0,
                                          splits=("test_bright",)), steps=60, rng_seed=0,
                       base_channels=8)
model = build_model(cfg["model"], codec)

print("3. tracking (deterministic: rerunning gives identical files) ...")
out = track_dataset(ds, "rgb", model, work / "results", log=print)
for line in (out / f"{ds[0].name}.txt").read_text().splitlines()[:3]:
    print(f"   {line}")

print("4. metrics, cross-checked against the naive double-loop oracle ...")
runs = load_run(out, ds)
oracle_check(runs)
metrics = compute_metrics(runs)
for key in ("success_auc", "precision", "norm_precision", "mean_iou", "f_score"):
    print(f"   {key}: {metrics[key]:.3f}")

print("5. report files (report.json, summary.md, SVG curves) ...")
paths = emit_report({"rgb": runs}, work / "report")
for p in paths:
    print(f"   wrote {p}")
