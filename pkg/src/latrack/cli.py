"""Command-line entry point orchestrating the full pipeline.

Exit status: 0 success, 1 validation error (bad flags, config, missing
artifacts, precondition failures), 2 runtime failure (including selfcheck
failures). Flags override config values.
"""

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import config_hash, load_config
from .errors import ConfigError, DataError, LatrackError, RangeError, ShapeError

VALIDATION_ERRORS = (ConfigError, DataError, RangeError, ShapeError, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _gen_one(args):
    from .data import build_spec, generate_sequence

    split, i, length, root = args
    generate_sequence(build_spec(split, i, length=length), Path(root) / split / f"{split}-{i:03d}")


def cmd_gen_data(args, cfg):
    length = args.length or cfg["data"]["length"]
    root = Path(args.root or cfg["data"]["root"])
    splits = cfg["data"]["splits"]
    jobs = [(split, i, length, root) for split, count in splits.items()
            for i in range(int(count))]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            list(pool.map(_gen_one, jobs))
    else:
        for job in jobs:
            _gen_one(job)
    print(f"generated {len(jobs)} sequences under {root} (config {config_hash(cfg)})")
    return 0


def cmd_pretrain_codec(args, cfg):
    from .trainer import pretrain_codec_from_data

    root = args.root or cfg["data"]["root"]
    if args.steps:
        cfg["train"]["steps_codec"] = args.steps
    pretrain_codec_from_data(cfg, root, out_path=args.out, log=print)
    print(f"codec checkpoint written to {args.out}")
    return 0


def cmd_train_stage1(args, cfg):
    from .codec import load_codec
    from .trainer import TrainConfig, train_stage1

    root = args.root or cfg["data"]["root"]
    if not Path(args.codec).exists():
        raise FileNotFoundError(f"codec checkpoint {args.codec} not found")
    codec, _ = load_codec(args.codec)
    if args.steps:
        cfg["train"]["steps_stage1"] = args.steps
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    tc = TrainConfig.from_run_config(cfg, stage=1)
    _, val, _ = train_stage1(cfg, root, codec, out_path=args.out, log_path=args.log,
                             cfg=tc, log=print)
    print(f"stage-1 checkpoint written to {args.out} (val loss {val:.4f})")
    return 0


def cmd_train_stage2(args, cfg):
    from .trainer import TrainConfig, train_stage2

    root = args.root or cfg["data"]["root"]
    if not Path(args.ckpt).exists():
        raise FileNotFoundError(f"stage-1 checkpoint {args.ckpt} not found")
    if args.steps:
        cfg["train"]["steps_stage2"] = args.steps
    if args.no_zero_init:
        cfg["train"]["no_zero_init"] = True
    if args.tune_unet:
        cfg["train"]["tune_unet_stage2"] = True
    tc = TrainConfig.from_run_config(cfg, stage=2, scope=args.scope)
    _, val, _ = train_stage2(cfg, root, args.ckpt, args.scope, out_path=args.out,
                             log_path=args.log, cfg=tc, log=print)
    print(f"stage-2 [{args.scope}] checkpoint written to {args.out} (val loss {val:.4f})")
    return 0


def cmd_track(args, cfg):
    from .data import SynthDataset
    from .model import load_model
    from .runtime import track_dataset

    root = args.root or cfg["data"]["root"]
    if not Path(args.ckpt).exists():
        raise FileNotFoundError(f"checkpoint {args.ckpt} not found")
    model, _ = load_model(args.ckpt)
    dataset = SynthDataset(root, args.split)
    out = track_dataset(dataset, args.mode, model, args.results,
                        window_weight=cfg["runtime"]["window_weight"],
                        min_box_px=cfg["runtime"]["min_box_px"], log=print)
    print(f"results written under {out}")
    return 0


def cmd_eval(args, cfg):
    from .data import SynthDataset
    from .evaluate import compute_metrics, load_run, oracle_check

    dataset = SynthDataset(args.root or cfg["data"]["root"], args.split)
    runs = load_run(Path(args.results) / args.mode, dataset)
    metrics = compute_metrics(runs, report_px=cfg["eval"]["report_px"])
    if not args.skip_oracle:
        oracle_check(runs)
        metrics["oracle_checked"] = True
    text = json.dumps(metrics, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_report(args, cfg):
    from .data import SynthDataset
    from .evaluate import emit_report, load_run

    dataset = SynthDataset(args.root or cfg["data"]["root"], args.split)
    results_root = Path(args.results)
    modes = args.modes.split(",") if args.modes else sorted(
        d.name for d in results_root.iterdir() if d.is_dir())
    if not modes:
        raise DataError(f"no mode directories under {results_root}")
    runs = {mode: load_run(results_root / mode, dataset) for mode in modes}
    paths = emit_report(runs, args.out, report_px=cfg["eval"]["report_px"],
                        config_hash=config_hash(cfg))
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_selfcheck(args, cfg):
    from .selfcheck import run_all

    failures = run_all(out=print)
    return 2 if failures else 0


def cmd_validate_config(args, cfg):
    print(json.dumps(cfg, sort_keys=True, indent=2))
    print(f"config hash: {config_hash(cfg)}", file=sys.stderr)
    return 0


def cmd_inspect_ckpt(args, cfg):
    from .checkpoint import load_checkpoint

    if not Path(args.ckpt).exists():
        raise FileNotFoundError(f"checkpoint {args.ckpt} not found")
    arrays, meta = load_checkpoint(args.ckpt)
    for name in sorted(arrays):
        print(f"{name}  {list(arrays[name].shape)}")
    summary = {k: v for k, v in meta.items() if k not in ("vocab", "torch_rng")}
    print(json.dumps(summary, sort_keys=True, indent=2))
    return 0


def build_parser():
    parser = _Parser(prog="latrack", description=__doc__)
    parser.add_argument("--config", help="JSON run-config file (defaults merged in)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic multi-modal splits "
                                        "(reads data.root, data.length, data.splits)")
    p.add_argument("--root", help="dataset root directory (overrides data.root)")
    p.add_argument("--length", type=int, help="frames per sequence (overrides data.length)")
    p.add_argument("--workers", type=int, default=1, help="parallel generator processes")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain-codec", help="pretrain and freeze the image codec "
                                              "(reads train.steps_codec, train.seed, model.*)")
    p.add_argument("--root", help="dataset root")
    p.add_argument("--out", required=True, help="codec checkpoint path (.npz)")
    p.add_argument("--steps", type=int, help="override train.steps_codec")
    p.set_defaults(fn=cmd_pretrain_codec)

    p = sub.add_parser("train-stage1", help="tune UNet self-attention + head on RGB data "
                                            "(reads train.*, model.*)")
    p.add_argument("--root", help="dataset root")
    p.add_argument("--codec", required=True, help="codec checkpoint from pretrain-codec")
    p.add_argument("--out", required=True, help="stage-1 checkpoint path")
    p.add_argument("--log", help="JSONL training log path")
    p.add_argument("--steps", type=int, help="override train.steps_stage1")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.set_defaults(fn=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="freeze the model, tune one sub-module "
                                            "(reads train.*, model.sub_input)")
    p.add_argument("--scope", required=True, choices=("depth", "thermal", "event", "generalist"))
    p.add_argument("--root", help="dataset root")
    p.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", required=True, help="stage-2 checkpoint path")
    p.add_argument("--log", help="JSONL training log path")
    p.add_argument("--steps", type=int, help="override train.steps_stage2")
    p.add_argument("--no-zero-init", action="store_true", help="ablation: random-init the injections")
    p.add_argument("--tune-unet", action="store_true", help="ablation: also tune UNet self-attention")
    p.set_defaults(fn=cmd_train_stage2)

    p = sub.add_parser("track", help="run OPE tracking over one split "
                                     "(reads runtime.window_weight, runtime.min_box_px)")
    p.add_argument("--mode", required=True,
                   choices=("rgb", "rgb+language", "rgb+depth", "rgb+thermal", "rgb+event"))
    p.add_argument("--ckpt", required=True, help="tracker checkpoint")
    p.add_argument("--root", help="dataset root")
    p.add_argument("--split", default="test_bright", help="dataset split to track")
    p.add_argument("--results", required=True, help="results root; files under <results>/<mode>/")
    p.set_defaults(fn=cmd_track)

    p = sub.add_parser("eval", help="metrics for one tracked mode, oracle-verified "
                                    "(reads eval.report_px)")
    p.add_argument("--results", required=True, help="results root")
    p.add_argument("--mode", required=True, help="mode subdirectory to evaluate")
    p.add_argument("--root", help="dataset root")
    p.add_argument("--split", default="test_bright")
    p.add_argument("--out", help="optional metrics JSON output path")
    p.add_argument("--skip-oracle", action="store_true", help="skip the brute-force cross-check")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="report.json + summary.md + SVG plots over modes "
                                      "(reads eval.report_px)")
    p.add_argument("--results", required=True, help="results root with mode subdirectories")
    p.add_argument("--root", help="dataset root")
    p.add_argument("--split", default="test_bright")
    p.add_argument("--modes", help="comma-separated modes (default: every subdirectory)")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("selfcheck", help="run the invariant/property suite; nonzero on failure")
    p.set_defaults(fn=cmd_selfcheck)

    p = sub.add_parser("validate-config", help="merge, validate and print the config")
    p.set_defaults(fn=cmd_validate_config)

    p = sub.add_parser("inspect-ckpt", help="list checkpoint arrays and meta")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=cmd_inspect_ckpt)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config)
        return args.fn(args, cfg)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except LatrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"unexpected failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
