import json

import pytest

from latrack.cli import main
from latrack.config import DEFAULTS, config_hash, load_config, validate_config
from latrack.errors import ConfigError
from tests.conftest import tiny_run_config


def test_defaults_validate():
    cfg = validate_config({})
    assert cfg == DEFAULTS
    assert cfg["model"]["base_channels"] == 64
    assert cfg["model"]["schedule"]["t_max"] == 1000
    assert cfg["train"]["lambda_giou"] == 2.0 and cfg["train"]["lambda_l1"] == 5.0
    assert cfg["runtime"]["window_weight"] == 0.49


def test_override_merges_deeply():
    cfg = validate_config({"train": {"steps_stage1": 7}})
    assert cfg["train"]["steps_stage1"] == 7
    assert cfg["train"]["lr_head"] == DEFAULTS["train"]["lr_head"]


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        validate_config({"train": {"warmup": 5}})
    with pytest.raises(ConfigError):
        validate_config({"universe": {}})


def test_wrong_types_rejected():
    with pytest.raises(ConfigError):
        validate_config({"train": {"steps_stage1": "many"}})


def test_config_hash_stable_and_sensitive():
    a = config_hash(validate_config({}))
    b = config_hash(validate_config({}))
    c = config_hash(validate_config({"train": {"seed": 999}}))
    assert a == b and a != c


def test_load_config_bad_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(path)


# -- CLI ----------------------------------------------------------------------


def test_unknown_subcommand_exits_1(capsys):
    assert main(["frobnicate"]) == 1


def test_unknown_flag_exits_1():
    assert main(["validate-config", "--frob"]) == 1


def test_validate_config_prints_merged(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"seed": 5}}))
    assert main(["--config", str(path), "validate-config"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["train"]["seed"] == 5


def test_validate_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"data": {"shards": 4}}))
    assert main(["--config", str(path), "validate-config"]) == 1


def test_train_stage2_missing_checkpoint_names_artifact(tmp_path, capsys):
    rc = main(["train-stage2", "--scope", "depth", "--ckpt", str(tmp_path / "absent.npz"),
               "--out", str(tmp_path / "o.npz")])
    assert rc == 1
    assert "absent.npz" in capsys.readouterr().err


def test_track_scope_mismatch_exits_1(tiny_root, tiny_cfg, tiny_model, tmp_path, capsys):
    from latrack.model import save_model
    from latrack.submodule import clone_submodule

    tiny_model.sub.clear()
    tiny_model.attach_sub(clone_submodule(tiny_model.unet, "depth"))
    ckpt = tmp_path / "depth_only.npz"
    save_model(ckpt, tiny_model, extra_meta={"stage": 2})
    tiny_model.sub.clear()

    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"data": {"root": str(tiny_root)},
                                    "model": tiny_cfg["model"]}))
    rc = main(["--config", str(cfg_path), "track", "--mode", "rgb+thermal",
               "--ckpt", str(ckpt), "--split", "test_dark",
               "--results", str(tmp_path / "r")])
    assert rc == 1


def test_gen_data_idempotent_and_tracked_roundtrip(tmp_path, capsys):
    import hashlib
    from pathlib import Path

    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "data": {"root": str(tmp_path / "d"), "length": 6,
                 "splits": {"train": 1, "val": 1, "test_bright": 1,
                            "test_dark": 1, "test_rgbn": 1}},
    }))

    def digest():
        h = hashlib.sha256()
        for p in sorted(Path(tmp_path / "d").rglob("*")):
            if p.is_file():
                h.update(p.name.encode() + p.read_bytes())
        return h.hexdigest()

    assert main(["--config", str(cfg_path), "gen-data"]) == 0
    first = digest()
    assert main(["--config", str(cfg_path), "gen-data"]) == 0
    assert digest() == first


def test_inspect_ckpt(tmp_path, tiny_codec, capsys):
    from latrack.codec import save_codec

    path = tmp_path / "codec.npz"
    save_codec(path, tiny_codec)
    assert main(["inspect-ckpt", "--ckpt", str(path)]) == 0
    out = capsys.readouterr().out
    assert "codec.enc.0.0.weight" in out
    assert main(["inspect-ckpt", "--ckpt", str(tmp_path / "nope.npz")]) == 1


def test_eval_cli_roundtrip(tiny_root, tiny_model, tmp_path, capsys):
    from latrack.data import SynthDataset
    from latrack.runtime import track_dataset

    ds = SynthDataset(tiny_root, "test_bright")
    track_dataset(ds, "rgb", tiny_model, tmp_path / "res")
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"data": {"root": str(tiny_root)}}))
    rc = main(["--config", str(cfg_path), "eval", "--results", str(tmp_path / "res"),
               "--mode", "rgb", "--split", "test_bright", "--out", str(tmp_path / "m.json")])
    assert rc == 0
    metrics = json.loads((tmp_path / "m.json").read_text())
    assert metrics["oracle_checked"] is True
    assert 0.0 <= metrics["success_auc"] <= 1.0

    rc = main(["--config", str(cfg_path), "report", "--results", str(tmp_path / "res"),
               "--split", "test_bright", "--out", str(tmp_path / "rep")])
    assert rc == 0
    assert (tmp_path / "rep" / "report.json").exists()
    assert (tmp_path / "rep" / "summary.md").exists()


def test_help_screens_document_config_keys():
    import latrack.cli as cli

    parser = cli.build_parser()
    for action in parser._subparsers._group_actions[0].choices.values():
        help_text = action.format_help()
        assert help_text  # every subcommand has a help screen
