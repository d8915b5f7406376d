import numpy as np
import pytest
import torch

from latrack.codec import pretrain_codec
from latrack.config import validate_config
from latrack.data import build_spec, generate_sequence
from latrack.model import build_model
from latrack.trainer import build_codec_corpus

TINY_SPLITS = {"train": 8, "val": 2, "test_bright": 2, "test_dark": 2, "test_rgbn": 2}
TINY_LENGTH = 10


def tiny_run_config(root):
    return validate_config({
        "model": {"base_channels": 16, "codec_channels": 8, "head_width": 16,
                  "t_emb_dim": 32, "d_cond": 32},
        "data": {"root": str(root), "length": TINY_LENGTH, "splits": dict(TINY_SPLITS)},
        "train": {"batch_size": 4, "steps_codec": 40, "steps_stage1": 6,
                  "steps_stage2": 5, "val_interval": 3},
    })


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    for split, count in TINY_SPLITS.items():
        for i in range(count):
            spec = build_spec(split, i, length=TINY_LENGTH)
            generate_sequence(spec, root / split / f"{split}-{i:03d}")
    return root


@pytest.fixture(scope="session")
def tiny_cfg(tiny_root):
    return tiny_run_config(tiny_root)


@pytest.fixture(scope="session")
def tiny_codec(tiny_root, tiny_cfg):
    corpus = build_codec_corpus(tiny_root, n_crops=40, rng_seed=1)
    return pretrain_codec(corpus, steps=40, rng_seed=1, c_z=4,
                          downsample_factor=8, base_channels=8)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg, tiny_codec):
    return build_model(tiny_cfg["model"], tiny_codec)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
