"""Latent-UNet multi-modal single object tracking at desk scale."""

from .codec import (
    CodecAE, ImageCrop, LatentGrid, NoiseSchedule,
    add_noise, compute_schedule, encode_crop, pretrain_codec,
)
from .data import (
    ObjectSpec, SequenceRecord, SequenceSpec, SynthDataset,
    crop_search, crop_template, generate_sequence, map_box_to_image, render_sequence,
)
from .errors import (
    ConfigError, ConsistencyError, DataError, LatrackError, NumericError,
    RangeError, ShapeError,
)
from .head import (
    BBox, CenterHead, GaussianTarget, ScoreMaps,
    decode_box, focal_loss, giou_loss, l1_loss, make_gaussian_target, total_loss,
)
from .model import TrackerModel, build_model, load_model, save_model
from .submodule import SubModule, clone_submodule, fused_forward, submodule_forward
from .text import TextCondition, TextEncoder, Vocabulary, default_vocabulary, encode_text, null_condition, tokenize
from .trainer import TrainConfig, TunableMask, cosine_lr, train_stage1, train_stage2
from .unet import LateralStash, PairState, PairUNet, UNetConfig, concat_l, deconcat_l, extract_tracking_features
from .runtime import TrackerState, init_track, run_sequence, track_frame

__version__ = "0.1.0"
