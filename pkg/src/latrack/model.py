"""Full tracker assembly and checkpoint round-trips.

Parameter names in checkpoints follow the module attribute paths:
``codec.enc...``, ``text...``, ``unet.enc/mid/dec...`` (self-attention
sublayers carry the ``.sa.`` fragment), ``head.<branch>...`` and
``sub.<scope>.{enc,mid,zconv}...``.
"""

import base64

import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint, state_dict_arrays
from .codec import CodecAE, compute_schedule
from .errors import ConfigError
from .head import CenterHead
from .submodule import SubModule, fused_forward
from .text import TextEncoder, default_vocabulary, Vocabulary
from .unet import PairUNet, UNetConfig, extract_tracking_features


def unet_config_from(model_cfg):
    return UNetConfig(
        base_channels=model_cfg["base_channels"],
        channel_mults=tuple(model_cfg["channel_mults"]),
        blocks_per_level=model_cfg["blocks_per_level"],
        attention_heads=model_cfg["attention_heads"],
        d_cond=model_cfg["d_cond"],
        t_emb_dim=model_cfg["t_emb_dim"],
        c_z=model_cfg["c_z"],
        norm_groups=model_cfg["norm_groups"],
        feature_source=model_cfg["feature_source"],
    )


class TrackerModel(nn.Module):
    """Codec + text encoder + pair UNet + head (+ auxiliary sub-modules)."""

    def __init__(self, model_cfg, vocab, codec: CodecAE):
        super().__init__()
        self.model_cfg = dict(model_cfg)
        self.vocab = vocab
        self.codec = codec
        ucfg = unet_config_from(model_cfg)
        self.text = TextEncoder(vocab.size, d_cond=ucfg.d_cond, length=model_cfg["cond_length"])
        self.unet = PairUNet(ucfg)
        self.head = CenterHead(ucfg.feature_channels, width=model_cfg["head_width"],
                               norm_groups=model_cfg["norm_groups"])
        self.sub = nn.ModuleDict()
        self.schedule = compute_schedule(**model_cfg["schedule"])
        self.timestep = model_cfg["timestep"]

    @property
    def scopes(self):
        return sorted(self.sub.keys())

    def attach_sub(self, sub: SubModule):
        self.sub[sub.scope] = sub

    def encode_cond(self, token_ids):
        """Frozen text conditioning for a [B, L] id batch."""
        with torch.no_grad():
            return self.text(token_ids)

    def forward_features(self, s_lat, g_lat, cond, sub_scope=None, aux_pair=None):
        """Tracking feature maps for the search stream, optionally fused."""
        t = self.timestep
        if sub_scope is None:
            features, _ = self.unet(s_lat, g_lat, cond, t)
        else:
            if sub_scope not in self.sub:
                raise ConfigError(f"no sub-module with scope {sub_scope!r} attached")
            features = fused_forward((s_lat, g_lat), aux_pair, cond, t,
                                     self.unet, self.sub[sub_scope])
        return extract_tracking_features(features)


def build_model(model_cfg, codec, init_seed=None):
    """Construct a TrackerModel with seeded, reproducible initialization."""
    seed = model_cfg.get("init_seed", 20) if init_seed is None else init_seed
    torch.manual_seed(seed)
    vocab = default_vocabulary()
    return TrackerModel(model_cfg, vocab, codec)


def save_model(path, model: TrackerModel, extra_meta=None):
    meta = {
        "kind": "tracker",
        "model_cfg": model.model_cfg,
        "vocab": model.vocab.tokens,
        "latent_scale": model.codec.latent_scale,
        "scopes": model.scopes,
        "sub_input": {s: model.sub[s].input_mode for s in model.scopes},
        "torch_rng": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
    }
    meta.update(extra_meta or {})
    save_checkpoint(path, state_dict_arrays(model), meta)


def load_model(path):
    """Rebuild a TrackerModel (codec frozen, sub-modules re-attached)."""
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "tracker":
        raise ConfigError(f"{path} is not a tracker checkpoint")
    model_cfg = meta["model_cfg"]
    codec = CodecAE(c_z=model_cfg["c_z"], downsample_factor=model_cfg["downsample_factor"],
                    base_channels=model_cfg["codec_channels"])
    codec.latent_scale = float(meta["latent_scale"])
    model = TrackerModel(model_cfg, Vocabulary(list(meta["vocab"])), codec)
    for scope in meta.get("scopes", []):
        model.attach_sub(SubModule(model.unet.cfg, scope,
                                   input_mode=meta.get("sub_input", {}).get(scope, "aux_only")))
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    model.load_state_dict(state, strict=True)
    model.codec.freeze()
    return model, meta
