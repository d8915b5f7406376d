"""Auxiliary-modality sub-module: cloned UNet encoder + middle block whose
per-stage features enter the frozen RGB UNet through zero-init 1x1 convolutions.

At construction the clone is bit-identical to the source UNet and every
zero convolution is exactly zero, so attaching a fresh sub-module leaves the
RGB forward pass unchanged.
"""

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError
from .unet import (
    BasicBlock,
    LateralStash,
    PairState,
    PairUNet,
    TimestepMLP,
    build_encoder_levels,
    run_encoder,
)

SCOPES = ("depth", "thermal", "event", "generalist")
INPUT_MODES = ("aux_only", "aux_plus_rgb")


class SubModule(nn.Module):
    """Cloned encoder+middle for one auxiliary modality (or the generalist merge)."""

    def __init__(self, cfg, scope, input_mode="aux_only"):
        super().__init__()
        if scope not in SCOPES:
            raise ConfigError(f"sub-module scope must be one of {SCOPES}, got {scope!r}")
        if input_mode not in INPUT_MODES:
            raise ConfigError(f"input mode must be one of {INPUT_MODES}, got {input_mode!r}")
        self.cfg = cfg
        self.scope = scope
        self.input_mode = input_mode
        widths = cfg.widths
        self.conv_in = nn.Conv2d(cfg.c_z, widths[0], 3, padding=1)
        self.temb = TimestepMLP(cfg.t_emb_dim)
        self.enc = build_encoder_levels(cfg)
        self.mid = BasicBlock(widths[-1], widths[-1], cfg)
        site_channels = widths + [widths[-1]]
        self.zconv = nn.ModuleList([nn.Conv2d(c, c, 1) for c in site_channels])

    @property
    def n_sites(self):
        return len(self.zconv)

    def forward(self, s_star, g_star, cond, t):
        """Run the cloned encoder+middle with PFE, return per-site injection deltas."""
        _, stash, _ = run_encoder(self, s_star, g_star, cond, t)
        deltas = []
        for conv, snap in zip(self.zconv, stash.entries):
            deltas.append(PairState(search=conv(snap.search), template=conv(snap.template)))
        return LateralStash(entries=deltas)


def clone_submodule(unet: PairUNet, scope, no_zero_init=False, input_mode="aux_only",
                    rng_seed=0):
    """Deep value copy of the UNet encoder+middle plus fresh zero convolutions.

    The decoder is not cloned. With `no_zero_init` the 1x1 convolutions start
    from small random values instead of exact zeros (ablation switch).
    """
    sub = SubModule(unet.cfg, scope, input_mode=input_mode)
    sub.conv_in.load_state_dict(unet.conv_in.state_dict())
    sub.temb.load_state_dict(unet.temb.state_dict())
    sub.enc.load_state_dict(unet.enc.state_dict())
    sub.mid.load_state_dict(unet.mid.state_dict())
    if no_zero_init:
        gen = torch.Generator().manual_seed(rng_seed)
        with torch.no_grad():
            for conv in sub.zconv:
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 1e-2)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 1e-2)
    else:
        for conv in sub.zconv:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
    return sub


def submodule_forward(s_star, g_star, cond, t, sub: SubModule):
    return sub(s_star, g_star, cond, t)


def fused_forward(rgb_pair, aux_pair, cond, t, unet: PairUNet, sub: SubModule):
    """RGB forward with the sub-module's deltas added to laterals and middle."""
    s_lat, g_lat = rgb_pair
    s_star, g_star = aux_pair
    if s_star.shape != s_lat.shape or g_star.shape != g_lat.shape:
        raise ShapeError(
            f"auxiliary latent shapes {tuple(s_star.shape)}/{tuple(g_star.shape)} differ "
            f"from RGB {tuple(s_lat.shape)}/{tuple(g_lat.shape)}"
        )
    if sub.input_mode == "aux_plus_rgb":
        s_star = s_star + s_lat
        g_star = g_star + g_lat
    deltas = sub(s_star, g_star, cond, t)
    features, _ = unet(s_lat, g_lat, cond, t, laterals_in=deltas)
    return features
