"""Miniature latent UNet with parallel template/search feature extraction.

Both latent streams run through every block with one shared parameter set and
interact only inside joint self-attention over the concatenation of their
token sequences. The decoder consumes per-stream lateral snapshots; injected
lateral deltas (from an auxiliary-modality sub-module) are added to those
snapshots and to the middle-block output before consumption. The noise
prediction head of a standard diffusion UNet is dropped: the last decoder
block's hidden features are the tracking features.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 64
    channel_mults: tuple = (1, 2)
    blocks_per_level: int = 1
    attention_heads: int = 4
    d_cond: int = 64
    t_emb_dim: int = 128
    c_z: int = 4
    norm_groups: int = 8
    feature_source: str = "final_decoder"  # or "middle"

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        for w in self.widths:
            if w % self.attention_heads:
                raise ConfigError(f"width {w} not divisible by {self.attention_heads} heads")
            if w % self.norm_groups:
                raise ConfigError(f"width {w} not divisible by {self.norm_groups} norm groups")
        if self.feature_source not in ("final_decoder", "middle"):
            raise ConfigError(f"unknown feature source {self.feature_source!r}")

    @property
    def widths(self):
        return [self.base_channels * m for m in self.channel_mults]

    @property
    def n_levels(self):
        return len(self.channel_mults)

    @property
    def feature_channels(self):
        return self.widths[-1] if self.feature_source == "middle" else self.widths[0]


@dataclass
class PairState:
    """The dual (search, template) feature stream, same channel width each."""

    search: torch.Tensor  # [B, C, h_s, w_s]
    template: torch.Tensor  # [B, C, h_t, w_t]

    def swap(self):
        return PairState(search=self.template, template=self.search)


@dataclass
class LateralStash:
    """Per-stage PairState snapshots: one per encoder stage plus the middle."""

    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def shapes(self):
        return [(tuple(p.search.shape), tuple(p.template.shape)) for p in self.entries]


def concat_l(search_tokens, template_tokens):
    """Concatenate token sequences along length: search first, template second."""
    if search_tokens.shape[-1] != template_tokens.shape[-1]:
        raise ShapeError(
            f"channel mismatch {search_tokens.shape[-1]} vs {template_tokens.shape[-1]}"
        )
    l_s, l_t = search_tokens.shape[-2], template_tokens.shape[-2]
    if l_s == 0 or l_t == 0:
        raise ShapeError("both streams must contribute at least one token")
    return torch.cat([search_tokens, template_tokens], dim=-2), (l_s, l_t)


def deconcat_l(tokens, split):
    """Exact inverse of concat_l."""
    l_s, l_t = split
    if tokens.shape[-2] != l_s + l_t:
        raise ShapeError(f"token length {tokens.shape[-2]} != split sum {l_s + l_t}")
    return tokens[..., :l_s, :], tokens[..., l_s:, :]


def timestep_embedding(t, dim):
    """Sinusoidal embedding of an integer timestep, shape [dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    angles = float(t) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)])


class TimestepMLP(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t, batch):
        emb = timestep_embedding(t, self.dim).unsqueeze(0)
        emb = self.fc2(F.silu(self.fc1(emb)))
        return emb.expand(batch, -1)


class Attention(nn.Module):
    """Multi-head attention; self-attention when no context is given."""

    def __init__(self, dim, heads, kv_dim=None):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim or dim, dim)
        self.v = nn.Linear(kv_dim or dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        ctx = x if context is None else context
        b, l, d = x.shape
        h = self.heads
        q = self.q(x).view(b, l, h, d // h).transpose(1, 2)
        k = self.k(ctx).view(b, ctx.shape[1], h, d // h).transpose(1, 2)
        v = self.v(ctx).view(b, ctx.shape[1], h, d // h).transpose(1, 2)
        a = F.scaled_dot_product_attention(q, k, v)
        return self.out(a.transpose(1, 2).reshape(b, l, d))


class ResNetBlock(nn.Module):
    def __init__(self, c_in, c_out, t_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class BasicBlock(nn.Module):
    """ResNet block per stream, then joint SA -> per-stream CA -> per-stream FFN.

    One parameter set serves both streams; pre-norm residuals wrap each of the
    three token sub-steps. Attention carries no positional encoding.
    """

    def __init__(self, c_in, c_out, cfg: UNetConfig):
        super().__init__()
        self.res = ResNetBlock(c_in, c_out, cfg.t_emb_dim, cfg.norm_groups)
        self.norm_sa = nn.LayerNorm(c_out)
        self.sa = Attention(c_out, cfg.attention_heads)
        self.norm_ca = nn.LayerNorm(c_out)
        self.ca = Attention(c_out, cfg.attention_heads, kv_dim=cfg.d_cond)
        self.norm_ffn = nn.LayerNorm(c_out)
        self.ffn = nn.Sequential(
            nn.Linear(c_out, c_out * 4), nn.GELU(), nn.Linear(c_out * 4, c_out)
        )

    def forward(self, pair: PairState, t_emb, cond):
        s = self.res(pair.search, t_emb)
        g = self.res(pair.template, t_emb)
        b, c, h_s, w_s = s.shape
        h_t, w_t = g.shape[-2:]
        if cond.shape[-1] != self.ca.k.in_features:
            raise ShapeError(f"condition width {cond.shape[-1]} != {self.ca.k.in_features}")

        s_tok = s.flatten(2).transpose(1, 2)
        g_tok = g.flatten(2).transpose(1, 2)
        o, split = concat_l(s_tok, g_tok)
        o = o + self.sa(self.norm_sa(o))
        s_tok, g_tok = deconcat_l(o, split)
        s_tok = s_tok + self.ca(self.norm_ca(s_tok), cond)
        g_tok = g_tok + self.ca(self.norm_ca(g_tok), cond)
        s_tok = s_tok + self.ffn(self.norm_ffn(s_tok))
        g_tok = g_tok + self.ffn(self.norm_ffn(g_tok))

        return PairState(
            search=s_tok.transpose(1, 2).reshape(b, c, h_s, w_s),
            template=g_tok.transpose(1, 2).reshape(b, c, h_t, w_t),
        )


class Downsample(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class EncoderLevel(nn.Module):
    def __init__(self, c_in, c_out, cfg, downsample):
        super().__init__()
        blocks = []
        for i in range(cfg.blocks_per_level):
            blocks.append(BasicBlock(c_in if i == 0 else c_out, c_out, cfg))
        self.blocks = nn.ModuleList(blocks)
        self.down = Downsample(c_out) if downsample else None

    def forward(self, pair, t_emb, cond):
        for block in self.blocks:
            pair = block(pair, t_emb, cond)
        snapshot = pair
        if self.down is not None:
            pair = PairState(search=self.down(pair.search), template=self.down(pair.template))
        return pair, snapshot


class DecoderLevel(nn.Module):
    def __init__(self, c_in, c_skip, c_out, cfg, upsample):
        super().__init__()
        blocks = []
        for i in range(cfg.blocks_per_level):
            blocks.append(BasicBlock(c_in + c_skip if i == 0 else c_out, c_out, cfg))
        self.blocks = nn.ModuleList(blocks)
        self.up = Upsample(c_out) if upsample else None

    def forward(self, pair, skip, t_emb, cond):
        pair = PairState(
            search=torch.cat([pair.search, skip.search], dim=1),
            template=torch.cat([pair.template, skip.template], dim=1),
        )
        for block in self.blocks:
            pair = block(pair, t_emb, cond)
        if self.up is not None:
            pair = PairState(search=self.up(pair.search), template=self.up(pair.template))
        return pair


def build_encoder_levels(cfg):
    widths = cfg.widths
    levels = []
    for i, w in enumerate(widths):
        c_in = widths[0] if i == 0 else widths[i - 1]
        levels.append(EncoderLevel(c_in, w, cfg, downsample=i < cfg.n_levels - 1))
    return nn.ModuleList(levels)


def run_encoder(net, s_lat, g_lat, cond, t):
    """Shared encoder+middle dataflow for the UNet and any cloned sub-module.

    `net` needs conv_in / temb / enc / mid attributes with matching shapes.
    """
    t_emb = net.temb(t, s_lat.shape[0])
    pair = PairState(search=net.conv_in(s_lat), template=net.conv_in(g_lat))
    stash = LateralStash()
    for level in net.enc:
        pair, snapshot = level(pair, t_emb, cond)
        stash.entries.append(snapshot)
    pair = net.mid(pair, t_emb, cond)
    stash.entries.append(pair)
    return pair, stash, t_emb


def _add_delta(x, d):
    # An exactly-zero, gradient-free delta is skipped outright: x + 0 is the
    # identity, and materializing the add would still perturb downstream
    # kernel dispatch enough to break bit-exactness.
    if d.requires_grad or bool(d.any()):
        return x + d
    return x


def _check_laterals(laterals_in, stash):
    if len(laterals_in) != len(stash):
        raise ShapeError(
            f"lateral stash length {len(laterals_in)} != expected {len(stash)}"
        )
    names = [f"enc.{i}" for i in range(len(stash) - 1)] + ["mid"]
    for name, got, want in zip(names, laterals_in.entries, stash.entries):
        for stream in ("search", "template"):
            a, b = getattr(got, stream), getattr(want, stream)
            if a.shape != b.shape:
                raise ShapeError(
                    f"injected delta at stage {name} ({stream}): {tuple(a.shape)} != {tuple(b.shape)}"
                )


class PairUNet(nn.Module):
    """Encoder / middle / decoder over a PairState, with lateral injection."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths
        self.conv_in = nn.Conv2d(cfg.c_z, widths[0], 3, padding=1)
        self.temb = TimestepMLP(cfg.t_emb_dim)
        self.enc = build_encoder_levels(cfg)
        self.mid = BasicBlock(widths[-1], widths[-1], cfg)
        dec = []
        c_h = widths[-1]
        for i in reversed(range(cfg.n_levels)):
            dec.append(DecoderLevel(c_h, widths[i], widths[i], cfg, upsample=i > 0))
            c_h = widths[i]
        self.dec = nn.ModuleList(dec)

    def encode_pair(self, s_lat, g_lat, cond, t):
        """Encoder + middle block only; returns (bottom PairState, LateralStash)."""
        return run_encoder(self, s_lat, g_lat, cond, t)

    def forward(self, s_lat, g_lat, cond, t, laterals_in=None):
        """Full pass; `laterals_in` holds additive per-stage deltas.

        Returns (tracking features PairState, the lateral stash actually
        consumed by the decoder).
        """
        if s_lat.shape[1] != self.cfg.c_z or g_lat.shape[1] != self.cfg.c_z:
            raise ShapeError(
                f"latent channels ({s_lat.shape[1]}, {g_lat.shape[1]}) != c_z {self.cfg.c_z}"
            )
        pair, stash, t_emb = self.encode_pair(s_lat, g_lat, cond, t)

        if laterals_in is not None:
            _check_laterals(laterals_in, stash)
            stash = LateralStash(entries=[
                PairState(search=_add_delta(p.search, d.search),
                          template=_add_delta(p.template, d.template))
                for p, d in zip(stash.entries, laterals_in.entries)
            ])

        pair = stash.entries[-1]
        mid_pair = pair
        for level, skip in zip(self.dec, reversed(stash.entries[:-1])):
            pair = level(pair, skip, t_emb, cond)

        features = mid_pair if self.cfg.feature_source == "middle" else pair
        return features, stash


def extract_tracking_features(features: PairState):
    """Tracking features are the search stream only."""
    return features.search
