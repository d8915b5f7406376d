"""Image codec and forward-noising machinery.

A small convolutional autoencoder maps [0,1] image crops to latent grids at
1/f resolution. It is pretrained once on the synthetic corpus with a plain
reconstruction loss, its latent scale is calibrated to unit standard
deviation, and it stays frozen for every subsequent training stage. The
forward-noising step and its beta schedule live here as well.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint, state_dict_arrays, load_state_arrays
from .errors import ConfigError, DataError, RangeError, ShapeError

MODALITIES = ("rgb", "depth", "thermal", "event")


@dataclass
class CropParams:
    """Affine mapping between a square crop and its source frame.

    `x0, y0` are the top-left corner of the source window in frame pixels,
    `side` the window size in frame pixels, `out_size` the crop resolution.
    """

    x0: float
    y0: float
    side: float
    out_size: int


@dataclass
class ImageCrop:
    pixels: np.ndarray  # [3, H, W] float32 in [0, 1]
    modality_tag: str = "rgb"
    crop_params: CropParams | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ShapeError(f"crop must be [3, H, W], got {self.pixels.shape}")
        if self.modality_tag not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality_tag!r}")
        if not np.isfinite(self.pixels).all():
            raise DataError("crop contains non-finite pixels")
        if self.pixels.min() < -1e-6 or self.pixels.max() > 1 + 1e-6:
            raise DataError("crop pixels outside [0, 1]")


@dataclass
class LatentGrid:
    values: torch.Tensor  # [C_z, h, w]
    scale_applied: bool = True


@dataclass
class NoiseSchedule:
    """Scaled-linear beta schedule with cumulative alpha products.

    Arrays are stored 0-indexed; timestep t in [1, t_max] maps to index t-1,
    so ``alpha_bar_at(1) == 1 - beta[0]``.
    """

    t_max: int
    beta: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def alpha_bar_at(self, t):
        if not 1 <= t <= self.t_max:
            raise RangeError(f"timestep {t} outside [1, {self.t_max}]")
        return float(self.alpha_bar[t - 1])


def compute_schedule(t_max=1000, beta_start=8.5e-4, beta_end=1.2e-2):
    """Beta grows linearly in sqrt space from beta_start to beta_end."""
    if t_max < 1:
        raise ConfigError(f"t_max must be >= 1, got {t_max}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
        )
    sqrt_beta = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), t_max, dtype=np.float64)
    beta = sqrt_beta ** 2
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(t_max=t_max, beta=beta, alpha_bar=alpha_bar)


def add_noise(z0, t, schedule, eps=None, rng_seed=0, sample=True):
    """Forward-noise a latent: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.

    With `eps` absent, noise is drawn standard-normal from `rng_seed` when
    `sample` is set (training) and taken as all-zeros otherwise (inference).
    """
    grid = isinstance(z0, LatentGrid)
    values = z0.values if grid else z0
    if not 1 <= t <= schedule.t_max:
        raise RangeError(f"timestep {t} outside [1, {schedule.t_max}]")
    if eps is None:
        if sample:
            gen = torch.Generator().manual_seed(int(rng_seed))
            eps = torch.randn(values.shape, generator=gen, dtype=values.dtype)
        else:
            eps = torch.zeros_like(values)
    else:
        eps = torch.as_tensor(eps, dtype=values.dtype)
        if eps.shape != values.shape:
            raise ShapeError(f"eps shape {tuple(eps.shape)} != latent shape {tuple(values.shape)}")
        if not torch.isfinite(eps).all():
            raise DataError("eps contains non-finite values")
    abar = schedule.alpha_bar_at(t)
    out = math.sqrt(abar) * values + math.sqrt(1.0 - abar) * eps
    if grid:
        return LatentGrid(values=out, scale_applied=z0.scale_applied)
    return out


class CodecAE(nn.Module):
    """Stride-2 conv autoencoder with a calibrated latent scale.

    Parameter names follow ``enc.<stage>.<layer>`` / ``dec.<stage>.<layer>``
    so the assembled model exposes them as ``codec.enc...`` / ``codec.dec...``.
    """

    def __init__(self, c_z=4, downsample_factor=8, base_channels=32):
        super().__init__()
        n_stages = int(round(math.log2(downsample_factor)))
        if 2 ** n_stages != downsample_factor:
            raise ConfigError(f"downsample factor must be a power of two, got {downsample_factor}")
        self.c_z = c_z
        self.f = downsample_factor
        self.latent_scale = 1.0
        self.frozen = False

        widths = [base_channels * min(2 ** i, 2) for i in range(n_stages)]
        enc, c_in = [], 3
        for w in widths:
            enc.append(nn.Sequential(nn.Conv2d(c_in, w, 3, stride=2, padding=1), nn.SiLU()))
            c_in = w
        enc.append(nn.Sequential(nn.Conv2d(c_in, c_z, 1)))
        self.enc = nn.ModuleList(enc)

        dec = [nn.Sequential(nn.Conv2d(c_z, widths[-1], 1), nn.SiLU())]
        rev = widths[::-1]
        for c_in, c_out in zip(rev, rev[1:] + [3]):
            dec.append(nn.Sequential(nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1), nn.SiLU()))
        dec[-1] = nn.Sequential(dec[-1][0])  # no activation before the output sigmoid
        self.dec = nn.ModuleList(dec)

    def encode(self, x):
        """Raw (unscaled) latents for a [B, 3, H, W] batch."""
        _, _, h, w = x.shape
        if h % self.f or w % self.f:
            raise ShapeError(f"input {h}x{w} not divisible by downsample factor {self.f}")
        for stage in self.enc:
            x = stage(x)
        return x

    def decode(self, z):
        for stage in self.dec:
            z = stage(z)
        return torch.sigmoid(z)

    def forward(self, x):
        return self.decode(self.encode(x))

    def freeze(self):
        self.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self


def encode_crop(crop, codec, allow_untrained=False):
    """Encode one ImageCrop to a scaled LatentGrid (deterministic).

    The codec must be pretrained+frozen unless the caller explicitly flags an
    untrained one (unit-test escape hatch).
    """
    if not codec.frozen and not allow_untrained:
        raise ConfigError("codec is not pretrained/frozen; pass allow_untrained=True to override")
    with torch.no_grad():
        x = torch.from_numpy(crop.pixels).unsqueeze(0)
        z = codec.encode(x)[0] * codec.latent_scale
    return LatentGrid(values=z, scale_applied=True)


def encode_batch(codec, pixels):
    """Scaled latents for a [B, 3, H, W] tensor, without gradients."""
    with torch.no_grad():
        return codec.encode(pixels) * codec.latent_scale


def _as_pixel_batch(dataset):
    stack = []
    for item in dataset:
        stack.append(item.pixels if isinstance(item, ImageCrop) else np.asarray(item, dtype=np.float32))
    return torch.from_numpy(np.stack(stack))


def pretrain_codec(dataset, steps=1200, rng_seed=0, batch_size=16, lr=2e-3,
                   c_z=4, downsample_factor=8, base_channels=32, log_every=0,
                   calibration_set=None):
    """Train the autoencoder on image crops, calibrate the latent scale, freeze.

    Returns the frozen CodecAE. The dataset is any sequence of ImageCrop or
    [3, H, W] arrays with identical spatial size. `calibration_set`, when
    given, supplies held-out frames for the latent-scale calibration.
    """
    if len(dataset) == 0:
        raise DataError("codec pretraining dataset is empty")
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")

    torch.manual_seed(rng_seed)
    codec = CodecAE(c_z=c_z, downsample_factor=downsample_factor, base_channels=base_channels)
    pixels = _as_pixel_batch(dataset)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(rng_seed)
    n = pixels.shape[0]
    for step in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        batch = pixels[idx]
        recon = codec(batch)
        loss = torch.mean((recon - batch) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and step % log_every == 0:
            print(f"codec step {step}: mse {loss.item():.5f}")

    # Calibration: standardize latents per channel by folding channel mean and
    # std into the encoder's output conv; the decoder's input conv compensates
    # exactly, so reconstructions are unchanged. The scalar latent scale then
    # normalizes the pooled std over the calibration batch to one.
    cal = pixels if calibration_set is None else _as_pixel_batch(calibration_set)
    cal = cal[: min(len(cal), 256)]
    with torch.no_grad():
        lat = codec.encode(cal)
        mu = lat.mean(dim=(0, 2, 3))
        sigma = torch.clamp(lat.std(dim=(0, 2, 3)), min=0.05 * float(lat.std()))
        enc_out, dec_in = codec.enc[-1][0], codec.dec[0][0]
        enc_out.weight.div_(sigma[:, None, None, None])
        enc_out.bias.sub_(mu).div_(sigma)
        dec_in.bias.add_(torch.einsum("oc,c->o", dec_in.weight[:, :, 0, 0], mu))
        dec_in.weight.mul_(sigma[None, :, None, None])
        std = float(codec.encode(cal).std())
    codec.latent_scale = 1.0 / max(std, 1e-8)
    return codec.freeze()


def save_codec(path, codec, config=None):
    meta = {
        "kind": "codec",
        "latent_scale": codec.latent_scale,
        "f": codec.f,
        "c_z": codec.c_z,
        "config": config or {},
    }
    arrays = {f"codec.{k}": v for k, v in state_dict_arrays(codec).items()}
    save_checkpoint(path, arrays, meta)


def load_codec(path):
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "codec":
        raise ConfigError(f"{path} is not a codec checkpoint")
    base = arrays["codec.enc.0.0.weight"].shape[0]
    codec = CodecAE(c_z=meta["c_z"], downsample_factor=meta["f"], base_channels=base)
    load_state_arrays(codec, arrays, prefix="codec.")
    codec.latent_scale = float(meta["latent_scale"])
    return codec.freeze(), meta
