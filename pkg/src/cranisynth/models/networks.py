"""3D convolutional building blocks: VAE backbone, patch discriminator, frozen feature stack."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
from torch import nn
import torch.nn.functional as F

from ..errors import ArgumentError

LOGVAR_RANGE = (-30.0, 20.0)
# posterior log-variance starts small; unit-variance latent noise at init blurs the decoder for many epochs
LOGVAR_INIT_BIAS = -8.0


@dataclass
class NetworkConfig:
    base_channels: int = 16
    latent_channels: int = 8
    downsampling_levels: int = 2
    discriminator_levels: int = 2
    lambda_rec: float = 1.0
    lambda_adv: float = 0.05
    lambda_kl: float = 1e-4
    lambda_perc: float = 0.1
    lambda_dicefocal: float = 1.0
    lambda_hd: float = 0.1
    focal_gamma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.downsampling_levels < 2:
            raise ArgumentError("downsampling_levels must be >= 2")
        if self.base_channels < 2 or self.latent_channels < 1 or self.discriminator_levels < 1:
            raise ArgumentError("channel counts and discriminator_levels must be positive")
        lambdas = [self.lambda_rec, self.lambda_adv, self.lambda_kl, self.lambda_perc,
                   self.lambda_dicefocal, self.lambda_hd]
        if any(v < 0 for v in lambdas) or self.lambda_rec <= 0:
            raise ArgumentError("loss weights must be >= 0 and lambda_rec > 0")
        if self.focal_gamma < 0:
            raise ArgumentError("focal_gamma must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ArgumentError(f"unknown NetworkConfig keys: {sorted(unknown)}")
        return cls(**d)


def _groups(ch):
    for g in (8, 4, 2):
        if ch % g == 0 and ch >= 2 * g:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch), ch)
        self.conv1 = nn.Conv3d(ch, ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(ch), ch)
        self.conv2 = nn.Conv3d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class Encoder(nn.Module):
    def __init__(self, in_ch, base, latent, levels):
        super().__init__()
        chans = [base * min(2 ** i, 4) for i in range(levels)]
        layers = [nn.Conv3d(in_ch, chans[0], 3, stride=2, padding=1)]
        for i in range(1, levels):
            layers += [nn.GroupNorm(_groups(chans[i - 1]), chans[i - 1]), nn.SiLU(),
                       nn.Conv3d(chans[i - 1], chans[i], 3, stride=2, padding=1)]
        layers += [ResBlock(chans[-1]), nn.GroupNorm(_groups(chans[-1]), chans[-1]), nn.SiLU()]
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv3d(chans[-1], 2 * latent, 1)
        with torch.no_grad():
            self.head.bias[latent:] = LOGVAR_INIT_BIAS
        self.latent = latent

    def forward(self, x):
        h = self.head(self.body(x))
        mu, logvar = h[:, : self.latent], h[:, self.latent:]
        return mu, logvar.clamp(*LOGVAR_RANGE)


class Decoder(nn.Module):
    def __init__(self, out_ch, base, latent, levels):
        super().__init__()
        chans = [base * min(2 ** i, 4) for i in range(levels)]
        layers = [nn.Conv3d(latent, chans[-1], 3, padding=1), ResBlock(chans[-1])]
        for i in range(levels - 1, 0, -1):
            layers += [nn.GroupNorm(_groups(chans[i]), chans[i]), nn.SiLU(),
                       nn.ConvTranspose3d(chans[i], chans[i - 1], 4, stride=2, padding=1)]
        tail = max(chans[0] // 2, 4)
        layers += [nn.GroupNorm(_groups(chans[0]), chans[0]), nn.SiLU(),
                   nn.ConvTranspose3d(chans[0], tail, 4, stride=2, padding=1), nn.SiLU(),
                   nn.Conv3d(tail, out_ch, 3, padding=1)]
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        return self.body(z)


class VAE3D(nn.Module):
    """Encoder/decoder pair; the decoder emits raw logits (squashing is the caller's choice)."""

    def __init__(self, in_ch, out_ch, cfg):
        super().__init__()
        self.levels = cfg.downsampling_levels
        self.encoder = Encoder(in_ch, cfg.base_channels, cfg.latent_channels, cfg.downsampling_levels)
        self.decoder = Decoder(out_ch, cfg.base_channels, cfg.latent_channels, cfg.downsampling_levels)

    def check_shape(self, shape):
        f = 2 ** self.levels
        if any(s % f for s in shape[-3:]):
            raise ArgumentError(f"spatial shape {tuple(shape[-3:])} not divisible by {f}")

    def encode(self, x):
        self.check_shape(x.shape)
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    def forward(self, x, sample=True, generator=None):
        mu, logvar = self.encode(x)
        z = reparameterize(mu, logvar, generator) if sample else mu
        return self.decode(z), mu, logvar


def reparameterize(mu, logvar, generator=None):
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + torch.exp(0.5 * logvar) * eps


class PatchDiscriminator(nn.Module):
    """Multi-scale least-squares patch discriminator; returns one score map per scale."""

    def __init__(self, in_ch=1, base=8, scales=2):
        super().__init__()
        self.nets = nn.ModuleList([self._single(in_ch, base) for _ in range(scales)])

    @staticmethod
    def _single(in_ch, base):
        return nn.Sequential(
            nn.Conv3d(in_ch, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv3d(base, 2 * base, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv3d(2 * base, 1, 3, padding=1),
        )

    def forward(self, x):
        out = []
        for i, net in enumerate(self.nets):
            out.append(net(x))
            if i + 1 < len(self.nets):
                x = F.avg_pool3d(x, 2)
        return out


class FeatureStack(nn.Module):
    """Four-layer 3D conv stack with seed-determined weights, never trained.

    Serves the perceptual loss, the LPIPS-style distance and the FID features.
    Weights come from a private generator so they do not depend on, or disturb,
    the global torch RNG.
    """

    widths = (4, 8, 8, 16)
    strides = (1, 2, 1, 2)

    def __init__(self, seed=0, in_ch=1):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed) + 0x5EED)
        convs = []
        prev = in_ch
        for w, s in zip(self.widths, self.strides):
            # default init would draw from the global RNG; the weights are overwritten anyway
            conv = nn.utils.skip_init(nn.Conv3d, prev, w, 3, stride=s, padding=1)
            fan_in = prev * 27
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            convs.append(conv)
            prev = w
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        feats = []
        h = x
        for conv in self.convs:
            h = F.silu(conv(h))
            feats.append(h)
        return feats


_STACKS = {}


def feature_stack(seed=0, dtype=torch.float32):
    key = (int(seed), dtype)
    if key not in _STACKS:
        _STACKS[key] = FeatureStack(seed).to(dtype)
    return _STACKS[key]
