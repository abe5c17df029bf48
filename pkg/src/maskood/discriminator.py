"""U-Net discriminator, adversarial/reconstruction losses and a differentiable SSIM."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .errors import ValidationError


@dataclass
class DiscriminatorConfig:
    num_classes: int
    channels: int = 32
    spectral: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class UNetDiscOutput:
    enc_logit: torch.Tensor  # (B,)
    dec_logits: torch.Tensor  # (B, H, W)


class _Down(nn.Module):
    def __init__(self, cin, cout, sn):
        super().__init__()
        self.c1, self.c2 = sn(nn.Conv2d(cin, cout, 3, padding=1)), sn(nn.Conv2d(cout, cout, 3, padding=1))
        self.skip = sn(nn.Conv2d(cin, cout, 1))

    def forward(self, x):
        h = self.c2(F.leaky_relu(self.c1(F.leaky_relu(x, 0.2)), 0.2))
        return F.avg_pool2d(h + self.skip(x), 2)


class _Up(nn.Module):
    def __init__(self, cin, cskip, cout, sn):
        super().__init__()
        self.c1 = sn(nn.Conv2d(cin, cout, 3, padding=1))
        self.c2 = sn(nn.Conv2d(cout + cskip, cout, 3, padding=1))

    def forward(self, x, skip=None):
        h = F.interpolate(F.leaky_relu(x, 0.2), scale_factor=2, mode="nearest")
        h = self.c1(h)
        if skip is not None:
            h = torch.cat([h, skip], 1)
        return self.c2(F.leaky_relu(h, 0.2))


class UNetDiscriminator(nn.Module):
    """Three down-sampling stages to a projection-conditioned scalar head, and a
    mirrored up-sampling path with skip connections to a per-pixel logit map.

    The decoder path is not label-conditioned.
    """

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        sn = spectral_norm if cfg.spectral else (lambda m: m)
        ch = cfg.channels
        self.d1, self.d2, self.d3 = _Down(3, ch, sn), _Down(ch, 2 * ch, sn), _Down(2 * ch, 4 * ch, sn)
        self.head = sn(nn.Linear(4 * ch, 1))
        self.embed = nn.Embedding(cfg.num_classes, 4 * ch)
        nn.init.normal_(self.embed.weight, 0.0, 0.1)
        self.u1 = _Up(4 * ch, 2 * ch, 2 * ch, sn)
        self.u2 = _Up(2 * ch, ch, ch, sn)
        self.u3 = _Up(ch, 0, ch, sn)
        self.out = nn.Conv2d(ch, 1, 1)

    def forward(self, x, y) -> UNetDiscOutput:
        y = torch.as_tensor(y, dtype=torch.long)
        if y.numel() and (y.min() < 0 or y.max() >= self.cfg.num_classes):
            raise ValidationError(f"labels must be in [0, {self.cfg.num_classes})")
        h1 = self.d1(x)
        h2 = self.d2(h1)
        h3 = self.d3(h2)
        pooled = F.leaky_relu(h3, 0.2).sum((2, 3))
        enc = self.head(pooled).squeeze(1) + (self.embed(y) * pooled).sum(1)
        u = self.u3(self.u2(self.u1(h3, h2), h1))
        return UNetDiscOutput(enc, self.out(u).squeeze(1))


def _pixel_reduce(t, reduction):
    return t.flatten(1).sum(1) if reduction == "sum" else t.flatten(1).mean(1)


def disc_loss(real_out: UNetDiscOutput, fake_out: UNetDiscOutput, dec_reduction: str = "sum") -> torch.Tensor:
    """Binary cross-entropy of both heads, written with softplus for stability.

    -log sigmoid(a) == softplus(-a) and -log(1 - sigmoid(a)) == softplus(a).
    """
    enc = F.softplus(-real_out.enc_logit).mean() + F.softplus(fake_out.enc_logit).mean()
    dec = _pixel_reduce(F.softplus(-real_out.dec_logits), dec_reduction).mean()
    dec = dec + _pixel_reduce(F.softplus(fake_out.dec_logits), dec_reduction).mean()
    return enc + dec


@dataclass
class LossWeights:
    adv_enc: float = 1.0
    adv_dec: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    ssim: float = 1.0
    dec_reduction: str = "sum"

    def __post_init__(self):
        if self.dec_reduction not in ("sum", "mean"):
            raise ValidationError("dec_reduction must be 'sum' or 'mean'")

    def to_dict(self) -> dict:
        return asdict(self)


def gen_loss(fake_out: UNetDiscOutput, x, x_synth, weights: LossWeights | None = None, parts: dict | None = None) -> torch.Tensor:
    """Generator objective: fool both discriminator heads and match x.

    The similarity term enters as ``1 - SSIM`` so that minimising it increases
    similarity. ``parts`` (if given) receives the unweighted components.
    """
    w = weights or LossWeights()
    adv_enc = F.softplus(-fake_out.enc_logit).mean()
    adv_dec = _pixel_reduce(F.softplus(-fake_out.dec_logits), w.dec_reduction).mean()
    l1 = (x - x_synth).abs().mean()
    l2 = (x - x_synth).pow(2).mean()
    s = ssim(x, x_synth)
    total = w.adv_enc * adv_enc + w.adv_dec * adv_dec + w.l1 * l1 + w.l2 * l2 + w.ssim * (1.0 - s)
    if parts is not None:
        parts.update(adv_enc=adv_enc.detach(), adv_dec=adv_dec.detach(), l1=l1.detach(), l2=l2.detach(), ssim=s.detach())
    return total


# -- SSIM -----------------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _gaussian_window(dtype, size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(x, y) -> torch.Tensor:
    """Per-window SSIM over valid (unpadded) 11x11 Gaussian windows, shape (N, C, H-10, W-10)."""
    if x.shape != y.shape:
        raise ValidationError(f"ssim shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() == 3:
        x, y = x[None], y[None]
    c = x.shape[1]
    win = _gaussian_window(x.dtype).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def blur(t):
        return F.conv2d(t, win, groups=c)

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return num / den


def ssim(x, y) -> torch.Tensor:
    """Mean SSIM over channels, windows and batch (unit dynamic range)."""
    return ssim_map(x, y).mean()


def ssim_per_sample(x, y) -> torch.Tensor:
    m = ssim_map(x, y)
    return m.flatten(1).mean(1)
