"""Conditional encoder-decoder synthesis model.

The encoder maps a masked image to a diagonal Gaussian latent; the decoder is a
small residual up-sampling generator whose normalisation layers pick their
scale and shift by class label.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, StateError, ValidationError
from .masking import MaskSpec, mask_batch


@dataclass
class GeneratorConfig:
    num_classes: int
    latent_dim: int = 128
    channels: int = 32
    conditioned: bool = True
    encoder_conditioned: bool = False
    shared_embedding: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentCode:
    mu: torch.Tensor
    log_var: torch.Tensor
    z: torch.Tensor
    eps: torch.Tensor | None = None


class ConditionalBatchNorm2d(nn.Module):
    """Batch norm without affine params followed by a per-class scale and shift."""

    def __init__(self, num_features: int, num_classes: int, shared_dim: int = 0):
        super().__init__()
        self.bn = nn.BatchNorm2d(num_features, affine=False)
        if shared_dim:
            self.gain = nn.Linear(shared_dim, num_features, bias=False)
            self.bias = nn.Linear(shared_dim, num_features, bias=False)
            nn.init.normal_(self.gain.weight, 0.0, 0.02)
            nn.init.normal_(self.bias.weight, 0.0, 0.02)
        else:
            self.gain = nn.Embedding(num_classes, num_features)
            self.bias = nn.Embedding(num_classes, num_features)
            nn.init.normal_(self.gain.weight, 1.0, 0.02)
            nn.init.normal_(self.bias.weight, 0.0, 0.02)
        self.shared = bool(shared_dim)

    def forward(self, x, cond):
        # cond: class ids, or a shared class embedding when ``shared``
        out = self.bn(x)
        gain = self.gain(cond)
        if self.shared:
            gain = gain + 1.0
        return out * gain[:, :, None, None] + self.bias(cond)[:, :, None, None]


class GBlock(nn.Module):
    def __init__(self, cin, cout, num_classes, shared_dim=0):
        super().__init__()
        self.bn1 = ConditionalBatchNorm2d(cin, num_classes, shared_dim)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn2 = ConditionalBatchNorm2d(cout, num_classes, shared_dim)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1)

    def forward(self, x, cond):
        h = F.relu(self.bn1(x, cond))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = self.conv2(F.relu(self.bn2(h, cond)))
        return h + self.skip(F.interpolate(x, scale_factor=2, mode="nearest"))


class Encoder(nn.Module):
    """Four stride-2 convolutions, then linear heads for mu and log-variance."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        ch = cfg.channels
        cin = 3 + (cfg.num_classes if cfg.encoder_conditioned else 0)
        widths = [cin, ch, 2 * ch, 4 * ch, 8 * ch]
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 4, stride=2, padding=1) for a, b in zip(widths, widths[1:]))
        self.fc_mu = nn.Linear(8 * ch * 2 * 2, cfg.latent_dim)
        self.fc_log_var = nn.Linear(8 * ch * 2 * 2, cfg.latent_dim)
        self.num_classes = cfg.num_classes
        self.label_planes = cfg.encoder_conditioned

    def forward(self, x, y=None):
        if self.label_planes:
            onehot = F.one_hot(y, self.num_classes).to(x.dtype)
            x = torch.cat([x, onehot[:, :, None, None].expand(-1, -1, *x.shape[-2:])], 1)
        h = x
        for i, conv in enumerate(self.convs):
            h = F.leaky_relu(conv(h), 0.2)
            if not torch.isfinite(h).all():
                raise NumericError(f"non-finite activation in encoder layer {i}")
        h = h.flatten(1)
        mu, log_var = self.fc_mu(h), self.fc_log_var(h)
        if not (torch.isfinite(mu).all() and torch.isfinite(log_var).all()):
            raise NumericError(f"non-finite activation in encoder layer {len(self.convs)} (heads)")
        return mu, log_var


class Decoder(nn.Module):
    """z (latent_dim) -> 4x4 -> 8 -> 16 -> 32, sigmoid output in [0, 1]."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        ch = cfg.channels
        shared_dim = cfg.latent_dim if cfg.shared_embedding else 0
        self.shared_embed = nn.Embedding(cfg.num_classes, shared_dim) if shared_dim else None
        self.fc = nn.Linear(cfg.latent_dim, 4 * ch * 4 * 4)
        self.blocks = nn.ModuleList(
            [
                GBlock(4 * ch, 4 * ch, cfg.num_classes, shared_dim),
                GBlock(4 * ch, 2 * ch, cfg.num_classes, shared_dim),
                GBlock(2 * ch, ch, cfg.num_classes, shared_dim),
            ]
        )
        self.out_bn = nn.BatchNorm2d(ch)
        self.out_conv = nn.Conv2d(ch, 3, 3, padding=1)
        self.ch = ch

    def forward(self, z, y):
        cond = self.shared_embed(y) if self.shared_embed is not None else y
        h = self.fc(z).view(-1, 4 * self.ch, 4, 4)
        for block in self.blocks:
            h = block(h, cond)
        return torch.sigmoid(self.out_conv(F.relu(self.out_bn(h))))


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.trained = False

    def _labels(self, y):
        y = torch.as_tensor(y, dtype=torch.long)
        if y.numel() and (y.min() < 0 or y.max() >= self.cfg.num_classes):
            raise ValidationError(f"labels must be in [0, {self.cfg.num_classes})")
        # the unconditioned ablation feeds one constant class everywhere
        return y if self.cfg.conditioned else torch.zeros_like(y)

    def encode(self, x_m, y=None, deterministic=False, eps=None, generator=None) -> LatentCode:
        if tuple(x_m.shape[-3:]) != (3, 32, 32):
            raise ValidationError(f"encoder expects (3, 32, 32) inputs, got {tuple(x_m.shape[-3:])}")
        if self.cfg.encoder_conditioned:
            if y is None:
                raise ValidationError("encoder_conditioned model needs labels")
            y = self._labels(y)
        mu, log_var = self.encoder(x_m, y)
        if deterministic:
            return LatentCode(mu, log_var, mu, None)
        if eps is None:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return LatentCode(mu, log_var, mu + torch.exp(0.5 * log_var) * eps, eps)

    def decode(self, z, y):
        if not torch.isfinite(z).all():
            raise ValidationError("latent z must be finite")
        return self.decoder(z, self._labels(y))

    def forward(self, x_m, y, deterministic=False, eps=None, generator=None):
        code = self.encode(x_m, y, deterministic, eps, generator)
        return self.decode(code.z, y), code

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def kld_loss(code: LatentCode) -> torch.Tensor:
    """KL(N(mu, diag(exp(log_var))) || N(0, I)), summed over dims, mean over batch."""
    mu, log_var = code.mu, code.log_var
    per_dim = 0.5 * (mu.pow(2) + torch.exp(log_var) - 1.0 - log_var)
    return per_dim.reshape(-1, mu.shape[-1]).sum(-1).mean()


@dataclass
class SynthesisPair:
    x: np.ndarray
    label: np.ndarray
    x_synth: np.ndarray
    mask: np.ndarray


@torch.no_grad()
def synthesize(model: Generator, x, label, mask_spec: MaskSpec, rng: np.random.Generator, deterministic: bool = True, batch_size: int = 256) -> SynthesisPair:
    """Mask, encode and decode a batch of images under the given labels (numpy in, numpy out)."""
    if model is None:
        raise StateError("no generator")
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    label = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if label.shape[0] == 1 and len(x) > 1:
        label = np.repeat(label, len(x))
    was_training = model.training
    model.eval()
    try:
        x_m, bits = mask_batch(x, mask_spec, rng)
        outs = []
        for s in range(0, len(x), batch_size):
            xb = torch.from_numpy(x_m[s : s + batch_size])
            yb = torch.from_numpy(label[s : s + batch_size])
            gen = None
            if not deterministic:
                gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
            out, _ = model(xb, yb, deterministic=deterministic, generator=gen)
            outs.append(out.numpy())
        x_synth = np.concatenate(outs) if outs else np.zeros_like(x)
    finally:
        model.train(was_training)
    if single:
        return SynthesisPair(x[0], label[0], x_synth[0], bits[0])
    return SynthesisPair(x, label, x_synth, bits)
