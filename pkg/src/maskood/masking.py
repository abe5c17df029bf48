"""Pixel masks: generation and application for every masking style."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError


class MaskStyle(str, enum.Enum):
    NONE = "none"
    RANDOMLY = "randomly"
    FIXED_LOW = "fixed_low"
    FIXED_HIGH = "fixed_high"
    PATCHED = "patched"
    SHUFFLING = "shuffling"


_DEFAULT_RATIOS = {
    MaskStyle.NONE: (0.0, 0.0),
    MaskStyle.RANDOMLY: (0.1, 0.3),
    MaskStyle.FIXED_LOW: (0.1, 0.1),
    MaskStyle.FIXED_HIGH: (0.3, 0.3),
    MaskStyle.PATCHED: (0.3, 0.3),
    MaskStyle.SHUFFLING: (0.0, 0.0),
}


@dataclass(frozen=True)
class MaskSpec:
    """Masking style and ratio bounds.

    Only RANDOMLY draws its ratio from ``[ratio_low, ratio_high]``; the fixed
    and patched styles mask ``ratio_high`` of the image.
    """

    style: MaskStyle = MaskStyle.RANDOMLY
    ratio_low: float = 0.1
    ratio_high: float = 0.3
    patch_size: int = 4
    fill_value: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "style", MaskStyle(self.style))
        if not (0.0 <= self.ratio_low <= self.ratio_high <= 1.0):
            raise ValidationError(f"need 0 <= ratio_low <= ratio_high <= 1, got {self.ratio_low}, {self.ratio_high}")
        if self.patch_size < 1:
            raise ValidationError("patch_size must be >= 1")
        if not (0.0 <= self.fill_value <= 1.0):
            raise ValidationError("fill_value must be in [0, 1]")

    @classmethod
    def default(cls, style) -> "MaskSpec":
        style = MaskStyle(style)
        lo, hi = _DEFAULT_RATIOS[style]
        return cls(style, lo, hi)

    def to_dict(self) -> dict:
        return {
            "style": self.style.value,
            "ratio_low": self.ratio_low,
            "ratio_high": self.ratio_high,
            "patch_size": self.patch_size,
            "fill_value": self.fill_value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        d = dict(d)
        try:
            style = MaskStyle(d.pop("style", "randomly"))
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        base = cls.default(style)
        unknown = set(d) - {"ratio_low", "ratio_high", "patch_size", "fill_value"}
        if unknown:
            raise ValidationError(f"mask: unknown fields {sorted(unknown)}")
        return replace(base, **d)


@dataclass(frozen=True)
class MaskMap:
    bits: np.ndarray  # (H, W) bool, True = masked

    @property
    def realized_ratio(self) -> float:
        return float(self.bits.sum()) / self.bits.size


def _pixel_count(ratio: float, n: int) -> int:
    # floor(r*n) with slack so that e.g. 0.3*1000 does not floor to 299
    return min(n, int(np.floor(ratio * n + 1e-9)))


def generate_mask(spec: MaskSpec, shape, rng: np.random.Generator) -> MaskMap:
    h, w = (int(s) for s in shape)
    if h <= 0 or w <= 0:
        raise ValidationError(f"mask shape must be positive, got {shape}")
    bits = np.zeros((h, w), dtype=bool)
    style = spec.style
    if style in (MaskStyle.NONE, MaskStyle.SHUFFLING):
        return MaskMap(bits)
    if style == MaskStyle.PATCHED:
        p = spec.patch_size
        if p > min(h, w):
            raise ValidationError(f"patch_size {p} exceeds image size {h}x{w}")
        gh, gw = h // p, w // p
        tiles = min(gh * gw, int(np.floor(spec.ratio_high * h * w / (p * p) + 0.5)))
        for t in rng.choice(gh * gw, size=tiles, replace=False):
            r, c = divmod(int(t), gw)
            bits[r * p : (r + 1) * p, c * p : (c + 1) * p] = True
        return MaskMap(bits)
    if style == MaskStyle.RANDOMLY:
        ratio = rng.uniform(spec.ratio_low, spec.ratio_high)
    else:
        ratio = spec.ratio_high
    k = _pixel_count(ratio, h * w)
    bits.reshape(-1)[rng.choice(h * w, size=k, replace=False)] = True
    return MaskMap(bits)


def apply_mask(pixels: np.ndarray, mask: MaskMap, spec: MaskSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Fill masked positions in every channel; SHUFFLING permutes pixel positions instead."""
    pixels = np.asarray(pixels)
    if pixels.shape[-2:] != mask.bits.shape:
        raise ValidationError(f"mask {mask.bits.shape} does not match image {pixels.shape[-2:]}")
    if spec.style == MaskStyle.SHUFFLING:
        if rng is None:
            raise ValidationError("shuffling needs an rng")
        h, w = mask.bits.shape
        perm = rng.permutation(h * w)
        flat = pixels.reshape(*pixels.shape[:-2], h * w)
        return flat[..., perm].reshape(pixels.shape)
    out = pixels.copy()
    out[..., mask.bits] = spec.fill_value
    return out


def mask_batch(pixels: np.ndarray, spec: MaskSpec, rng: np.random.Generator):
    """Fresh mask per sample for an (N, C, H, W) batch; returns ``(masked, bits)``."""
    pixels = np.asarray(pixels, dtype=np.float32)
    out = np.empty_like(pixels)
    bits = np.zeros((len(pixels),) + pixels.shape[-2:], dtype=bool)
    for i, img in enumerate(pixels):
        m = generate_mask(spec, img.shape[-2:], rng)
        out[i] = apply_mask(img, m, spec, rng)
        bits[i] = m.bits
    return out, bits
