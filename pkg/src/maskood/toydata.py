"""Synthetic 32x32 shapes: one shape family per In-D class, disjoint families for OOD."""
from __future__ import annotations

import numpy as np

from .data import UNLABELED, ImageSet, Source, write_records
from .errors import ValidationError
from .seeding import substream

IN_D_FAMILIES = ("circle", "square", "cross", "ring", "hbar", "vbar", "frame", "dot_pair")
OOD_FAMILIES = ("triangle", "diamond")

_YY, _XX = np.mgrid[0:32, 0:32].astype(np.float32)


def _shape_mask(family: str, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = _YY - cy, _XX - cx
    ady, adx = np.abs(dy), np.abs(dx)
    if family == "circle":
        return dy**2 + dx**2 <= r**2
    if family == "square":
        return np.maximum(ady, adx) <= 0.85 * r
    if family == "cross":
        t = r / 3.0
        return ((adx <= t) & (ady <= r)) | ((ady <= t) & (adx <= r))
    if family == "ring":
        d = np.sqrt(dy**2 + dx**2)
        return (d <= r) & (d >= 0.55 * r)
    if family == "hbar":
        return (ady <= r / 3.0) & (adx <= r)
    if family == "vbar":
        return (adx <= r / 3.0) & (ady <= r)
    if family == "frame":
        m = np.maximum(ady, adx)
        return (m <= 0.85 * r) & (m >= 0.5 * r)
    if family == "dot_pair":
        s = 0.45 * r
        return ((dy**2 + (dx - s) ** 2) <= s**2) | ((dy**2 + (dx + s) ** 2) <= s**2)
    if family == "triangle":
        top, bottom = -r, 0.8 * r
        half_width = (dy - top) / (bottom - top) * r
        return (dy >= top) & (dy <= bottom) & (adx <= half_width)
    if family == "diamond":
        return adx + ady <= 1.1 * r
    raise ValidationError(f"unknown shape family {family!r}")


def render(family: str, rng: np.random.Generator) -> np.ndarray:
    """One uint8 (32, 32, 3) image of ``family`` with random placement and colours."""
    r = rng.uniform(7.0, 11.0)
    cy, cx = rng.uniform(r + 1, 31 - r, size=2)
    bg = rng.uniform(0.0, 0.35, size=3)
    fg = rng.uniform(0.55, 1.0, size=3)
    mask = _shape_mask(family, cy, cx, r)[..., None]
    img = np.where(mask, fg, bg) + rng.normal(0.0, 0.02, size=(32, 32, 3))
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def make_shapes(num_classes: int, count: int, seed: int, ood: bool = False):
    """Return ``(uint8 pixels (N,32,32,3), labels)``; OOD images carry UNLABELED."""
    if not 1 <= num_classes <= len(IN_D_FAMILIES):
        raise ValidationError(f"classes must be in [1, {len(IN_D_FAMILIES)}]")
    rng = substream(seed, "toy-ood" if ood else "toy-ind")
    families = OOD_FAMILIES if ood else IN_D_FAMILIES[:num_classes]
    labels = np.arange(count) % len(families)
    rng.shuffle(labels)
    pixels = np.stack([render(families[k], rng) for k in labels]) if count else np.zeros((0, 32, 32, 3), np.uint8)
    if ood:
        labels = np.full(count, UNLABELED, dtype=np.int64)
    return pixels, labels.astype(np.int64)


def write_toy_dataset(out_dir, num_classes: int, count: int, seed: int, ood_count: int | None = None):
    """Write ``toy_ind.mdc`` and ``toy_ood.mdc`` to ``out_dir``; returns both paths."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ood_count = count // 4 if ood_count is None else ood_count
    ind_path, ood_path = out / "toy_ind.mdc", out / "toy_ood.mdc"
    pix, lab = make_shapes(num_classes, count, seed)
    write_records(ind_path, pix, lab, num_classes)
    pix, lab = make_shapes(num_classes, ood_count, seed, ood=True)
    write_records(ood_path, pix, lab, num_classes)
    return ind_path, ood_path


def toy_imageset(num_classes: int, count: int, seed: int, ood: bool = False) -> ImageSet:
    pix, lab = make_shapes(num_classes, count, seed, ood)
    source = Source.OOD_TEST if ood else Source.IN_D_TRAIN
    return ImageSet(pix.transpose(0, 3, 1, 2).astype(np.float32) / 255.0, lab, source, num_classes, "toy-ood" if ood else "toy")
