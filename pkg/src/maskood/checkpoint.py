"""Versioned checkpoint container shared by every model in the package.

A checkpoint is a ``torch.save`` dict::

    {"format": "maskood", "version": 1, "kind": ...,
     "hparams": {...}, "state": {name: state_dict}, "metadata": {...}}

Tensors are stored as-is, so save/load round-trips bit-exactly.
"""
from __future__ import annotations

from pathlib import Path

import torch

from .errors import StateError

FORMAT = "maskood"
VERSION = 1


def save(path, kind: str, hparams: dict, modules: dict, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "hparams": hparams,
        "state": {name: m.state_dict() for name, m in modules.items()},
        "metadata": dict(metadata or {}),
    }
    torch.save(payload, path)
    return path


def load(path, kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise StateError(f"missing checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != FORMAT:
        raise StateError(f"{path} is not a {FORMAT} checkpoint")
    if payload.get("version") != VERSION:
        raise StateError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if payload.get("kind") != kind:
        raise StateError(f"{path} holds a {payload.get('kind')!r} model, expected {kind!r}")
    return payload


def save_gan(path, models, config, final: bool = False) -> Path:
    g, d = models.generator, models.discriminator
    return save(
        path,
        "gan",
        {"generator": g.cfg.to_dict(), "discriminator": d.cfg.to_dict()},
        {"generator": g, "discriminator": d},
        {"step": models.step, "seed": models.seed, "final": final, "train_config": config.to_dict() if config else None},
    )


def load_gan(path):
    """Return ``(generator, discriminator, metadata)`` in eval mode."""
    from .discriminator import DiscriminatorConfig, UNetDiscriminator
    from .generator import Generator, GeneratorConfig

    p = load(path, "gan")
    g = Generator(GeneratorConfig(**p["hparams"]["generator"]))
    d = UNetDiscriminator(DiscriminatorConfig(**p["hparams"]["discriminator"]))
    g.load_state_dict(p["state"]["generator"])
    d.load_state_dict(p["state"]["discriminator"])
    g.eval()
    d.eval()
    g.trained = p["metadata"].get("step", 0) > 0
    return g, d, p["metadata"]


def save_classifier(path, model, metadata=None) -> Path:
    return save(path, "classifier", {"num_classes": model.num_classes, "width": model.width}, {"model": model}, metadata)


def load_classifier(path):
    from .classifier import ClassifierModel

    p = load(path, "classifier")
    model = ClassifierModel(**p["hparams"])
    model.load_state_dict(p["state"]["model"])
    model.eval()
    model.trained = True
    return model


def save_cb(path, model, metadata=None) -> Path:
    return save(path, "binary_classifier", {"num_classes": model.num_classes, "width": model.width}, {"model": model}, metadata)


def load_cb(path):
    from .scoring import ConditionalBinaryClassifier

    p = load(path, "binary_classifier")
    model = ConditionalBinaryClassifier(**p["hparams"])
    model.load_state_dict(p["state"]["model"])
    model.eval()
    model.trained = True
    return model
