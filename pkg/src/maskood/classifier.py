"""The protected K-way image classifier and the residual backbone it shares with C_b."""
from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageSet, endless_batches
from .errors import StateError, ValidationError
from .seeding import substream, torch_seed

log = logging.getLogger(__name__)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(h)) + self.shortcut(x))


class Backbone(nn.Module):
    """Stem + four residual blocks (32 -> 32 -> 16 -> 8 -> 4)."""

    def __init__(self, in_channels=3, width=16):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        self.blocks = nn.Sequential(
            ResBlock(width, width),
            ResBlock(width, 2 * width, 2),
            ResBlock(2 * width, 4 * width, 2),
            ResBlock(4 * width, 4 * width, 2),
        )
        self.out_features = 4 * width

    def feature_maps(self, x):
        return self.blocks(self.stem(x))

    def forward(self, x):
        return self.feature_maps(x).mean((2, 3))


class ClassifierModel(nn.Module):
    def __init__(self, num_classes: int, width: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.backbone = Backbone(3, width)
        self.fc = nn.Linear(self.backbone.out_features, num_classes)
        self.trained = False

    def forward(self, x):
        return self.fc(self.backbone(x))


def _augment(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip and 2-pixel reflect-pad random crop."""
    out = np.empty_like(x)
    padded = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)), mode="reflect")
    flips = rng.random(len(x)) < 0.5
    offs = rng.integers(0, 5, size=(len(x), 2))
    for i in range(len(x)):
        dy, dx = offs[i]
        crop = padded[i, :, dy : dy + 32, dx : dx + 32]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def train_classifier(in_d_train: ImageSet, config, width: int = 16, val: ImageSet | None = None, augment: bool = True) -> ClassifierModel:
    """Cross-entropy training with Adam; independent of the detector."""
    torch.manual_seed(torch_seed(config.seed, "classifier-init"))
    model = ClassifierModel(in_d_train.num_classes, width)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(config.adam_beta1, config.adam_beta2))
    rng = substream(config.seed, "classifier-augment")
    stream = endless_batches(in_d_train, config.batch_size, torch_seed(config.seed, "classifier-data"))
    model.train()
    for step in range(config.steps):
        batch = next(stream)
        x = _augment(batch.pixels, rng) if augment else batch.pixels
        logits = model(torch.from_numpy(x))
        loss = F.cross_entropy(logits, torch.from_numpy(batch.labels))
        if not torch.isfinite(loss):
            raise StateError(f"classifier loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    model.trained = True
    if val is not None and len(val):
        log.info("classifier validation accuracy %.4f", accuracy(model, val))
    return model


@torch.no_grad()
def predict(model: ClassifierModel, pixels, batch_size: int = 512):
    """Return ``(labels, logits)`` as numpy arrays; label = argmax of logits."""
    x = np.asarray(pixels, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    was_training = model.training
    model.eval()
    logits = [model(torch.from_numpy(x[s : s + batch_size])).numpy() for s in range(0, len(x), batch_size)]
    model.train(was_training)
    logits = np.concatenate(logits) if logits else np.zeros((0, model.num_classes), np.float32)
    labels = logits.argmax(1)
    if single:
        return int(labels[0]), logits[0]
    return labels, logits


def accuracy(model, dataset: ImageSet) -> float:
    if len(dataset) == 0:
        raise ValidationError("accuracy of an empty dataset is undefined")
    labels, _ = predict(model, dataset.pixels)
    return float(np.mean(labels == dataset.labels))
