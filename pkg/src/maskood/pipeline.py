"""Fitting and running the full detector: classify, mask, synthesize, score, decide."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .classifier import ClassifierModel, predict, train_classifier
from .data import ImageSet, pseudo_label
from .errors import StateError
from .generator import Generator, GeneratorConfig, synthesize
from .discriminator import DiscriminatorConfig
from .masking import MaskSpec
from .scoring import (
    CascadeConfig,
    ConditionalBinaryClassifier,
    calibrate_thresholds,
    cascade_decide_batch,
    cb_score,
    fused_score,
    iqa_score,
    train_binary_classifier,
)
from .seeding import substream
from .training import train

log = logging.getLogger(__name__)


@dataclass
class ScoreTable:
    """Per-sample outputs of a detector on one image set."""

    name: str
    ids: np.ndarray
    predicted: np.ndarray
    logits: np.ndarray
    scores: dict
    x_synth: np.ndarray | None = None

    def __len__(self):
        return len(self.ids)


@dataclass
class Detector:
    """A frozen classifier plus the masked conditional-synthesis detector around it.

    The classifier is only ever called through :func:`predict`; nothing here
    trains or modifies it.
    """

    classifier: ClassifierModel
    generator: Generator
    cb: ConditionalBinaryClassifier | None
    cascade: CascadeConfig
    mask_spec: MaskSpec
    seed: int = 0
    deterministic: bool = True
    info: dict = field(default_factory=dict)

    def synthesize(self, images: ImageSet, labels=None, stream: str = ""):
        rng = substream(self.seed, "detect-mask", _stable_hash(stream or images.name))
        if labels is None:
            labels, _ = predict(self.classifier, images.pixels)
        return synthesize(self.generator, images.pixels, labels, self.mask_spec, rng, self.deterministic)

    def score(self, images: ImageSet, scorers=None, keep_synth: bool = False, stream: str = "") -> ScoreTable:
        scorers = list(scorers or self.cascade.scorers)
        labels, logits = predict(self.classifier, images.pixels)
        pair = self.synthesize(images, labels, stream)
        scores = {}
        for name in scorers:
            if name == "cb":
                if self.cb is None:
                    raise StateError("cascade lists 'cb' but no binary classifier is attached")
                scores[name] = cb_score(self.cb, pair.x, pair.x_synth, labels)
            else:
                scores[name] = iqa_score(name, pair.x, pair.x_synth, self.cb)
        return ScoreTable(images.name, images.ids, labels, logits, scores, pair.x_synth if keep_synth else None)

    def calibrate(self, in_d_val: ImageSet, mode=None) -> CascadeConfig:
        table = self.score(in_d_val, stream="calibration")
        self.cascade = calibrate_thresholds(self.cascade, table.scores, mode=mode)
        self.info["calibration_scores"] = table.scores
        return self.cascade

    def decide(self, table: ScoreTable):
        return cascade_decide_batch(self.cascade, table.scores)

    def fused(self, table: ScoreTable, cascade: CascadeConfig | None = None) -> np.ndarray:
        return fused_score(cascade or self.cascade, table.scores)

    def classify(self, pixels):
        """Classifier output with the detector attached: ``(labels, logits, is_ood)``."""
        images = ImageSet(np.asarray(pixels, np.float32), np.full(len(pixels), -1), "ood_test", self.classifier.num_classes, "classify")
        table = self.score(images)
        is_ood, _ = self.decide(table)
        return table.predicted, table.logits, is_ood


def _stable_hash(s: str) -> int:
    import zlib

    return zlib.crc32(s.encode("utf-8"))


@dataclass
class FitOptions:
    """Everything :func:`fit_detector` needs besides the data."""

    seed: int
    mask: MaskSpec
    inference_mask: MaskSpec | None
    generator_model: dict
    discriminator_model: dict
    generator_train: object
    classifier_train: object
    cb_train: object
    classifier_width: int = 16
    cb_width: int = 16
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    deterministic: bool = True


def fit_detector(opts: FitOptions, in_d_train: ImageSet, in_d_val: ImageSet, external: ImageSet | None = None, classifier: ClassifierModel | None = None, out_dir=None) -> Detector:
    """Train (or reuse) the classifier, then generator and C_b, then calibrate."""
    from pathlib import Path

    from .checkpoint import save_cb, save_classifier

    timings = {}
    k = in_d_train.num_classes
    t0 = time.perf_counter()
    if classifier is None:
        classifier = train_classifier(in_d_train, replace(opts.classifier_train, seed=opts.seed), opts.classifier_width, val=in_d_val)
        if out_dir is not None:
            save_classifier(Path(out_dir) / "classifier.pt", classifier, {"seed": opts.seed})
    timings["classifier"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    gen_cfg = GeneratorConfig(num_classes=k, **opts.generator_model)
    disc_cfg = DiscriminatorConfig(num_classes=k, **opts.discriminator_model)
    gtrain = replace(opts.generator_train, seed=opts.seed, mask_spec=opts.mask)
    result = train(in_d_train, gtrain, gen_cfg, disc_cfg, out_dir)
    generator = result.models.generator
    timings["generator"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ext = None
    if external is not None and len(external):
        ext = pseudo_label(classifier, external)
    cb = None
    inference_mask = opts.inference_mask or opts.mask
    if "cb" in opts.cascade.scorers or "feature" in opts.cascade.scorers:
        cb = train_binary_classifier(generator, in_d_train, replace(opts.cb_train, seed=opts.seed), ext, opts.mask, opts.cb_width)
        if out_dir is not None:
            save_cb(Path(out_dir) / "cb.pt", cb, {"seed": opts.seed})
    timings["cb"] = time.perf_counter() - t0

    det = Detector(classifier, generator, cb, replace(opts.cascade, thresholds={}, scales={}), inference_mask, opts.seed, opts.deterministic)
    det.calibrate(in_d_val)
    det.info["timings"] = timings
    det.info["generator_metrics"] = result.metrics
    return det
