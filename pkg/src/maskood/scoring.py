"""Anomalous scoring: conditional binary classifier, IQA scorers, calibration, cascade.

All scorers follow one convention: higher score = more In-D-like. Distance-like
scorers are negated.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .classifier import Backbone
from .data import ImageSet, endless_batches, sample_mismatched_labels
from .discriminator import ssim_per_sample
from .errors import StateError, ValidationError
from .masking import MaskSpec, mask_batch
from .metrics import tpr_threshold
from .seeding import substream, torch_seed

log = logging.getLogger(__name__)

MIN_CALIBRATION_SAMPLES = 20
BUILTIN_SCORERS = ("cb", "ssim", "feature")


class ConditionalBinaryClassifier(nn.Module):
    """Scores a channel-concatenated pair (x, x') with a label projection term:
    ``score = w.h + embed(y).h`` where ``h`` are pooled backbone features."""

    def __init__(self, num_classes: int, width: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.backbone = Backbone(6, width)
        self.head = nn.Linear(self.backbone.out_features, 1)
        self.embed = nn.Embedding(num_classes, self.backbone.out_features)
        nn.init.normal_(self.embed.weight, 0.0, 0.1)
        self.trained = False

    def forward(self, x, x_synth, y):
        y = torch.as_tensor(y, dtype=torch.long)
        if y.numel() and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValidationError(f"labels must be in [0, {self.num_classes})")
        h = self.backbone(torch.cat([x, x_synth], 1))
        return self.head(h).squeeze(1) + (self.embed(y) * h).sum(1)

    def features(self, img):
        """Feature maps of a single image, fed as the pair (img, img)."""
        return self.backbone.feature_maps(torch.cat([img, img], 1))


def hinge_loss(pos_scores, neg_scores) -> torch.Tensor:
    """ReLU(1 - s+) + ReLU(1 + s-), each term averaged over its pairs."""
    pos = torch.as_tensor(pos_scores, dtype=torch.float64) if not torch.is_tensor(pos_scores) else pos_scores
    neg = torch.as_tensor(neg_scores, dtype=torch.float64) if not torch.is_tensor(neg_scores) else neg_scores
    return F.relu(1.0 - pos).mean() + F.relu(1.0 + neg).mean()


def _param_checksum(model: nn.Module) -> float:
    return float(sum(p.detach().double().sum() for p in model.parameters()))


@torch.no_grad()
def _synth(generator, x_m: np.ndarray, labels: np.ndarray) -> torch.Tensor:
    out, _ = generator(torch.from_numpy(x_m), torch.from_numpy(labels), deterministic=True)
    return out


def train_binary_classifier(generator, in_d_train: ImageSet, config, external: ImageSet | None = None, mask_spec: MaskSpec | None = None, width: int = 16) -> ConditionalBinaryClassifier:
    """Hinge-loss training on (x, G(M(x), y)) positives and (x, G(M(x), y')) negatives.

    ``external`` must already carry pseudo-labels; it contributes negatives only,
    with y' drawn uniformly from the labels other than the pseudo-label.
    """
    if generator is None or not getattr(generator, "trained", False):
        raise StateError("C_b training needs a trained generator")
    if external is not None and len(external) and np.any(external.labels < 0):
        raise StateError("external data must be pseudo-labelled before C_b training")
    mask_spec = mask_spec or config.mask_spec
    k = in_d_train.num_classes
    torch.manual_seed(torch_seed(config.seed, "cb-init"))
    model = ConditionalBinaryClassifier(k, width)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(config.adam_beta1, config.adam_beta2))
    rng = substream(config.seed, "cb-train")
    stream = endless_batches(in_d_train, config.batch_size, torch_seed(config.seed, "cb-data"))
    ext_stream = None
    if external is not None and len(external):
        ext_stream = endless_batches(external, config.batch_size, torch_seed(config.seed, "cb-external"))
    was_training = generator.training
    generator.eval()
    before = _param_checksum(generator)
    model.train()
    try:
        for step in range(config.steps):
            b = next(stream)
            x = torch.from_numpy(b.pixels)
            x_m, _ = mask_batch(b.pixels, mask_spec, rng)
            y_neg = sample_mismatched_labels(b.labels, k, rng)
            xs = [x, x]
            synth = [_synth(generator, x_m, b.labels), _synth(generator, x_m, y_neg)]
            ys = [torch.from_numpy(b.labels), torch.from_numpy(y_neg)]
            if ext_stream is not None:
                e = next(ext_stream)
                e_m, _ = mask_batch(e.pixels, mask_spec, rng)
                e_neg = sample_mismatched_labels(e.labels, k, rng)
                xs.append(torch.from_numpy(e.pixels))
                synth.append(_synth(generator, e_m, e_neg))
                ys.append(torch.from_numpy(e_neg))
            # one forward pass so batch-norm statistics are shared by positives and negatives
            out = model(torch.cat(xs), torch.cat(synth), torch.cat(ys))
            pos, neg = out[: len(x)], out[len(x) :]
            loss = hinge_loss(pos, neg)
            if not torch.isfinite(loss):
                raise StateError(f"C_b loss became non-finite at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    finally:
        generator.train(was_training)
    if _param_checksum(generator) != before:
        raise StateError("generator parameters changed during C_b training")
    model.eval()
    model.trained = True
    return model


def _tensor(a) -> torch.Tensor:
    a = torch.as_tensor(np.asarray(a, dtype=np.float32))
    return a[None] if a.dim() == 3 else a


@torch.no_grad()
def cb_score(cb: ConditionalBinaryClassifier, x, x_synth, y, batch_size: int = 512) -> np.ndarray:
    """C_b score per pair (higher = more In-D-like)."""
    if cb is None:
        raise StateError("no binary classifier")
    x, xs = _tensor(x), _tensor(x_synth)
    y = torch.as_tensor(np.atleast_1d(np.asarray(y, dtype=np.int64)))
    cb.eval()
    out = [cb(x[s : s + batch_size], xs[s : s + batch_size], y[s : s + batch_size]) for s in range(0, len(x), batch_size)]
    return torch.cat(out).double().numpy() if out else np.zeros(0)


@torch.no_grad()
def _ssim_scorer(x, x_synth, cb=None) -> np.ndarray:
    return ssim_per_sample(_tensor(x).double(), _tensor(x_synth).double()).numpy()


@torch.no_grad()
def _feature_scorer(x, x_synth, cb=None, batch_size: int = 512) -> np.ndarray:
    if cb is None:
        raise StateError("the feature scorer needs a binary classifier backbone")
    cb.eval()
    x, xs = _tensor(x), _tensor(x_synth)
    out = []
    for s in range(0, len(x), batch_size):
        fa, fb = cb.features(x[s : s + batch_size]), cb.features(xs[s : s + batch_size])
        out.append(-(fa.double() - fb.double()).flatten(1).norm(dim=1))
    return torch.cat(out).numpy() if out else np.zeros(0)


IQA_SCORERS = {"ssim": _ssim_scorer, "feature": _feature_scorer}


def iqa_score(scorer_id: str, x, x_synth, cb: ConditionalBinaryClassifier | None = None) -> np.ndarray:
    """Full-reference similarity between inputs and syntheses; higher = more similar."""
    try:
        fn = IQA_SCORERS[scorer_id]
    except KeyError:
        raise ValidationError(f"unknown IQA scorer {scorer_id!r}; known: {sorted(IQA_SCORERS)}") from None
    return fn(x, x_synth, cb)


# -- cascade --------------------------------------------------------------------


class Decision(str, enum.Enum):
    IN_D = "IN_D"
    OOD = "OOD"


class CalibrationMode(str, enum.Enum):
    PER_SCORER = "per_scorer"
    JOINT = "joint"


@dataclass
class ScorerOutput:
    scorer_name: str
    score: float
    threshold: float | None = None


@dataclass
class CascadeConfig:
    """Ordered scorers; a sample is OOD as soon as any score falls below its threshold.

    ``scales`` hold the In-D spread of each scorer and are used only to put
    margins on a common footing in :func:`fused_score`.
    """

    scorers: list = field(default_factory=lambda: list(BUILTIN_SCORERS))
    thresholds: dict = field(default_factory=dict)
    scales: dict = field(default_factory=dict)
    rule: str = "any_flag_rejects"
    mode: CalibrationMode = CalibrationMode.PER_SCORER
    target_tpr: float = 0.95

    def __post_init__(self):
        if not self.scorers:
            raise ValidationError("a cascade needs at least one scorer")
        if len(set(self.scorers)) != len(self.scorers):
            raise ValidationError("duplicate scorer in cascade")
        if self.rule != "any_flag_rejects":
            raise ValidationError(f"unsupported combination rule {self.rule!r}")
        self.mode = CalibrationMode(self.mode)
        self.scorers = list(self.scorers)

    @property
    def calibrated(self) -> bool:
        return all(self.thresholds.get(s) is not None for s in self.scorers)

    def subset(self, scorers) -> "CascadeConfig":
        scorers = list(scorers)
        return replace(
            self,
            scorers=scorers,
            thresholds={s: self.thresholds[s] for s in scorers if s in self.thresholds},
            scales={s: self.scales[s] for s in scorers if s in self.scales},
        )

    def to_dict(self) -> dict:
        return {
            "scorers": list(self.scorers),
            "thresholds": {k: float(v) for k, v in self.thresholds.items()},
            "scales": {k: float(v) for k, v in self.scales.items()},
            "rule": self.rule,
            "mode": self.mode.value,
            "target_tpr": self.target_tpr,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeConfig":
        unknown = set(d) - {"scorers", "thresholds", "scales", "rule", "mode", "target_tpr"}
        if unknown:
            raise ValidationError(f"cascade: unknown fields {sorted(unknown)}")
        try:
            return cls(**d)
        except ValueError as exc:
            raise ValidationError(f"cascade: {exc}") from None


def _scale(scores: np.ndarray) -> float:
    s = float(np.std(scores))
    return s if np.isfinite(s) and s > 0 else 1.0


def calibrate_thresholds(cascade: CascadeConfig, in_d_val_scores: dict, target_tpr: float | None = None, mode=None) -> CascadeConfig:
    """Thresholds from In-D validation scores.

    per_scorer: each threshold is the largest value that still passes at least
    ``target_tpr`` of that scorer's validation scores.
    joint: thresholds are then shifted together (in units of each scorer's
    spread) so that the whole cascade passes ``target_tpr``.
    """
    target = cascade.target_tpr if target_tpr is None else target_tpr
    mode = CalibrationMode(mode or cascade.mode)
    thresholds, scales = {}, {}
    for name in cascade.scorers:
        if name not in in_d_val_scores:
            raise ValidationError(f"no validation scores for scorer {name!r}")
        s = np.asarray(in_d_val_scores[name], dtype=np.float64)
        if len(s) < MIN_CALIBRATION_SAMPLES:
            raise ValidationError(f"scorer {name!r}: need >= {MIN_CALIBRATION_SAMPLES} validation scores, got {len(s)}")
        thresholds[name] = tpr_threshold(s, target)
        scales[name] = _scale(s)
    out = replace(cascade, thresholds=thresholds, scales=scales, mode=mode, target_tpr=target)
    if mode == CalibrationMode.JOINT and len(cascade.scorers) > 1:
        fused = fused_score(out, in_d_val_scores)
        q = tpr_threshold(fused, target)
        shifted = {n: thresholds[n] + q * scales[n] for n in cascade.scorers}
        # guard against rounding pushing a boundary sample below its shifted threshold
        for n in cascade.scorers:
            s = np.asarray(in_d_val_scores[n], dtype=np.float64)
            on_edge = s[fused >= q]
            if len(on_edge) and on_edge.min() < shifted[n]:
                shifted[n] = float(on_edge.min())
        out = replace(out, thresholds=shifted)
    return out


def _require_calibrated(cascade: CascadeConfig):
    missing = [s for s in cascade.scorers if cascade.thresholds.get(s) is None]
    if missing:
        raise StateError(f"uncalibrated scorer thresholds: {missing}")


def cascade_decide(cascade: CascadeConfig, scores: dict):
    """Return ``(Decision, first flagging scorer or None)`` for one sample.

    A score equal to its threshold passes.
    """
    _require_calibrated(cascade)
    for name in cascade.scorers:
        if float(scores[name]) < cascade.thresholds[name]:
            return Decision.OOD, name
    return Decision.IN_D, None


def cascade_decide_batch(cascade: CascadeConfig, scores: dict):
    """Vectorised :func:`cascade_decide`; returns ``(is_ood bool array, flagged list)``."""
    _require_calibrated(cascade)
    n = len(next(iter(scores.values())))
    flagged = [None] * n
    is_ood = np.zeros(n, dtype=bool)
    for name in cascade.scorers:
        below = np.asarray(scores[name]) < cascade.thresholds[name]
        for i in np.flatnonzero(below & ~is_ood):
            flagged[i] = name
        is_ood |= below
    return is_ood, flagged


def fused_score(cascade: CascadeConfig, scores: dict) -> np.ndarray:
    """Signed worst-case normalised margin ``min_i (s_i - t_i) / scale_i``.

    Non-negative exactly when the cascade accepts the sample, so every shift of
    a common cut on this score is again an any-flag-rejects rule.
    """
    _require_calibrated(cascade)
    margins = [(np.asarray(scores[n], dtype=np.float64) - cascade.thresholds[n]) / cascade.scales.get(n, 1.0) for n in cascade.scorers]
    return np.min(np.stack(margins), axis=0)
