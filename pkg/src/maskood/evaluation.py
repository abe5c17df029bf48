"""Benchmark reports, ablation drivers and score-file ingestion.

Internal values are fractions; percentages appear only in :meth:`MetricsReport.table`.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics
from .classifier import accuracy
from .data import ImageSet
from .errors import DataError, ValidationError
from .masking import MaskSpec, MaskStyle

log = logging.getLogger(__name__)

METRIC_NAMES = ("fpr_at_tpr95", "auroc", "aupr_in", "aupr_out")
SCORE_FILE_HEADER = ("sample_id", "scorer_name", "score", "source")
ABLATION_KINDS = ("masking_styles", "scorer_combinations", "label_conditioning")


@dataclass
class MetricsRow:
    dataset: str
    fpr_at_tpr95: float
    auroc: float
    aupr_in: float
    aupr_out: float
    classification_accuracy: float | None = None
    n_in: int = 0
    n_ood: int = 0

    def values(self):
        return [getattr(self, m) for m in METRIC_NAMES]


def metrics_row(dataset: str, in_d_scores, ood_scores, classification_accuracy=None) -> MetricsRow:
    m = metrics.all_metrics(in_d_scores, ood_scores)
    return MetricsRow(dataset, m["fpr_at_tpr95"], m["auroc"], m["aupr_in"], m["aupr_out"], classification_accuracy, len(in_d_scores), len(ood_scores))


@dataclass
class MetricsReport:
    """Per-OOD-dataset rows; mean and std (population, ddof=0) are derived from them."""

    name: str
    rows: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def _column(self, key):
        return np.array([getattr(r, key) for r in self.rows], dtype=np.float64)

    def mean(self) -> dict:
        if not self.rows:
            raise ValidationError("empty report")
        return {m: float(np.mean(self._column(m))) for m in METRIC_NAMES}

    def std(self) -> dict:
        if not self.rows:
            raise ValidationError("empty report")
        return {m: float(np.std(self._column(m))) for m in METRIC_NAMES}

    @property
    def classification_accuracy(self):
        accs = [r.classification_accuracy for r in self.rows if r.classification_accuracy is not None]
        return accs[0] if accs else None

    def to_dict(self) -> dict:
        return {"name": self.name, "rows": [asdict(r) for r in self.rows], "mean": self.mean(), "std": self.std(), "info": self.info}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["name"], [MetricsRow(**r) for r in d["rows"]], dict(d.get("info", {})))

    def to_json(self) -> str:
        # repr-precision floats, so the round trip is exact
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def table(self) -> str:
        """Aligned text table in percent. The FPR std is shown in parentheses since
        it says little about overall performance."""
        head = ["OOD dataset", "FPR@TPR95", "AUROC", "AUPR-In", "AUPR-Out", "Acc"]
        body = []
        for r in self.rows:
            acc = "N/A" if r.classification_accuracy is None else f"{100 * r.classification_accuracy:.2f}"
            body.append([r.dataset] + [f"{100 * v:.2f}" for v in r.values()] + [acc])
        mean, std = self.mean(), self.std()
        body.append(["Mean"] + [f"{100 * mean[m]:.2f}" for m in METRIC_NAMES] + [""])
        body.append(["Std", f"({100 * std['fpr_at_tpr95']:.2f})"] + [f"{100 * std[m]:.2f}" for m in METRIC_NAMES[1:]] + [""])
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
        fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
        lines = [f"# {self.name}", fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str | None = None):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.name
        (out / f"{stem}.json").write_text(self.to_json())
        (out / f"{stem}.txt").write_text(self.table())
        return out / f"{stem}.json", out / f"{stem}.txt"


def scalar_scores(detector, table, scorer: str | None = None) -> np.ndarray:
    """The reported scalar: the fused cascade margin, or one scorer's raw score."""
    if scorer is None:
        return detector.fused(table)
    return np.asarray(table.scores[scorer], dtype=np.float64)


def run_benchmark(detector, in_d_test: ImageSet, ood_sets: dict, scorer: str | None = None, name: str = "benchmark") -> MetricsReport:
    if not ood_sets:
        raise ValidationError("need at least one OOD test set")
    acc = accuracy(detector.classifier, in_d_test)
    in_table = detector.score(in_d_test, stream="in_d_test")
    in_scores = scalar_scores(detector, in_table, scorer)
    rows = []
    for ood_name, ood in ood_sets.items():
        ood_table = detector.score(ood, stream=f"ood:{ood_name}")
        rows.append(metrics_row(ood_name, in_scores, scalar_scores(detector, ood_table, scorer), acc))
    return MetricsReport(name, rows, {"scorer": scorer or "cascade", "scorers": list(detector.cascade.scorers)})


# -- score files ------------------------------------------------------------------------


def write_score_file(path, records) -> Path:
    """``records``: iterable of ``(sample_id, scorer_name, score, source)``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_FILE_HEADER)
        for sid, scorer, score, source in records:
            if source not in ("in_d", "ood"):
                raise ValidationError(f"source must be in_d or ood, got {source!r}")
            w.writerow([sid, scorer, repr(float(score)), source])
    return path


def score_records(detector, in_table, ood_tables: dict):
    for table, source in [(in_table, "in_d")] + [(t, "ood") for t in ood_tables.values()]:
        for name, scores in table.scores.items():
            for sid, s in zip(table.ids, scores):
                yield str(sid), name, float(s), source
        if detector.cascade.calibrated:
            for sid, s in zip(table.ids, detector.fused(table)):
                yield str(sid), "cascade", float(s), source


def read_score_file(path) -> dict:
    """Return ``{scorer_name: (in_d_scores, ood_scores)}``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing score file: {path}", path)
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SCORE_FILE_HEADER:
            raise DataError(f"{path}: header must be {','.join(SCORE_FILE_HEADER)}", path)
        for lineno, row in enumerate(reader, start=2):
            try:
                score = float(row["score"])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad score {row['score']!r}", path) from None
            if row["source"] not in ("in_d", "ood"):
                raise DataError(f"{path}:{lineno}: bad source {row['source']!r}", path)
            pair = out.setdefault(row["scorer_name"], ([], []))
            pair[0 if row["source"] == "in_d" else 1].append(score)
    return {k: (np.array(a), np.array(b)) for k, (a, b) in out.items()}


def evaluate_score_file(path, name: str | None = None) -> MetricsReport:
    """One row per scorer found in an external score file."""
    rows = []
    for scorer, (ind, ood) in read_score_file(path).items():
        if len(ind) == 0 or len(ood) == 0:
            raise ValidationError(f"scorer {scorer!r} needs both in_d and ood scores")
        rows.append(metrics_row(scorer, ind, ood))
    if not rows:
        raise ValidationError(f"{path}: no scores")
    return MetricsReport(name or Path(path).stem, rows)


# -- ablations --------------------------------------------------------------------------


@dataclass
class BenchmarkData:
    in_d_train: ImageSet
    in_d_val: ImageSet
    in_d_test: ImageSet
    ood: dict
    external: ImageSet | None = None


@dataclass
class AblationTable:
    """One report per variant; each report's rows are (seed, OOD set) pairs."""

    kind: str
    variants: list
    reports: dict

    def summary(self) -> MetricsReport:
        rows = []
        for v in self.variants:
            mean = self.reports[v].mean()
            rows.append(MetricsRow(v, *(mean[m] for m in METRIC_NAMES), self.reports[v].classification_accuracy))
        return MetricsReport(f"ablation-{self.kind}", rows)

    def auroc(self, variant: str) -> float:
        return self.reports[variant].mean()["auroc"]


class DetectorCache:
    """Memoises fitted detectors and classifiers by a caller-supplied key."""

    def __init__(self):
        self.detectors = {}
        self.classifiers = {}

    def detector(self, key, build):
        if key not in self.detectors:
            self.detectors[key] = build()
        return self.detectors[key]


def _fit(opts, data: BenchmarkData, cache: DetectorCache, key):
    from .pipeline import fit_detector

    def build():
        det = fit_detector(opts, data.in_d_train, data.in_d_val, data.external, classifier=cache.classifiers.get(opts.seed))
        cache.classifiers.setdefault(opts.seed, det.classifier)
        return det

    return cache.detector(key, build)


def scorer_subsets(scorers) -> list:
    return [list(c) for r in range(1, len(scorers) + 1) for c in itertools.combinations(scorers, r)]


def _variant_name(scorers) -> str:
    return "+".join(scorers)


def run_ablation(kind: str, opts, data: BenchmarkData, seeds=(0,), cache: DetectorCache | None = None) -> AblationTable:
    """Compare variants of ``opts`` (a :class:`~maskood.pipeline.FitOptions`) over ``seeds``.

    masking_styles: one generator per mask style, trained and applied with that style.
    scorer_combinations: every nonempty subset of the configured scorers, each
    recalibrated on In-D validation data.
    label_conditioning: conditioned generator vs one fed a constant class.
    """
    if kind not in ABLATION_KINDS:
        raise ValidationError(f"unknown ablation kind {kind!r}; known: {list(ABLATION_KINDS)}")
    cache = cache or DetectorCache()
    reports = {}

    def add(variant, seed, det, scorers=None):
        if scorers is not None:
            from .scoring import calibrate_thresholds

            sub = calibrate_thresholds(det.cascade.subset(scorers), det.info["calibration_scores"])
            det = replace(det, cascade=sub, info=dict(det.info))
        rep = run_benchmark(det, data.in_d_test, data.ood, name=variant)
        for r in rep.rows:
            r.dataset = f"seed{seed}/{r.dataset}"
        reports.setdefault(variant, MetricsReport(variant)).rows.extend(rep.rows)

    base_kind = "base" if opts.generator_model.get("conditioned", True) else "uncond-base"
    variants = []
    for seed in seeds:
        base = replace(opts, seed=seed)
        if kind == "masking_styles":
            for style in MaskStyle:
                spec = replace(opts.mask, style=style) if opts.mask.style == style else MaskSpec.default(style)
                same = spec == opts.mask and opts.inference_mask in (None, opts.mask)
                key = (base_kind, seed) if same else ("mask", style.value, seed)
                det = _fit(replace(base, mask=spec, inference_mask=None), data, cache, key)
                add(style.value, seed, det)
            variants = [s.value for s in MaskStyle]
        elif kind == "scorer_combinations":
            det = _fit(base, data, cache, (base_kind, seed))
            variants = [_variant_name(s) for s in scorer_subsets(opts.cascade.scorers)]
            for scorers in scorer_subsets(opts.cascade.scorers):
                add(_variant_name(scorers), seed, det, scorers)
        else:
            cond = {**opts.generator_model, "conditioned": True}
            uncond = {**opts.generator_model, "conditioned": False}
            add("conditioned", seed, _fit(replace(base, generator_model=cond), data, cache, ("base", seed)))
            add("unconditioned", seed, _fit(replace(base, generator_model=uncond), data, cache, ("uncond-base", seed)))
            variants = ["conditioned", "unconditioned"]
    return AblationTable(kind, variants, reports)
