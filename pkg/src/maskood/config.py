"""Experiment configuration: one YAML file describing data, models, training and cascade.

Relative dataset roots and the output directory are resolved against the
directory holding the config file.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .data import DatasetManifest, ImageSet, Source, load_dataset, split
from .discriminator import DiscriminatorConfig, LossWeights
from .errors import ValidationError
from .generator import GeneratorConfig
from .masking import MaskSpec
from .scoring import CascadeConfig
from .training import TrainConfig

_TOP = {"seed", "output_dir", "deterministic", "data", "mask", "inference_mask", "generator", "classifier", "cb", "cascade"}
# seed and mask come from the top level, never from a train section
_TRAIN_EXCLUDED = {"seed", "mask_spec"}


def _section(d, name, allowed):
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ValidationError(f"{name}: expected a mapping")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ValidationError(f"{name}: unknown fields {sorted(unknown)}")
    return d


def _train(d, name) -> TrainConfig:
    d = _section(d, name, {f for f in TrainConfig.__dataclass_fields__} - _TRAIN_EXCLUDED)
    try:
        return TrainConfig.from_dict(d)
    except ValidationError as exc:
        raise ValidationError(f"{name}: {exc}") from None


def _train_dict(cfg: TrainConfig) -> dict:
    d = cfg.to_dict()
    for k in _TRAIN_EXCLUDED:
        d.pop(k)
    return d


def _parse(name, fn, value):
    try:
        return fn(value)
    except (ValidationError, ValueError, TypeError, KeyError) as exc:
        raise ValidationError(f"{name}: {exc}") from None


def _manifest(d, name) -> DatasetManifest:
    if not isinstance(d, dict):
        raise ValidationError(f"{name}: expected a manifest mapping")
    try:
        return DatasetManifest.from_dict(d)
    except (ValidationError, ValueError, TypeError) as exc:
        raise ValidationError(f"{name}: {exc}") from None


@dataclass
class ExperimentConfig:
    in_d: DatasetManifest
    ood: list = field(default_factory=list)
    external: DatasetManifest | None = None
    seed: int = 0
    output_dir: str = "runs"
    deterministic: bool = True
    mask: MaskSpec = field(default_factory=MaskSpec)
    inference_mask: MaskSpec | None = None
    generator_model: dict = field(default_factory=dict)
    discriminator_model: dict = field(default_factory=dict)
    generator_train: TrainConfig = field(default_factory=TrainConfig)
    classifier_width: int = 16
    classifier_train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3, adam_beta1=0.9, batch_size=64, steps=1000))
    cb_width: int = 16
    cb_train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3, adam_beta1=0.9, batch_size=32, steps=1000))
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    base_dir: str = "."

    def __post_init__(self):
        k = self.in_d.class_count
        # construct once so that bad model fields surface at parse time
        try:
            GeneratorConfig(num_classes=k, **self.generator_model)
            DiscriminatorConfig(num_classes=k, **self.discriminator_model)
        except TypeError as exc:
            raise ValidationError(f"generator: {exc}") from None
        if self.classifier_width < 1 or self.cb_width < 1:
            raise ValidationError("widths must be >= 1")
        names = [self.in_d.name] + [m.name for m in self.ood]
        if len(set(names)) != len(names):
            raise ValidationError("dataset names must be unique")

    # -- (de)serialisation ------------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentConfig":
        d = _section(d, "config", _TOP)
        data = _section(d.get("data"), "data", {"in_d", "ood", "external"})
        if "in_d" not in data:
            raise ValidationError("data.in_d: missing")
        ood = data.get("ood") or []
        if not isinstance(ood, list):
            raise ValidationError("data.ood: expected a list of manifests")
        gen = _section(d.get("generator"), "generator", {"model", "discriminator", "train"})
        clf = _section(d.get("classifier"), "classifier", {"width", "train"})
        cb = _section(d.get("cb"), "cb", {"width", "train"})
        defaults = cls.__dataclass_fields__
        try:
            seed = d.get("seed", 0)
            if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
                raise ValidationError("seed: expected a non-negative integer")
            kwargs = dict(
                in_d=_manifest(data["in_d"], "data.in_d"),
                ood=[_manifest(m, f"data.ood[{i}]") for i, m in enumerate(ood)],
                external=_manifest(data["external"], "data.external") if data.get("external") else None,
                seed=seed,
                output_dir=str(d.get("output_dir", "runs")),
                deterministic=bool(d.get("deterministic", True)),
                mask=_parse("mask", MaskSpec.from_dict, d["mask"]) if d.get("mask") else MaskSpec(),
                inference_mask=_parse("inference_mask", MaskSpec.from_dict, d["inference_mask"]) if d.get("inference_mask") else None,
                generator_model=dict(_section(gen.get("model"), "generator.model", set(GeneratorConfig.__dataclass_fields__) - {"num_classes"})),
                discriminator_model=dict(_section(gen.get("discriminator"), "generator.discriminator", set(DiscriminatorConfig.__dataclass_fields__) - {"num_classes"})),
                generator_train=_train(gen["train"], "generator.train") if "train" in gen else defaults["generator_train"].default_factory(),
                classifier_width=int(clf.get("width", 16)),
                classifier_train=_train(clf["train"], "classifier.train") if "train" in clf else defaults["classifier_train"].default_factory(),
                cb_width=int(cb.get("width", 16)),
                cb_train=_train(cb["train"], "cb.train") if "train" in cb else defaults["cb_train"].default_factory(),
                cascade=_parse("cascade", CascadeConfig.from_dict, d["cascade"]) if d.get("cascade") else CascadeConfig(),
                base_dir=str(base_dir),
            )
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(str(exc)) from None
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "deterministic": self.deterministic,
            "data": {
                "in_d": self.in_d.to_dict(),
                "ood": [m.to_dict() for m in self.ood],
                "external": self.external.to_dict() if self.external else None,
            },
            "mask": self.mask.to_dict(),
            "inference_mask": self.inference_mask.to_dict() if self.inference_mask else None,
            "generator": {"model": dict(self.generator_model), "discriminator": dict(self.discriminator_model), "train": _train_dict(self.generator_train)},
            "classifier": {"width": self.classifier_width, "train": _train_dict(self.classifier_train)},
            "cb": {"width": self.cb_width, "train": _train_dict(self.cb_train)},
            "cascade": self.cascade.to_dict(),
        }

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    # -- paths and data -----------------------------------------------------------------

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_path(self) -> Path:
        return self.resolve(self.output_dir)

    def _resolved(self, m: DatasetManifest) -> DatasetManifest:
        return replace(m, root=str(self.resolve(m.root)))

    def validate_paths(self):
        """Every referenced dataset root must exist."""
        for where, m in [("data.in_d", self.in_d)] + [(f"data.ood[{i}]", m) for i, m in enumerate(self.ood)] + ([("data.external", self.external)] if self.external else []):
            if not self.resolve(m.root).exists():
                raise ValidationError(f"{where}.root: path does not exist: {self.resolve(m.root)}")

    def load_in_d(self):
        """``(train, val, test)`` split of the In-D manifest, seeded by the global seed."""
        full = load_dataset(self._resolved(self.in_d), Source.IN_D_TRAIN)
        return split(full, self.in_d.split, self.seed)

    def load_ood(self) -> dict:
        return {m.name: load_dataset(self._resolved(m), Source.OOD_TEST) for m in self.ood}

    def load_external(self) -> ImageSet | None:
        if self.external is None:
            return None
        return load_dataset(self._resolved(self.external), Source.EXTERNAL_UNLABELED)

    def fit_options(self, seed: int | None = None):
        from .pipeline import FitOptions

        return FitOptions(
            seed=self.seed if seed is None else seed,
            mask=self.mask,
            inference_mask=self.inference_mask,
            generator_model=dict(self.generator_model),
            discriminator_model=dict(self.discriminator_model),
            generator_train=self.generator_train,
            classifier_train=self.classifier_train,
            cb_train=self.cb_train,
            classifier_width=self.classifier_width,
            cb_width=self.cb_width,
            cascade=self.cascade,
            deterministic=self.deterministic,
        )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(raw, base_dir=path.parent)


def parse_config(text: str, base_dir=".") -> ExperimentConfig:
    return ExperimentConfig.from_dict(yaml.safe_load(text), base_dir=base_dir)


def toy_config(data_dir=".", classes: int = 2, count: int = 3000, ood_count: int = 500, generator_steps: int = 2000) -> ExperimentConfig:
    """Desk-scale settings for the synthetic shapes data written by ``gen-toy-data``.

    The In-D file is split 2/3 train, 1/6 calibration, 1/6 test.
    """
    d = Path(data_dir)
    return ExperimentConfig(
        in_d=DatasetManifest("toy", str(d / "toy_ind.mdc"), count, classes, (2 / 3, 1 / 6, 1 / 6)),
        ood=[DatasetManifest("toy-ood", str(d / "toy_ood.mdc"), ood_count, classes, (1.0,))],
        output_dir="runs",
        mask=MaskSpec.default("randomly"),
        generator_model={"latent_dim": 128, "channels": 8},
        discriminator_model={"channels": 8},
        generator_train=TrainConfig(
            learning_rate=2e-4,
            batch_size=16,
            steps=generator_steps,
            kld_weight=1e-3,
            loss_weights=LossWeights(adv_enc=0.05, adv_dec=0.05, dec_reduction="mean"),
        ),
        classifier_width=8,
        classifier_train=TrainConfig(learning_rate=1e-3, adam_beta1=0.9, batch_size=64, steps=300),
        cb_width=8,
        cb_train=TrainConfig(learning_rate=1e-3, adam_beta1=0.9, batch_size=32, steps=400),
    )
