"""End-to-end training of encoder, decoder and U-Net discriminator."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .data import ImageSet, endless_batches
from .discriminator import DiscriminatorConfig, LossWeights, UNetDiscriminator, disc_loss, gen_loss
from .errors import NumericError, ValidationError
from .generator import Generator, GeneratorConfig, kld_loss, synthesize
from .masking import MaskSpec
from .seeding import substream, torch_generator, torch_seed

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "loss_g", "loss_kld", "loss_d", "l1", "ssim")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    adam_beta1: float = 0.0
    adam_beta2: float = 0.999
    batch_size: int = 96
    steps: int = 0
    seed: int = 0
    kld_weight: float = 1.0
    mask_spec: MaskSpec = field(default_factory=MaskSpec)
    checkpoint_every: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    gen_steps_per_disc_step: int = 1

    def __post_init__(self):
        if isinstance(self.mask_spec, dict):
            self.mask_spec = MaskSpec.from_dict(self.mask_spec)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if not self.learning_rate >= 0:
            raise ValidationError("learning_rate must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValidationError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.steps < 0 or self.checkpoint_every < 0 or self.gen_steps_per_disc_step < 1:
            raise ValidationError("steps/checkpoint_every must be >= 0, gen_steps_per_disc_step >= 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["mask_spec"] = self.mask_spec.to_dict()
        d["loss_weights"] = self.loss_weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, **defaults) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"train config: unknown fields {sorted(unknown)}")
        try:
            return cls(**{**defaults, **d})
        except TypeError as exc:
            raise ValidationError(f"train config: {exc}") from None


@dataclass
class StepMetrics:
    step: int
    loss_g: float
    loss_kld: float
    loss_d: float
    l1: float
    ssim: float

    def row(self):
        return [self.step, self.loss_g, self.loss_kld, self.loss_d, self.l1, self.ssim]


@dataclass
class GANModels:
    generator: Generator
    discriminator: UNetDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0
    seed: int = 0


def build_models(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, config: TrainConfig) -> GANModels:
    torch.manual_seed(torch_seed(config.seed, "model-init"))
    g = Generator(gen_cfg)
    d = UNetDiscriminator(disc_cfg)
    betas = (config.adam_beta1, config.adam_beta2)
    opt_g = torch.optim.Adam(g.parameters(), lr=config.learning_rate, betas=betas)
    opt_d = torch.optim.Adam(d.parameters(), lr=config.learning_rate, betas=betas)
    return GANModels(g, d, opt_g, opt_d, 0, config.seed)


def _finite_or_raise(step, **losses):
    losses = {k: float(torch.as_tensor(v).detach()) for k, v in losses.items()}
    if not all(np.isfinite(v) for v in losses.values()):
        breakdown = ", ".join(f"{k}={v:.6g}" for k, v in losses.items())
        raise NumericError(f"non-finite loss at step {step}: {breakdown}")


def train_step(models: GANModels, batch: ImageSet, config: TrainConfig, rng: np.random.Generator, noise: torch.Generator | None = None) -> StepMetrics:
    """One generator update followed by one discriminator update on fresh forward passes."""
    if len(batch) == 0:
        raise ValidationError("empty batch")
    from .masking import mask_batch

    g, d = models.generator, models.discriminator
    g.train()
    d.train()
    w = config.loss_weights
    x = torch.from_numpy(batch.pixels)
    y = torch.from_numpy(batch.labels)
    x_m = torch.from_numpy(mask_batch(batch.pixels, config.mask_spec, rng)[0])

    d.requires_grad_(False)
    for _ in range(config.gen_steps_per_disc_step):
        x_synth, code = g(x_m, y, generator=noise)
        parts = {}
        loss_g = gen_loss(d(x_synth, y), x, x_synth, w, parts)
        loss_kld = kld_loss(code)
        _finite_or_raise(models.step, loss_g=loss_g, loss_kld=loss_kld, **parts)
        models.opt_g.zero_grad(set_to_none=True)
        (loss_g + config.kld_weight * loss_kld).backward()
        models.opt_g.step()
    d.requires_grad_(True)

    with torch.no_grad():
        x_synth, _ = g(x_m, y, generator=noise)
    loss_d = disc_loss(d(x, y), d(x_synth, y), w.dec_reduction)
    _finite_or_raise(models.step, loss_d=loss_d)
    models.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    models.opt_d.step()

    metrics = StepMetrics(models.step, float(loss_g.detach()), float(loss_kld.detach()), float(loss_d.detach()), float(parts["l1"]), float(parts["ssim"]))
    models.step += 1
    return metrics


def reconstruction_l1(generator: Generator, dataset: ImageSet, mask_spec: MaskSpec, seed: int) -> float:
    """Mean absolute error of deterministic syntheses under the true labels."""
    pair = synthesize(generator, dataset.pixels, dataset.labels, mask_spec, substream(seed, "eval-mask"), deterministic=True)
    return float(np.abs(pair.x - pair.x_synth).mean())


@dataclass
class TrainResult:
    models: GANModels
    metrics: list
    checkpoints: list


def train(train_set: ImageSet, config: TrainConfig, gen_cfg: GeneratorConfig | None = None, disc_cfg: DiscriminatorConfig | None = None, out_dir=None, callback=None) -> TrainResult:
    """Run ``config.steps`` training steps, logging metrics and writing checkpoints.

    With ``steps == 0`` only the initial checkpoint is written.
    """
    from .checkpoint import save_gan

    k = train_set.num_classes
    gen_cfg = gen_cfg or GeneratorConfig(num_classes=k)
    disc_cfg = disc_cfg or DiscriminatorConfig(num_classes=k)
    models = build_models(gen_cfg, disc_cfg, config)
    mask_rng = substream(config.seed, "train-mask")
    noise = torch_generator(config.seed, "train-noise")
    stream = endless_batches(train_set, config.batch_size, torch_seed(config.seed, "train-data"))
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    checkpoints = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "generator_metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
    history = []
    try:
        if out is not None and config.steps == 0:
            checkpoints.append(save_gan(out / "generator_step0.pt", models, config, final=True))
        for _ in range(config.steps):
            m = train_step(models, next(stream), config, mask_rng, noise)
            history.append(m)
            if writer is not None:
                writer.writerow(m.row())
            if callback is not None:
                callback(m)
            if out is not None and config.checkpoint_every and models.step % config.checkpoint_every == 0 and models.step < config.steps:
                checkpoints.append(save_gan(out / f"generator_step{models.step}.pt", models, config))
        models.generator.trained = True
        models.generator.eval()
        if out is not None and config.steps > 0:
            checkpoints.append(save_gan(out / "generator_final.pt", models, config, final=True))
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(models, history, checkpoints)


def with_mask(config: TrainConfig, spec: MaskSpec) -> TrainConfig:
    return replace(config, mask_spec=spec)
