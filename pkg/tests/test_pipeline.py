"""Small end-to-end runs: fitting, benchmarking, ablation drivers, plug-and-play."""
import numpy as np
import pytest
import torch

from maskood.classifier import predict
from maskood.data import split
from maskood.discriminator import LossWeights
from maskood.evaluation import BenchmarkData, DetectorCache, run_ablation, run_benchmark
from maskood.masking import MaskSpec
from maskood.pipeline import FitOptions, fit_detector
from maskood.scoring import CascadeConfig
from maskood.toydata import toy_imageset
from maskood.training import TrainConfig


def _opts(seed=0, **kw):
    base = dict(
        seed=seed,
        mask=MaskSpec.default("randomly"),
        inference_mask=None,
        generator_model={"channels": 4},
        discriminator_model={"channels": 4},
        generator_train=TrainConfig(learning_rate=2e-4, batch_size=8, steps=3, kld_weight=1e-3, loss_weights=LossWeights(dec_reduction="mean")),
        classifier_train=TrainConfig(learning_rate=1e-3, adam_beta1=0.9, batch_size=16, steps=3),
        cb_train=TrainConfig(learning_rate=1e-3, adam_beta1=0.9, batch_size=8, steps=3),
        classifier_width=4,
        cb_width=4,
        cascade=CascadeConfig(),
    )
    base.update(kw)
    return FitOptions(**base)


@pytest.fixture(scope="module")
def data():
    tr, va, te = split(toy_imageset(2, 96, 0), [0.5, 0.25, 0.25], 0)
    return BenchmarkData(tr, va, te, {"toy-ood": toy_imageset(2, 24, 0, ood=True)})


@pytest.fixture(scope="module")
def detector(data):
    return fit_detector(_opts(), data.in_d_train, data.in_d_val)


def test_fit_detector_calibrated(detector, data):
    assert detector.cascade.calibrated
    table = detector.score(data.in_d_val, stream="calibration")
    for name in detector.cascade.scorers:
        assert np.mean(table.scores[name] >= detector.cascade.thresholds[name]) >= 0.95
    assert set(detector.info["timings"]) == {"classifier", "generator", "cb"}


def test_benchmark_report(detector, data):
    rep = run_benchmark(detector, data.in_d_test, data.ood)
    assert [r.dataset for r in rep.rows] == ["toy-ood"]
    assert rep.rows[0].classification_accuracy is not None
    assert rep.std()["auroc"] == 0.0


def test_benchmark_needs_ood(detector, data):
    from maskood.errors import ValidationError

    with pytest.raises(ValidationError):
        run_benchmark(detector, data.in_d_test, {})


def test_plug_and_play_logits_unchanged(detector, data):
    x = data.in_d_test.pixels
    before = predict(detector.classifier, x)[1]
    labels, logits, is_ood = detector.classify(x)
    after = predict(detector.classifier, x)[1]
    assert np.array_equal(before, logits) and np.array_equal(before, after)
    assert is_ood.dtype == bool and len(is_ood) == len(x)


def test_scores_deterministic(detector, data):
    a = detector.score(data.in_d_test, stream="s")
    b = detector.score(data.in_d_test, stream="s")
    assert all(np.array_equal(a.scores[k], b.scores[k]) for k in a.scores)


def test_scorer_combinations_ablation(detector, data):
    cache = DetectorCache()
    cache.detectors[("base", 0)] = detector
    table = run_ablation("scorer_combinations", _opts(), data, seeds=[0], cache=cache)
    assert len(table.variants) == 7 and len(table.summary().rows) == 7
    full = table.reports["cb+ssim+feature"].mean()
    direct = run_benchmark(detector, data.in_d_test, data.ood).mean()
    assert full == direct


def test_masking_styles_ablation_rows(data):
    table = run_ablation("masking_styles", _opts(generator_train=TrainConfig(batch_size=8, steps=1)), data, seeds=[0])
    assert table.variants == ["none", "randomly", "fixed_low", "fixed_high", "patched", "shuffling"]
    assert len(table.summary().rows) == 6


def test_label_conditioning_ablation(data):
    cache = DetectorCache()
    table = run_ablation("label_conditioning", _opts(), data, seeds=[0, 1], cache=cache)
    assert table.variants == ["conditioned", "unconditioned"]
    assert len(table.reports["conditioned"].rows) == 2
    assert not cache.detectors[("uncond-base", 0)].generator.cfg.conditioned
    # classifiers are shared between variants of the same seed
    assert cache.detectors[("uncond-base", 0)].classifier is cache.detectors[("base", 0)].classifier
