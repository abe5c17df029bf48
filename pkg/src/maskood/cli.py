"""Command-line entry point.

Exit codes: 0 success, 2 config/usage error, 3 runtime/model error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .errors import DataError, NumericError, StateError, ValidationError

log = logging.getLogger("maskood")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _load(args):
    from .config import load_config

    if not args.config:
        raise UsageError("--config is required")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=str(Path(args.out).resolve()))
    if args.deterministic:
        cfg = replace(cfg, deterministic=True)
    cfg.validate_paths()
    _setup_determinism(cfg.deterministic)
    return cfg


def _setup_determinism(enabled):
    from .seeding import set_deterministic

    set_deterministic(enabled)


def _out(cfg) -> Path:
    out = cfg.out_path
    out.mkdir(parents=True, exist_ok=True)
    return out


def _classifier(out: Path):
    from .checkpoint import load_classifier

    return load_classifier(out / "classifier.pt")


def _generator(out: Path):
    from .checkpoint import load_gan

    g, _, meta = load_gan(out / "generator_final.pt")
    return g


def _cascade_path(out: Path) -> Path:
    return out / "cascade.yaml"


def _detector(cfg, out: Path, calibrate_if_missing: bool = True):
    from .checkpoint import load_cb
    from .pipeline import Detector
    from .scoring import CascadeConfig

    cb = load_cb(out / "cb.pt") if any(s in ("cb", "feature") for s in cfg.cascade.scorers) else None
    det = Detector(_classifier(out), _generator(out), cb, cfg.cascade, cfg.inference_mask or cfg.mask, cfg.seed, cfg.deterministic)
    path = _cascade_path(out)
    if path.exists():
        saved = CascadeConfig.from_dict(yaml.safe_load(path.read_text()))
        if saved.scorers != cfg.cascade.scorers:
            raise StateError(f"{path} was calibrated for scorers {saved.scorers}, config lists {cfg.cascade.scorers}")
        det.cascade = saved
    elif calibrate_if_missing:
        log.info("no saved thresholds, calibrating on In-D validation data")
        _, val, _ = cfg.load_in_d()
        det.calibrate(val)
    return det


# -- commands -----------------------------------------------------------------------


def cmd_gen_toy_data(args):
    from .config import toy_config
    from .toydata import write_toy_dataset

    if not args.out:
        raise UsageError("gen-toy-data needs --out")
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    ood_count = args.ood_count if args.ood_count is not None else max(1, args.count // 4)
    ind, ood = write_toy_dataset(out, args.classes, args.count, seed, ood_count)
    cfg = replace(toy_config(".", args.classes, args.count, ood_count), seed=seed)
    cfg.save(out / "config.yaml")
    print(f"wrote {ind}, {ood} and {out / 'config.yaml'}")


def cmd_train_classifier(args):
    from .checkpoint import save_classifier
    from .classifier import accuracy, train_classifier

    cfg = _load(args)
    out = _out(cfg)
    train_set, val, _ = cfg.load_in_d()
    model = train_classifier(train_set, replace(cfg.classifier_train, seed=cfg.seed), cfg.classifier_width)
    path = save_classifier(out / "classifier.pt", model, {"seed": cfg.seed})
    acc = accuracy(model, val) if len(val) else float("nan")
    print(f"classifier saved to {path}; validation accuracy {acc:.4f}")


def cmd_train_generator(args):
    from .discriminator import DiscriminatorConfig
    from .generator import GeneratorConfig
    from .training import train

    cfg = _load(args)
    out = _out(cfg)
    train_set, _, _ = cfg.load_in_d()
    k = train_set.num_classes
    tcfg = replace(cfg.generator_train, seed=cfg.seed, mask_spec=cfg.mask)
    every = max(1, tcfg.steps // 10) if tcfg.steps else 1
    result = train(
        train_set,
        tcfg,
        GeneratorConfig(num_classes=k, **cfg.generator_model),
        DiscriminatorConfig(num_classes=k, **cfg.discriminator_model),
        out,
        callback=lambda m: log.info("step %d loss_g %.4f loss_d %.4f l1 %.4f", m.step, m.loss_g, m.loss_d, m.l1) if m.step % every == 0 else None,
    )
    if tcfg.steps == 0:
        # an untrained generator is still written for inspection, but downstream
        # commands look for the final checkpoint and will refuse to use it
        print(f"steps=0: wrote initial checkpoint {result.checkpoints[-1]}")
    else:
        print(f"generator saved to {result.checkpoints[-1]}; metrics in {out / 'generator_metrics.csv'}")


def cmd_train_cb(args):
    from .checkpoint import save_cb
    from .data import pseudo_label
    from .scoring import train_binary_classifier

    cfg = _load(args)
    out = _out(cfg)
    generator = _generator(out)
    train_set, _, _ = cfg.load_in_d()
    external = cfg.load_external()
    if external is not None and len(external):
        external = pseudo_label(_classifier(out), external)
        log.info("pseudo-labelled %d external images from %s", len(external), cfg.external.name)
    cb = train_binary_classifier(generator, train_set, replace(cfg.cb_train, seed=cfg.seed), external, cfg.mask, cfg.cb_width)
    path = save_cb(out / "cb.pt", cb, {"seed": cfg.seed, "external": cfg.external.name if cfg.external else None})
    print(f"binary classifier saved to {path}")


def cmd_calibrate(args):
    cfg = _load(args)
    out = _out(cfg)
    det = _detector(cfg, out, calibrate_if_missing=False)
    _, val, _ = cfg.load_in_d()
    cascade = det.calibrate(val, mode=args.mode)
    path = _cascade_path(out)
    path.write_text(yaml.safe_dump(cascade.to_dict(), sort_keys=False))
    print(f"thresholds written to {path}")
    for name in cascade.scorers:
        print(f"  {name}: threshold {cascade.thresholds[name]:.6g}")


def _read_input(path: Path, num_classes: int):
    from .data import DatasetManifest, ImageSet, Source, load_dataset, read_records

    if not path.exists():
        raise ValidationError(f"input does not exist: {path}")
    if path.is_dir():
        count = sum(1 for _ in path.rglob("*.png"))
        classes = sum(1 for p in path.iterdir() if p.is_dir())
        m = DatasetManifest(path.name, str(path), max(count, 1), max(classes, 1))
        images = load_dataset(m, Source.EXTERNAL_UNLABELED, strict=False)
    else:
        raw, _, k = read_records(path)
        images = load_dataset(DatasetManifest(path.stem, str(path), max(len(raw), 1), k), Source.EXTERNAL_UNLABELED)
    return ImageSet(images.pixels, images.labels, images.source, num_classes, images.name, images.ids)


def cmd_detect(args):
    cfg = _load(args)
    out = _out(cfg)
    if not args.input:
        raise UsageError("detect needs --input")
    det = _detector(cfg, out)
    images = _read_input(Path(args.input), cfg.in_d.class_count)
    table = det.score(images, stream="detect")
    is_ood, flagged = det.decide(table)
    path = Path(args.output) if args.output else out / "decisions.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "predicted_label"] + list(det.cascade.scorers) + ["decision", "flagged_by"])
        for i in range(len(table)):
            w.writerow(
                [table.ids[i], int(table.predicted[i])]
                + [repr(float(table.scores[s][i])) for s in det.cascade.scorers]
                + ["OOD" if is_ood[i] else "IN_D", flagged[i] or ""]
            )
    print(f"{int(is_ood.sum())}/{len(table)} flagged OOD; decisions in {path}")


def cmd_evaluate(args):
    from .evaluation import evaluate_score_file, run_benchmark, score_records, write_score_file

    if args.scores:
        report = evaluate_score_file(args.scores)
        out = Path(args.out) if args.out else Path(args.scores).parent
        paths = report.write(out, f"report-{report.name}")
        print(report.table(), end="")
        print(f"report written to {paths[0]}")
        return
    cfg = _load(args)
    out = _out(cfg)
    if not cfg.ood:
        raise ValidationError("data.ood: evaluate needs at least one OOD manifest")
    det = _detector(cfg, out)
    _, _, test = cfg.load_in_d()
    ood = cfg.load_ood()
    report = run_benchmark(det, test, ood, scorer=args.scorer, name="benchmark")
    paths = report.write(out, "report")
    tables = {name: det.score(ds, stream=f"ood:{name}") for name, ds in ood.items()}
    write_score_file(out / "scores.csv", score_records(det, det.score(test, stream="in_d_test"), tables))
    print(report.table(), end="")
    print(f"report written to {paths[0]} and {paths[1]}")


def cmd_ablate(args):
    from .data import ImageSet
    from .evaluation import ABLATION_KINDS, BenchmarkData, run_ablation

    if args.kind not in ABLATION_KINDS:
        raise UsageError(f"unknown ablation kind {args.kind!r}; choose from {', '.join(ABLATION_KINDS)}")
    cfg = _load(args)
    out = _out(cfg)
    if not cfg.ood:
        raise ValidationError("data.ood: ablate needs at least one OOD manifest")
    train_set, val, test = cfg.load_in_d()
    data = BenchmarkData(train_set, val, test, cfg.load_ood(), cfg.load_external())
    seeds = args.seeds if args.seeds else [cfg.seed]
    table = run_ablation(args.kind, cfg.fit_options(), data, seeds)
    summary = table.summary()
    paths = summary.write(out, f"ablation-{args.kind}")
    for v in table.variants:
        table.reports[v].write(out / f"ablation-{args.kind}", v.replace("+", "_"))
    print(summary.table(), end="")
    print(f"ablation written to {paths[0]}")


COMMANDS = {
    "gen-toy-data": cmd_gen_toy_data,
    "train-generator": cmd_train_generator,
    "train-classifier": cmd_train_classifier,
    "train-cb": cmd_train_cb,
    "calibrate": cmd_calibrate,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (YAML)")
    common.add_argument("--seed", type=int, default=None, help="override the global seed")
    common.add_argument("--out", default=None, help="override the output directory")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="maskood", description="Masked conditional-synthesis OOD detection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy-data", parents=[common], help="write the synthetic shapes datasets and a matching config")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--count", type=int, default=3000)
    p.add_argument("--ood-count", type=int, default=None)

    sub.add_parser("train-generator", parents=[common], help="train encoder, decoder and discriminator")
    sub.add_parser("train-classifier", parents=[common], help="train the K-way classifier")
    sub.add_parser("train-cb", parents=[common], help="train the conditional binary classifier")

    p = sub.add_parser("calibrate", parents=[common], help="set cascade thresholds on In-D validation data")
    p.add_argument("--mode", choices=["per_scorer", "joint"], default=None)

    p = sub.add_parser("detect", parents=[common], help="per-sample decisions for a record file or PNG tree")
    p.add_argument("--input", required=False)
    p.add_argument("--output", default=None, help="decisions CSV (default: <out>/decisions.csv)")

    p = sub.add_parser("evaluate", parents=[common], help="benchmark report on the configured OOD sets")
    p.add_argument("--scorer", default=None, help="report one scorer instead of the fused cascade")
    p.add_argument("--scores", default=None, help="evaluate an external score CSV instead")

    p = sub.add_parser("ablate", parents=[common], help="masking / scorer / conditioning ablations")
    p.add_argument("--kind", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StateError, NumericError, DataError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
