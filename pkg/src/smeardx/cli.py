"""Command-line interface.

Exit codes: 0 success, 1 validation/config error, 2 I/O error. Bad flags and
bad config files are the same kind of mistake, so argparse errors also exit 1.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .classify import ClassifierModel, classify_crop, extract_crop, extract_features, get_feature_backend
from .detect import collapse_to_infected, load_model, save_model, train_detector
from .errors import ConfigurationError, SmearError
from .ingest import (
    balanced_subset,
    collect_stage_crops,
    map_taxonomy,
    parse_annotations,
    resolve_image_path,
    stratified_split,
)
from .metrics import classification_report
from .pipeline import PipelineConfig, run_experiment, run_one_stage, run_two_stage
from .synth import SynthSpec, generate_corpus
from .util import derived_seed, load_image, stable_dumps, write_json
from . import __version__


class _Parser(argparse.ArgumentParser):
    # Usage mistakes are config errors (exit 1), not argparse's default exit 2.
    def error(self, message: str):
        raise ConfigurationError(message)


def _load_config(args) -> PipelineConfig:
    if not args.config:
        raise ConfigurationError("this subcommand needs --config PATH")
    config = PipelineConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    if getattr(args, "out", None) is not None:
        config = replace(config, output_dir=str(args.out))
    return config


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, help="pipeline config JSON")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument("--out", type=Path, help="override the config output directory")


def _cmd_synth(args) -> int:
    spec = SynthSpec.default(
        height=args.height,
        width=args.width,
        noise=args.noise,
        min_gap=args.min_gap,
    )
    out = generate_corpus(
        args.slides, spec, seed=args.seed if args.seed is not None else 0,
        output_dir=args.out if args.out is not None else "synth_corpus",
    )
    print(f"wrote {args.slides} slides to {out}")
    return 0


def _cmd_ingest(args) -> int:
    path = args.annotations
    if path is None:
        path = _load_config(args).annotations
    records = parse_annotations(path)
    cells = sum(len(r.annotations) for r in records)
    by_category: dict[str, int] = {}
    for r in records:
        for ann in r.annotations:
            by_category[ann.category] = by_category.get(ann.category, 0) + 1
    infected = sum(
        n for cat, n in by_category.items() if map_taxonomy(cat)[0] == "infected"
    )
    print(f"{len(records)} slides, {cells} annotated cells ({infected} infected)")
    for cat in sorted(by_category):
        print(f"  {cat}: {by_category[cat]}")
    return 0


def _cmd_train_detect(args) -> int:
    config = _load_config(args)
    records = parse_annotations(config.annotations)
    det_cfg = config.detector
    model = train_detector(
        collapse_to_infected(records),
        det_cfg,
        backend=config.detector_backend,
        images_root=config.resolved_images_root(),
    )
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"detector_{det_cfg.class_mode}.json"
    save_model(model, path)
    print(f"saved {model.backend_id} detector ({det_cfg.class_mode}) to {path}")
    print(f"fingerprint: {model.fingerprint}")
    return 0


def _cmd_train_classify(args) -> int:
    config = _load_config(args)
    records = parse_annotations(config.annotations)
    crops = collect_stage_crops(records)
    balanced = balanced_subset(
        crops, config.balance_cap, seed=derived_seed(config.seed, "balance")
    )
    train_ds, eval_ds = stratified_split(
        balanced, config.train_fraction, seed=derived_seed(config.seed, "crop_split")
    )
    backend = get_feature_backend(config.feature_backend, **dict(config.feature_options))
    root = config.resolved_images_root()

    def embed(items):
        import numpy as np

        features = np.zeros((len(items), 2048))
        labels = []
        cache: dict[str, object] = {}
        for i, ref in enumerate(items):
            if ref.image_id not in cache:
                cache[ref.image_id] = load_image(resolve_image_path(ref.image_path, root))
            crop = extract_crop(cache[ref.image_id], ref.bbox, config.crop_target, ref.image_id)
            features[i] = extract_features(crop, backend)
            labels.append(ref.stage)
        return features, labels

    from .classify import train_classifier

    x_train, y_train = embed(train_ds.items)
    model = train_classifier(x_train, y_train, config.classifier)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "classifier.npz")
    write_json(
        out / "dataset_sidecar.json",
        {"balanced": balanced.sidecar(), "train": train_ds.sidecar(), "eval": eval_ds.sidecar()},
    )
    x_eval, y_eval = embed(eval_ds.items)
    preds = [classify_crop(model, x).predicted for x in x_eval]
    report = classification_report(y_eval, preds)
    write_json(out / "classification_report.json", report.to_json_dict())
    (out / "classification_report.txt").write_text(report.to_text())
    print(f"saved classifier to {out / 'classifier.npz'}")
    print(f"held-out accuracy: {report.accuracy:.3f} ({report.total_support} crops)")
    return 0


def _cmd_predict(args) -> int:
    config = _load_config(args)
    det_model = load_model(args.detector)
    cls_model = ClassifierModel.load(args.classifier) if args.classifier else None
    reports = []
    for image_path in args.images:
        image = load_image(image_path)
        image_id = Path(image_path).stem
        if det_model.class_mode == "multiclass_stage":
            report = run_one_stage(image, det_model, config, image_id=image_id)
        else:
            if cls_model is None:
                raise ConfigurationError(
                    "a binary_infected detector needs --classifier for stage labels"
                )
            report = run_two_stage(image, det_model, cls_model, config, image_id=image_id)
        reports.append(report.to_dict())
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "slide_reports.json", reports)
        print(f"wrote {len(reports)} report(s) to {out / 'slide_reports.json'}")
    else:
        print(stable_dumps(reports))
    return 0


def _print_experiment(summary: dict) -> None:
    print(f"experiment {summary['config_fingerprint']} [{summary['mode']}]: {summary['status']}")
    for flow, metrics in summary["metrics"].items():
        line = f"  {flow}: mAP={metrics['map']:.3f} recall={metrics['recall']:.3f}"
        if "classification_accuracy" in metrics:
            line += f" stage-accuracy={metrics['classification_accuracy']:.3f}"
        print(line)


def _cmd_evaluate(args) -> int:
    config = _load_config(args)
    summary = run_experiment(config, mode=args.mode)
    _print_experiment(summary)
    return 0


def _cmd_compare(args) -> int:
    config = _load_config(args)
    summary = run_experiment(config, mode="compare")
    _print_experiment(summary)
    table = Path(config.output_dir) / "compare.txt"
    print(table.read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smeardx", description="blood-smear parasite detection and staging")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub = subs.add_parser("synth", help="generate a synthetic slide corpus")
    _add_common(sub)
    sub.add_argument("--slides", type=int, default=200)
    sub.add_argument("--height", type=int, default=256)
    sub.add_argument("--width", type=int, default=256)
    sub.add_argument("--noise", type=int, default=6)
    sub.add_argument("--min-gap", type=int, default=4)
    sub.set_defaults(func=_cmd_synth)

    sub = subs.add_parser("ingest", help="validate and summarize an annotations file")
    _add_common(sub)
    sub.add_argument("annotations", nargs="?", help="annotations JSON (or use --config)")
    sub.set_defaults(func=_cmd_ingest)

    sub = subs.add_parser("train-detect", help="train the Layer-1 detector")
    _add_common(sub)
    sub.set_defaults(func=_cmd_train_detect)

    sub = subs.add_parser("train-classify", help="train the Layer-2 stage classifier")
    _add_common(sub)
    sub.set_defaults(func=_cmd_train_classify)

    sub = subs.add_parser("predict", help="run detection + staging on images")
    _add_common(sub)
    sub.add_argument("--detector", type=Path, required=True, help="saved detector model")
    sub.add_argument("--classifier", type=Path, help="saved classifier (two-stage mode)")
    sub.add_argument("images", nargs="+", help="image files")
    sub.set_defaults(func=_cmd_predict)

    sub = subs.add_parser("evaluate", help="run a full train/evaluate experiment")
    _add_common(sub)
    sub.add_argument(
        "--mode", choices=("two_stage", "one_stage"), default="two_stage"
    )
    sub.set_defaults(func=_cmd_evaluate)

    sub = subs.add_parser("compare", help="two-stage vs one-stage on the same split")
    _add_common(sub)
    sub.set_defaults(func=_cmd_compare)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SmearError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
