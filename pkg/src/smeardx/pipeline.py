"""Experiment orchestration: two-stage flow, one-stage baseline, comparison.

The two-stage flow composes detect -> crop -> embed -> classify per image and
reports per-slide stage counts. The one-stage baseline asks a multiclass
detector for stage labels directly. run_experiment drives either (or both,
for a side-by-side comparison) from a single declarative config: ingest,
slide split, training, evaluation, and artifact writing, all seeded.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .classify import (
    DEFAULT_CROP_SIZE,
    FEATURE_DIM,
    ClassifierModel,
    ClassifierTrainConfig,
    classify_crop,
    extract_crop,
    extract_features,
    get_feature_backend,
    train_classifier,
)
from .detect import (
    DetectorConfig,
    DetectorModel,
    collapse_to_infected,
    detect,
    get_detector_backend,
    save_model,
    train_detector,
)
from .errors import ConfigurationError, SmearError, ValidationError
from .ingest import (
    INFECTED,
    STAGE_CLASSES,
    BoundingBox,
    SlideRecord,
    collect_stage_crops,
    balanced_subset,
    map_taxonomy,
    parse_annotations,
    resolve_image_path,
    stratified_split,
)
from .metrics import classification_report, evaluate_detections, iou
from .util import derived_seed, fingerprint, load_image, read_json, write_json

EXPERIMENT_MODES = ("two_stage", "one_stage", "compare")
STAGE_SOURCES = ("classifier", "detector")

# Matching threshold used by every evaluation artifact (mAP@0.5).
EVAL_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class PipelineConfig:
    """Single declarative recipe for an experiment run.

    images_root defaults to the directory containing the annotations file,
    which matches the synthetic corpus layout. Unknown keys in a config file
    are errors; silent key typos are how reproducibility dies.
    """

    annotations: str
    output_dir: str
    images_root: str = ""
    detector_backend: str = "blob"
    detector_options: Mapping[str, object] = field(default_factory=dict)
    feature_backend: str = "patch_stats"
    feature_options: Mapping[str, object] = field(default_factory=dict)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    classifier: ClassifierTrainConfig = field(default_factory=ClassifierTrainConfig)
    crop_target: int = DEFAULT_CROP_SIZE
    balance_cap: int = 140
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.annotations:
            raise ConfigurationError("config needs an 'annotations' path")
        if not self.output_dir:
            raise ConfigurationError("config needs an 'output_dir' path")
        if self.balance_cap <= 0:
            raise ValidationError(f"balance_cap must be positive, got {self.balance_cap}")
        if not (0.0 < self.train_fraction < 1.0):
            raise ValidationError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}"
            )
        if self.crop_target <= 0:
            raise ValidationError(f"crop_target must be positive, got {self.crop_target}")

    def resolved_images_root(self) -> Path:
        if self.images_root:
            return Path(self.images_root)
        return Path(self.annotations).parent

    def to_dict(self) -> dict:
        return {
            "annotations": self.annotations,
            "output_dir": self.output_dir,
            "images_root": self.images_root,
            "detector_backend": self.detector_backend,
            "detector_options": dict(self.detector_options),
            "feature_backend": self.feature_backend,
            "feature_options": dict(self.feature_options),
            "detector": self.detector.to_dict(),
            "classifier": self.classifier.to_dict(),
            "crop_target": self.crop_target,
            "balance_cap": self.balance_cap,
            "train_fraction": self.train_fraction,
            "seed": self.seed,
        }

    def fingerprint(self) -> str:
        # output_dir is where results land, not what they are; excluding it
        # keeps reruns into different directories byte-identical.
        payload = self.to_dict()
        payload.pop("output_dir")
        return fingerprint(payload)

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        kwargs = dict(data)
        if "detector" in kwargs:
            kwargs["detector"] = _sub_config(DetectorConfig, kwargs["detector"], "detector")
        if "classifier" in kwargs:
            kwargs["classifier"] = _sub_config(
                ClassifierTrainConfig, kwargs["classifier"], "classifier"
            )
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigurationError(f"bad config: {exc}") from exc

    @classmethod
    def from_file(cls, path: Path | str) -> "PipelineConfig":
        data = read_json(path)
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)


def _sub_config(cls_, data, context: str):
    if isinstance(data, cls_):
        return data
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"config section '{context}' must be an object")
    known = {f.name for f in dataclasses.fields(cls_)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"config section '{context}': unknown keys {unknown}")
    return cls_(**data)


@dataclass(frozen=True)
class DetectionEntry:
    """One detected cell in a slide report, with stage provenance."""

    bbox: BoundingBox
    detector_score: float
    stage: str
    stage_probabilities: Optional[tuple[float, ...]]
    stage_source: str

    def __post_init__(self) -> None:
        if self.stage not in STAGE_CLASSES:
            raise ValidationError(f"not a stage label: {self.stage!r}")
        if self.stage_source not in STAGE_SOURCES:
            raise ValidationError(f"unknown stage source: {self.stage_source!r}")
        if self.stage_probabilities is not None and len(self.stage_probabilities) != len(
            STAGE_CLASSES
        ):
            raise ValidationError("stage_probabilities must have one entry per stage")

    def to_dict(self) -> dict:
        return {
            "bbox": self.bbox.to_dict(),
            "detector_score": self.detector_score,
            "stage": self.stage,
            "stage_probabilities": (
                list(self.stage_probabilities)
                if self.stage_probabilities is not None
                else None
            ),
            "stage_source": self.stage_source,
        }


@dataclass(frozen=True)
class SlideReport:
    """Per-slide result: every kept detection plus stage tallies.

    Crops the pipeline could not process are listed in failures and excluded
    from the count, so stage counts always sum to infected_cell_count.
    """

    image_id: str
    entries: tuple[DetectionEntry, ...]
    failures: tuple[str, ...]
    config_fingerprint: str

    @property
    def infected_cell_count(self) -> int:
        return len(self.entries)

    @property
    def stage_counts(self) -> dict[str, int]:
        counts = {stage: 0 for stage in STAGE_CLASSES}
        for entry in self.entries:
            counts[entry.stage] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "infected_cell_count": self.infected_cell_count,
            "stage_counts": self.stage_counts,
            "entries": [entry.to_dict() for entry in self.entries],
            "failures": list(self.failures),
            "config_fingerprint": self.config_fingerprint,
        }


def run_two_stage(
    image: np.ndarray,
    det_model: DetectorModel,
    cls_model: ClassifierModel,
    config: PipelineConfig,
    image_id: str = "",
) -> SlideReport:
    """Detect infected cells, then stage each crop with the Layer-2 classifier.

    Stage labels in the report come exclusively from the classifier. A crop
    that fails extraction or embedding becomes a failure note, not an abort.
    """
    if det_model.class_mode != "binary_infected":
        raise ConfigurationError(
            f"two-stage flow needs a binary_infected detector, got {det_model.class_mode!r}"
        )
    if tuple(cls_model.classes) != STAGE_CLASSES:
        raise ConfigurationError(
            f"classifier must predict the four stages, got {cls_model.classes!r}"
        )
    det_cfg = replace(config.detector, class_mode=det_model.class_mode)
    backend = get_feature_backend(config.feature_backend, **dict(config.feature_options))
    entries: list[DetectionEntry] = []
    failures: list[str] = []
    for d in detect(det_model, image, det_cfg):
        try:
            crop = extract_crop(image, d.bbox, config.crop_target, image_id=image_id)
            features = extract_features(crop, backend)
            pred = classify_crop(cls_model, features)
        except ValidationError as exc:
            failures.append(f"bbox {d.bbox.to_dict()}: {exc}")
            continue
        entries.append(
            DetectionEntry(
                bbox=d.bbox,
                detector_score=d.score,
                stage=pred.predicted,
                stage_probabilities=pred.probabilities,
                stage_source="classifier",
            )
        )
    return SlideReport(
        image_id=image_id,
        entries=tuple(entries),
        failures=tuple(failures),
        config_fingerprint=config.fingerprint(),
    )


def run_one_stage(
    image: np.ndarray,
    det_model: DetectorModel,
    config: PipelineConfig,
    image_id: str = "",
) -> SlideReport:
    """Baseline: one multiclass detector emits stage labels directly."""
    if det_model.class_mode != "multiclass_stage":
        raise ConfigurationError(
            f"one-stage flow needs a multiclass_stage detector, got {det_model.class_mode!r}"
        )
    det_cfg = replace(config.detector, class_mode=det_model.class_mode)
    entries: list[DetectionEntry] = []
    failures: list[str] = []
    for d in detect(det_model, image, det_cfg):
        if d.label not in STAGE_CLASSES:
            failures.append(f"bbox {d.bbox.to_dict()}: non-stage label {d.label!r}")
            continue
        entries.append(
            DetectionEntry(
                bbox=d.bbox,
                detector_score=d.score,
                stage=d.label,
                stage_probabilities=None,
                stage_source="detector",
            )
        )
    return SlideReport(
        image_id=image_id,
        entries=tuple(entries),
        failures=tuple(failures),
        config_fingerprint=config.fingerprint(),
    )


class _ImageStore:
    """Lazy per-image cache so each slide file is decoded at most once."""

    def __init__(self, records: Sequence[SlideRecord], root: Path) -> None:
        self._paths = {rec.image_id: resolve_image_path(rec.image_path, root) for rec in records}
        self._cache: dict[str, np.ndarray] = {}

    def get(self, image_id: str) -> np.ndarray:
        if image_id not in self._cache:
            self._cache[image_id] = load_image(self._paths[image_id])
        return self._cache[image_id]


def _crop_features(items, store: _ImageStore, backend, crop_target: int):
    features = np.zeros((len(items), FEATURE_DIM))
    labels: list[str] = []
    for i, ref in enumerate(items):
        crop = extract_crop(store.get(ref.image_id), ref.bbox, crop_target, ref.image_id)
        features[i] = extract_features(crop, backend)
        labels.append(ref.stage)
    return features, labels


def _split_slides(
    records: Sequence[SlideRecord], train_fraction: float, seed: int
) -> tuple[list[SlideRecord], list[SlideRecord]]:
    """Slide-level train/eval split, seeded, at least one slide on each side."""
    if len(records) < 2:
        raise ValidationError("need at least 2 slides to split into train and eval")
    ordered = sorted(records, key=lambda r: r.image_id)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ordered))
    k = math.floor(train_fraction * len(ordered) + 1e-9)
    k = max(1, min(len(ordered) - 1, k))
    train = [ordered[i] for i in sorted(perm[:k])]
    evals = [ordered[i] for i in sorted(perm[k:])]
    return train, evals


def _stage_gts(record: SlideRecord) -> list[tuple[BoundingBox, str]]:
    gts = []
    for ann in record.annotations:
        _, stage = map_taxonomy(ann.category)
        if stage is not None:
            gts.append((ann.bbox, stage))
    return gts


def _e2e_stage_accuracy(
    reports: Sequence[SlideReport], records: Sequence[SlideRecord]
) -> dict:
    """Match report entries to ground-truth stage boxes and score the labels.

    Greedy per entry: an entry claims the unmatched ground truth it overlaps
    most (IoU >= 0.5). Unmatched entries and unmatched truths both count
    against accuracy only via the matched fraction reported alongside.
    """
    by_id = {rec.image_id: rec for rec in records}
    matched = 0
    correct = 0
    total_entries = 0
    for report in reports:
        gts = _stage_gts(by_id[report.image_id])
        taken = [False] * len(gts)
        total_entries += len(report.entries)
        for entry in report.entries:
            best, best_iou = -1, 0.0
            for k, (box, _stage) in enumerate(gts):
                if taken[k]:
                    continue
                v = iou(entry.bbox, box)
                if v > best_iou:
                    best, best_iou = k, v
            if best >= 0 and best_iou >= EVAL_IOU_THRESHOLD:
                taken[best] = True
                matched += 1
                if entry.stage == gts[best][1]:
                    correct += 1
    return {
        "entries": total_entries,
        "matched": matched,
        "correct": correct,
        "stage_accuracy": (correct / matched) if matched else None,
    }


def _format_compare_table(rows: Sequence[Mapping[str, object]]) -> str:
    lines = [f"{'Mode':<12}{'mAP@0.50':>10}{'Recall':>10}"]
    for row in rows:
        lines.append(f"{row['mode']:<12}{row['map']:>10.3f}{row['recall']:>10.3f}")
    return "\n".join(lines) + "\n"


def run_experiment(config: PipelineConfig, mode: str = "two_stage") -> dict:
    """Drive ingest -> split -> train -> evaluate and write all artifacts.

    Artifacts carry the config fingerprint and derived seeds; reruns with the
    same config and seeds produce byte-identical JSON. A failure in any stage
    is re-raised with the stage name after flagging the partial summary as
    incomplete.
    """
    if mode not in EXPERIMENT_MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {EXPERIMENT_MODES}")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(exist_ok=True)

    seeds = {
        "root": config.seed,
        "slide_split": derived_seed(config.seed, "slide_split"),
        "balance": derived_seed(config.seed, "balance"),
        "crop_split": derived_seed(config.seed, "crop_split"),
        "detector": config.detector.seed,
        "classifier": config.classifier.seed,
    }
    summary: dict = {
        "mode": mode,
        "config": {k: v for k, v in config.to_dict().items() if k != "output_dir"},
        "config_fingerprint": config.fingerprint(),
        "seeds": seeds,
        "status": "incomplete",
        "artifacts": {},
        "metrics": {},
    }
    stage = "setup"
    try:
        stage = "ingest"
        annotations = Path(config.annotations)
        if not annotations.exists():
            raise ValidationError(f"annotations file not found: {annotations}")
        images_root = config.resolved_images_root()
        if not images_root.exists():
            raise ValidationError(f"images root not found: {images_root}")
        records = parse_annotations(annotations)

        stage = "split"
        train_records, eval_records = _split_slides(
            records, config.train_fraction, seeds["slide_split"]
        )
        summary["split"] = {
            "n_train": len(train_records),
            "n_eval": len(eval_records),
            "train_ids": [r.image_id for r in train_records],
            "eval_ids": [r.image_id for r in eval_records],
        }
        eval_store = _ImageStore(eval_records, images_root)
        detector_backend = get_detector_backend(
            config.detector_backend, **dict(config.detector_options)
        )

        if mode in ("two_stage", "compare"):
            stage = "train-detect"
            det_cfg = replace(config.detector, class_mode="binary_infected")
            det_model = train_detector(
                collapse_to_infected(train_records),
                det_cfg,
                backend=detector_backend,
                images_root=images_root,
            )
            save_model(det_model, out / "models" / "detector_two_stage.json")
            summary["artifacts"]["detector_two_stage"] = "models/detector_two_stage.json"

            stage = "train-classify"
            crops = collect_stage_crops(train_records)
            balanced = balanced_subset(crops, config.balance_cap, seed=seeds["balance"])
            train_ds, eval_ds = stratified_split(
                balanced, config.train_fraction, seed=seeds["crop_split"]
            )
            write_json(
                out / "dataset_sidecar.json",
                {
                    "config_fingerprint": config.fingerprint(),
                    "balanced": balanced.sidecar(),
                    "train": train_ds.sidecar(),
                    "eval": eval_ds.sidecar(),
                },
            )
            summary["artifacts"]["dataset_sidecar"] = "dataset_sidecar.json"
            train_store = _ImageStore(train_records, images_root)
            feature_backend = get_feature_backend(
                config.feature_backend, **dict(config.feature_options)
            )
            x_train, y_train = _crop_features(
                train_ds.items, train_store, feature_backend, config.crop_target
            )
            cls_model = train_classifier(x_train, y_train, config.classifier)
            cls_model.save(out / "models" / "classifier.npz")
            summary["artifacts"]["classifier"] = "models/classifier.npz"

            stage = "evaluate-classifier"
            x_eval, y_eval = _crop_features(
                eval_ds.items, train_store, feature_backend, config.crop_target
            )
            preds = [classify_crop(cls_model, x).predicted for x in x_eval]
            report = classification_report(y_eval, preds)
            write_json(out / "classification_report.json", report.to_json_dict())
            (out / "classification_report.txt").write_text(report.to_text())
            summary["artifacts"]["classification_report"] = "classification_report.json"

            stage = "evaluate-detection"
            dets_by_image = {}
            gts_by_image = {}
            for rec in eval_records:
                image = eval_store.get(rec.image_id)
                dets_by_image[rec.image_id] = detect(det_model, image, det_cfg)
                gts_by_image[rec.image_id] = [
                    (ann.bbox, INFECTED)
                    for ann in rec.annotations
                    if map_taxonomy(ann.category)[0] == INFECTED
                ]
            det_eval = evaluate_detections(
                dets_by_image, gts_by_image, classes=(INFECTED,),
                iou_threshold=EVAL_IOU_THRESHOLD,
            )
            write_json(out / "detection_eval_two_stage.json", det_eval.to_json_dict())
            summary["artifacts"]["detection_eval_two_stage"] = "detection_eval_two_stage.json"

            stage = "slide-reports"
            reports = [
                run_two_stage(
                    eval_store.get(rec.image_id), det_model, cls_model, config,
                    image_id=rec.image_id,
                )
                for rec in eval_records
            ]
            write_json(
                out / "slide_reports_two_stage.json", [r.to_dict() for r in reports]
            )
            summary["artifacts"]["slide_reports_two_stage"] = "slide_reports_two_stage.json"
            summary["metrics"]["two_stage"] = {
                "map": det_eval.map,
                "recall": det_eval.recall,
                "classification_accuracy": report.accuracy,
                "e2e": _e2e_stage_accuracy(reports, eval_records),
            }

        if mode in ("one_stage", "compare"):
            stage = "train-detect-one-stage"
            det_cfg_1 = replace(config.detector, class_mode="multiclass_stage")
            det_model_1 = train_detector(
                collapse_to_infected(train_records),
                det_cfg_1,
                backend=detector_backend,
                images_root=images_root,
            )
            save_model(det_model_1, out / "models" / "detector_one_stage.json")
            summary["artifacts"]["detector_one_stage"] = "models/detector_one_stage.json"

            stage = "evaluate-detection-one-stage"
            dets_by_image = {}
            gts_by_image = {}
            for rec in eval_records:
                image = eval_store.get(rec.image_id)
                dets_by_image[rec.image_id] = detect(det_model_1, image, det_cfg_1)
                gts_by_image[rec.image_id] = _stage_gts(rec)
            det_eval_1 = evaluate_detections(
                dets_by_image, gts_by_image, classes=STAGE_CLASSES,
                iou_threshold=EVAL_IOU_THRESHOLD,
            )
            write_json(out / "detection_eval_one_stage.json", det_eval_1.to_json_dict())
            summary["artifacts"]["detection_eval_one_stage"] = "detection_eval_one_stage.json"

            stage = "slide-reports-one-stage"
            reports_1 = [
                run_one_stage(
                    eval_store.get(rec.image_id), det_model_1, config,
                    image_id=rec.image_id,
                )
                for rec in eval_records
            ]
            write_json(
                out / "slide_reports_one_stage.json", [r.to_dict() for r in reports_1]
            )
            summary["artifacts"]["slide_reports_one_stage"] = "slide_reports_one_stage.json"
            summary["metrics"]["one_stage"] = {
                "map": det_eval_1.map,
                "recall": det_eval_1.recall,
                "e2e": _e2e_stage_accuracy(reports_1, eval_records),
            }

        if mode == "compare":
            stage = "compare"
            rows = [
                {
                    "mode": "two_stage",
                    "map": summary["metrics"]["two_stage"]["map"],
                    "recall": summary["metrics"]["two_stage"]["recall"],
                },
                {
                    "mode": "one_stage",
                    "map": summary["metrics"]["one_stage"]["map"],
                    "recall": summary["metrics"]["one_stage"]["recall"],
                },
            ]
            write_json(
                out / "compare.json",
                {
                    "config_fingerprint": config.fingerprint(),
                    "iou_threshold": EVAL_IOU_THRESHOLD,
                    "rows": rows,
                },
            )
            (out / "compare.txt").write_text(_format_compare_table(rows))
            summary["artifacts"]["compare"] = "compare.json"

        stage = "finalize"
        summary["status"] = "complete"
        write_json(out / "experiment.json", summary)
        return summary
    except Exception as exc:
        summary["status"] = "incomplete"
        summary["failed_stage"] = stage
        summary["error"] = str(exc)
        try:
            write_json(out / "experiment.json", summary)
        except OSError:
            pass
        if isinstance(exc, SmearError):
            raise type(exc)(f"stage '{stage}': {exc}") from exc
        raise
