"""Layer 1: infected-cell localization behind a pluggable detector backend.

Two backends are registered. ``blob`` is the deterministic reference backend:
a color/blob segmenter that learns per-stage body-color prototypes plus a
background color from training slides, then reports connected non-background
components whose pixels match a prototype. It is sufficient for the synthetic
fixtures and runs CPU-only with no trained weights. ``frcnn`` wraps the
torchvision two-stage region-proposal detector for real smear data.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import metrics
from .errors import ConfigurationError, ValidationError
from .ingest import (
    INFECTED,
    STAGE_CLASSES,
    BoundingBox,
    SlideRecord,
    map_taxonomy,
    resolve_image_path,
)
from .util import fingerprint, load_image, read_json, write_json

CLASS_MODES = ("binary_infected", "multiclass_stage")


@dataclass(frozen=True)
class Detection:
    """Scored, labeled box emitted by Layer 1."""

    bbox: BoundingBox
    score: float
    label: str

    def to_dict(self, image_id: Optional[str] = None) -> dict:
        d = {"bbox": self.bbox.to_dict(), "score": self.score, "label": self.label}
        if image_id is not None:
            d["image_id"] = image_id
        return d


@dataclass(frozen=True)
class DetectorConfig:
    iterations: int = 15000
    score_threshold: float = 0.5
    nms_iou_threshold: float = 0.5
    seed: int = 0
    class_mode: str = "binary_infected"

    def __post_init__(self) -> None:
        if self.iterations <= 0:
            raise ValidationError(f"iterations must be positive, got {self.iterations}")
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ValidationError(
                f"score_threshold must be in [0, 1], got {self.score_threshold}"
            )
        if not (0.0 < self.nms_iou_threshold < 1.0):
            raise ValidationError(
                f"nms_iou_threshold must be in (0, 1), got {self.nms_iou_threshold}"
            )
        if self.class_mode not in CLASS_MODES:
            raise ValidationError(f"unknown class_mode: {self.class_mode!r}")

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "score_threshold": self.score_threshold,
            "nms_iou_threshold": self.nms_iou_threshold,
            "seed": self.seed,
            "class_mode": self.class_mode,
        }


@dataclass
class DetectorModel:
    """Trained detector handle: backend id, class mode, opaque parameters."""

    backend_id: str
    class_mode: str
    fingerprint: str
    params: dict


def config_fingerprint(backend_id: str, config: DetectorConfig) -> str:
    return fingerprint({"backend": backend_id, **config.to_dict()})


def collapse_to_infected(records: Sequence[SlideRecord]) -> list[SlideRecord]:
    """Reduce records to detector training targets for the single infected class.

    Parasite-stage annotations are kept (their stage category remains readable
    for the one-stage baseline); uninfected and difficult annotations are
    dropped. Geometry is never altered.
    """
    out = []
    for rec in records:
        kept = tuple(
            ann for ann in rec.annotations if map_taxonomy(ann.category)[0] == INFECTED
        )
        out.append(replace(rec, annotations=kept))
    return out


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy score-descending suppression; ties broken by input order.

    Returns the surviving subsequence of the input; no two survivors overlap
    with IoU above the threshold.
    """
    if not (0.0 < iou_threshold < 1.0):
        raise ValidationError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    for d in detections:
        if not (0.0 <= d.score <= 1.0):
            raise ValidationError(f"detection score out of range: {d.score}")
    if not detections:
        return []
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    kept: list[int] = []
    for i in order:
        if all(
            metrics.iou(detections[i].bbox, detections[j].bbox) <= iou_threshold
            for j in kept
        ):
            kept.append(i)
    keep = set(kept)
    return [d for k, d in enumerate(detections) if k in keep]


def _check_image(image: np.ndarray) -> None:
    if not (
        isinstance(image, np.ndarray)
        and image.ndim == 3
        and image.shape[2] == 3
        and image.dtype == np.uint8
    ):
        raise ValidationError("expected an HxWx3 uint8 RGB slide image")


class BlobDetectorBackend:
    """Deterministic color/blob reference detector.

    Training learns the background color and a per-stage body-color prototype
    (per-channel median of non-background pixels inside ground-truth boxes).
    Detection segments non-background pixels, labels 8-connected components,
    and keeps components whose pixel colors match a prototype; the score is
    the matched pixel fraction.
    """

    id = "blob"

    BG_TOL = 25.0
    MATCH_TOL = 25.0
    MIN_AREA = 16
    MIN_MATCH_FRACTION = 0.25

    def train(
        self,
        records: Sequence[SlideRecord],
        config: DetectorConfig,
        images_root: Optional[Path] = None,
    ) -> DetectorModel:
        root = Path(images_root) if images_root is not None else Path(".")
        image_medians = []
        stage_pixels: dict[str, list[np.ndarray]] = {s: [] for s in STAGE_CLASSES}
        for rec in records:
            img = load_image(resolve_image_path(rec.image_path, root))
            if img.shape[:2] != (rec.height, rec.width):
                raise ValidationError(
                    f"{rec.image_id}: image file is {img.shape[:2]}, "
                    f"record says ({rec.height}, {rec.width})"
                )
            image_medians.append(np.median(img[::4, ::4].reshape(-1, 3), axis=0))
            for ann in rec.annotations:
                _, stage = map_taxonomy(ann.category)
                if stage is None:
                    continue
                b = ann.bbox
                region = img[b.min_row : b.max_row, b.min_col : b.max_col]
                stage_pixels[stage].append(region.reshape(-1, 3))

        background = np.median(np.stack(image_medians), axis=0)
        prototypes = {}
        for stage, chunks in stage_pixels.items():
            if not chunks:
                continue
            pix = np.concatenate(chunks).astype(float)
            dist = np.sqrt(((pix - background) ** 2).sum(axis=1))
            cell_pix = pix[dist > self.BG_TOL]
            if len(cell_pix) == 0:
                continue
            prototypes[stage] = np.median(cell_pix, axis=0)
        if not prototypes:
            raise ValidationError("no parasite-stage pixels found in the training set")

        payload = {
            "background": [float(v) for v in background],
            "prototypes": {s: [float(v) for v in p] for s, p in prototypes.items()},
        }
        return DetectorModel(
            backend_id=self.id,
            class_mode=config.class_mode,
            fingerprint=config_fingerprint(self.id, config),
            params=payload,
        )

    def detect(self, model: DetectorModel, image: np.ndarray) -> list[Detection]:
        img = image.astype(float)
        background = np.asarray(model.params["background"])
        prototypes = {
            s: np.asarray(p)
            for s, p in model.params["prototypes"].items()
        }
        dist_bg = np.sqrt(((img - background) ** 2).sum(axis=2))
        mask = dist_bg > self.BG_TOL
        labels, n_comp = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
        detections: list[Detection] = []
        for comp, sl in enumerate(ndimage.find_objects(labels), start=1):
            if sl is None:
                continue
            submask = labels[sl] == comp
            area = int(submask.sum())
            if area < self.MIN_AREA:
                continue
            pix = img[sl][submask]
            best_stage = None
            best_frac = 0.0
            for stage in STAGE_CLASSES:
                if stage not in prototypes:
                    continue
                d = np.sqrt(((pix - prototypes[stage]) ** 2).sum(axis=1))
                frac = float((d <= self.MATCH_TOL).mean())
                if frac > best_frac:
                    best_frac = frac
                    best_stage = stage
            if best_stage is None or best_frac < self.MIN_MATCH_FRACTION:
                continue
            rows, cols = np.nonzero(submask)
            bbox = BoundingBox(
                min_row=sl[0].start + int(rows.min()),
                min_col=sl[1].start + int(cols.min()),
                max_row=sl[0].start + int(rows.max()) + 1,
                max_col=sl[1].start + int(cols.max()) + 1,
            )
            label = INFECTED if model.class_mode == "binary_infected" else best_stage
            detections.append(Detection(bbox=bbox, score=best_frac, label=label))
        return detections

    def save(self, model: DetectorModel, path: Path) -> None:
        write_json(
            path,
            {
                "format_version": 1,
                "backend": self.id,
                "class_mode": model.class_mode,
                "fingerprint": model.fingerprint,
                "payload": model.params,
            },
        )

    def load(self, path: Path) -> DetectorModel:
        header = read_json(path)
        return DetectorModel(
            backend_id=header["backend"],
            class_mode=header["class_mode"],
            fingerprint=header["fingerprint"],
            params=header["payload"],
        )


class TorchFasterRCNNBackend:
    """Production backend: torchvision's two-stage proposal/classification
    detector over a pretrained convolutional backbone.

    Requires the optional torch dependencies. Downloading backbone weights
    needs either network access or a pre-populated TORCH_HOME cache; set
    ``pretrained_backbone=False`` to train from random initialization.
    """

    id = "frcnn"

    def __init__(
        self,
        pretrained_backbone: bool = True,
        min_size: int = 800,
        max_size: int = 1333,
        learning_rate: float = 0.005,
    ) -> None:
        self.pretrained_backbone = pretrained_backbone
        self.min_size = min_size
        self.max_size = max_size
        self.learning_rate = learning_rate

    def _modules(self):
        try:
            import torch
            from torchvision.models.detection import fasterrcnn_resnet50_fpn
        except ImportError as exc:
            raise ConfigurationError(
                "the 'frcnn' backend needs torch and torchvision "
                "(pip install 'smeardx[torch]'); the 'blob' reference backend "
                "runs without them"
            ) from exc
        return torch, fasterrcnn_resnet50_fpn

    def _build(self, class_mode: str):
        torch, fasterrcnn_resnet50_fpn = self._modules()
        num_classes = 2 if class_mode == "binary_infected" else 1 + len(STAGE_CLASSES)
        backbone_weights = "IMAGENET1K_V1" if self.pretrained_backbone else None
        try:
            model = fasterrcnn_resnet50_fpn(
                weights=None,
                weights_backbone=backbone_weights,
                num_classes=num_classes,
                min_size=self.min_size,
                max_size=self.max_size,
            )
        except Exception as exc:
            raise ConfigurationError(
                "could not load pretrained backbone weights "
                f"({exc}); pre-populate the TORCH_HOME checkpoint cache or set "
                "the backend option pretrained_backbone=false"
            ) from exc
        return torch, model

    @staticmethod
    def _label_index(category: str, class_mode: str) -> int:
        if class_mode == "binary_infected":
            return 1
        return 1 + STAGE_CLASSES.index(category)

    def train(
        self,
        records: Sequence[SlideRecord],
        config: DetectorConfig,
        images_root: Optional[Path] = None,
    ) -> DetectorModel:
        torch, model = self._build(config.class_mode)
        torch.manual_seed(config.seed)
        root = Path(images_root) if images_root is not None else Path(".")

        samples = []
        for rec in records:
            boxes = []
            labels = []
            for ann in rec.annotations:
                _, stage = map_taxonomy(ann.category)
                if stage is None:
                    continue
                b = ann.bbox
                boxes.append([b.min_col, b.min_row, b.max_col, b.max_row])
                labels.append(self._label_index(stage, config.class_mode))
            if boxes:
                samples.append((rec, boxes, labels))
        if not samples:
            raise ValidationError("no parasite-stage boxes in the training set")

        model.train()
        optimizer = torch.optim.SGD(
            model.parameters(), lr=self.learning_rate, momentum=0.9, weight_decay=5e-4
        )
        for step in range(config.iterations):
            rec, boxes, labels = samples[step % len(samples)]
            img = load_image(resolve_image_path(rec.image_path, root))
            tensor = torch.from_numpy(img).permute(2, 0, 1).float() / 255.0
            target = {
                "boxes": torch.tensor(boxes, dtype=torch.float32),
                "labels": torch.tensor(labels, dtype=torch.int64),
            }
            losses = model([tensor], [target])
            loss = sum(losses.values())
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        model.eval()
        return DetectorModel(
            backend_id=self.id,
            class_mode=config.class_mode,
            fingerprint=config_fingerprint(self.id, config),
            params={"module": model, "options": self._options()},
        )

    def _options(self) -> dict:
        return {
            "pretrained_backbone": self.pretrained_backbone,
            "min_size": self.min_size,
            "max_size": self.max_size,
            "learning_rate": self.learning_rate,
        }

    def detect(self, model: DetectorModel, image: np.ndarray) -> list[Detection]:
        torch, _ = self._modules()
        module = model.params["module"]
        tensor = torch.from_numpy(image).permute(2, 0, 1).float() / 255.0
        with torch.no_grad():
            out = module([tensor])[0]
        detections = []
        for (x1, y1, x2, y2), score, label in zip(
            out["boxes"].tolist(), out["scores"].tolist(), out["labels"].tolist()
        ):
            min_row, min_col = int(np.floor(y1)), int(np.floor(x1))
            max_row, max_col = int(np.ceil(y2)), int(np.ceil(x2))
            if max_row <= min_row or max_col <= min_col or min_row < 0 or min_col < 0:
                continue
            if model.class_mode == "binary_infected":
                name = INFECTED
            else:
                idx = int(label) - 1
                if not (0 <= idx < len(STAGE_CLASSES)):
                    continue
                name = STAGE_CLASSES[idx]
            detections.append(
                Detection(
                    bbox=BoundingBox(min_row, min_col, max_row, max_col),
                    score=min(max(float(score), 0.0), 1.0),
                    label=name,
                )
            )
        return detections

    def save(self, model: DetectorModel, path: Path) -> None:
        torch, _ = self._modules()
        path = Path(path)
        state_file = path.with_suffix(path.suffix + ".pt")
        torch.save(model.params["module"].state_dict(), state_file)
        write_json(
            path,
            {
                "format_version": 1,
                "backend": self.id,
                "class_mode": model.class_mode,
                "fingerprint": model.fingerprint,
                "payload": {
                    "state_file": state_file.name,
                    "options": model.params["options"],
                },
            },
        )

    def load(self, path: Path) -> DetectorModel:
        path = Path(path)
        header = read_json(path)
        options = header["payload"]["options"]
        backend = TorchFasterRCNNBackend(**options)
        torch, module = backend._build(header["class_mode"])
        state = torch.load(path.parent / header["payload"]["state_file"], weights_only=True)
        module.load_state_dict(state)
        module.eval()
        return DetectorModel(
            backend_id=header["backend"],
            class_mode=header["class_mode"],
            fingerprint=header["fingerprint"],
            params={"module": module, "options": options},
        )


_DETECTOR_BACKENDS = {
    BlobDetectorBackend.id: BlobDetectorBackend,
    TorchFasterRCNNBackend.id: TorchFasterRCNNBackend,
}


def get_detector_backend(name: str, **options):
    """Instantiate a registered detector backend by id."""
    if name not in _DETECTOR_BACKENDS:
        raise ConfigurationError(
            f"unknown detector backend {name!r}; registered: "
            f"{sorted(_DETECTOR_BACKENDS)}"
        )
    return _DETECTOR_BACKENDS[name](**options)


def train_detector(
    train: Sequence[SlideRecord],
    config: DetectorConfig,
    backend="blob",
    images_root: Optional[Path] = None,
) -> DetectorModel:
    """Train a detector on slide records via the chosen backend."""
    if not train:
        raise ValidationError("training set is empty")
    if isinstance(backend, str):
        backend = get_detector_backend(backend)
    return backend.train(train, config, images_root=images_root)


def detect(
    model: DetectorModel, image: np.ndarray, config: DetectorConfig
) -> list[Detection]:
    """Run the detector and post-process uniformly.

    Backend detections are clipped to the image (zero-area boxes dropped),
    filtered at the score threshold, and suppressed at the NMS threshold;
    the result is sorted by descending score.
    """
    _check_image(image)
    backend = get_detector_backend(model.backend_id)
    height, width = image.shape[:2]
    survivors = []
    for d in backend.detect(model, image):
        clipped = d.bbox.clip(height, width)
        if clipped is None:
            continue
        if d.score < config.score_threshold:
            continue
        survivors.append(Detection(bbox=clipped, score=d.score, label=d.label))
    survivors.sort(key=lambda d: -d.score)
    return nms(survivors, config.nms_iou_threshold)


def save_model(model: DetectorModel, path: Path | str) -> None:
    get_detector_backend(model.backend_id).save(model, Path(path))


def load_model(path: Path | str) -> DetectorModel:
    header = read_json(path)
    if "backend" not in header:
        raise ConfigurationError(f"{path}: not a detector model file")
    name = header["backend"]
    if name not in _DETECTOR_BACKENDS:
        raise ConfigurationError(f"{path}: unknown detector backend {name!r}")
    return _DETECTOR_BACKENDS[name]().load(Path(path))
