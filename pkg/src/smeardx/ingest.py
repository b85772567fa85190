"""Annotation parsing, label taxonomy, and classifier dataset construction.

Annotation files follow the thin-smear JSON schema: a top-level array where
each element carries an ``image`` object (``pathname``, ``shape.r/c/channels``)
and an ``objects`` array of ``{category, bounding_box{minimum{r,c}, maximum{r,c}}}``
entries. Coordinates are (row, col) with max-exclusive bounds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import AnnotationParseError, ValidationError

# Raw annotation categories accepted at parse time.
CATEGORIES: tuple[str, ...] = (
    "red_blood_cell",
    "leukocyte",
    "gametocyte",
    "ring",
    "trophozoite",
    "schizont",
    "difficult",
)

# Canonical parasite-stage order; reports and class vectors follow it.
STAGE_CLASSES: tuple[str, ...] = ("gametocyte", "ring", "schizont", "trophozoite")

UNINFECTED_CATEGORIES: tuple[str, ...] = ("red_blood_cell", "leukocyte")

INFECTED = "infected"
UNINFECTED = "uninfected"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel box; min inclusive, max exclusive, (row, col) order."""

    min_row: int
    min_col: int
    max_row: int
    max_col: int

    def __post_init__(self) -> None:
        if not (0 <= self.min_row < self.max_row):
            raise ValidationError(
                f"invalid bbox rows: min_row={self.min_row}, max_row={self.max_row}"
            )
        if not (0 <= self.min_col < self.max_col):
            raise ValidationError(
                f"invalid bbox cols: min_col={self.min_col}, max_col={self.max_col}"
            )

    @property
    def height(self) -> int:
        return self.max_row - self.min_row

    @property
    def width(self) -> int:
        return self.max_col - self.min_col

    @property
    def area(self) -> int:
        return self.height * self.width

    def clip(self, height: int, width: int) -> Optional["BoundingBox"]:
        """Clip to an image of the given size; None if nothing remains."""
        r0 = max(self.min_row, 0)
        c0 = max(self.min_col, 0)
        r1 = min(self.max_row, height)
        c1 = min(self.max_col, width)
        if r0 >= r1 or c0 >= c1:
            return None
        return BoundingBox(r0, c0, r1, c1)

    def to_dict(self) -> dict:
        return {
            "min_row": self.min_row,
            "min_col": self.min_col,
            "max_row": self.max_row,
            "max_col": self.max_col,
        }

    @staticmethod
    def from_dict(d: Mapping) -> "BoundingBox":
        return BoundingBox(d["min_row"], d["min_col"], d["max_row"], d["max_col"])


@dataclass(frozen=True)
class CellAnnotation:
    bbox: BoundingBox
    category: str

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ValidationError(f"unknown annotation category: {self.category!r}")


@dataclass(frozen=True)
class SlideRecord:
    """One smear image plus its cell annotations."""

    image_id: str
    image_path: str
    height: int
    width: int
    annotations: tuple[CellAnnotation, ...]

    def __post_init__(self) -> None:
        if self.height <= 0 or self.width <= 0:
            raise ValidationError(
                f"{self.image_id}: non-positive image shape "
                f"({self.height}, {self.width})"
            )
        for i, ann in enumerate(self.annotations):
            b = ann.bbox
            if b.max_row > self.height or b.max_col > self.width:
                raise ValidationError(
                    f"{self.image_id}: annotation {i} bbox {b.to_dict()} exceeds "
                    f"image bounds ({self.height}, {self.width})"
                )


def map_taxonomy(category: str) -> tuple[Optional[str], Optional[str]]:
    """Map a raw category onto (infection label, stage label).

    The four parasite stages map to ("infected", stage); red blood cells and
    leukocytes map to ("uninfected", None). The dataset's ``difficult`` tag
    maps to (None, None), the excluded-from-training marker.
    """
    if category in STAGE_CLASSES:
        return INFECTED, category
    if category in UNINFECTED_CATEGORIES:
        return UNINFECTED, None
    if category == "difficult":
        return None, None
    raise ValidationError(f"unknown annotation category: {category!r}")


def _require(entry: Mapping, key: str, index: int, context: str) -> object:
    if not isinstance(entry, Mapping) or key not in entry:
        raise AnnotationParseError(f"entry {index}: missing field '{context}'")
    return entry[key]


def _int_field(entry: Mapping, key: str, index: int, context: str) -> int:
    value = _require(entry, key, index, context)
    if isinstance(value, bool) or not isinstance(value, int):
        raise AnnotationParseError(f"entry {index}: field '{context}' is not an integer")
    return value


def parse_annotations(path: Path | str) -> list[SlideRecord]:
    """Parse an annotation JSON file into one SlideRecord per image entry.

    Annotation order inside each record is preserved. Unknown extra fields are
    ignored. Malformed entries raise AnnotationParseError naming the offending
    index and field; invalid boxes raise ValidationError citing the entry.
    """
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"annotation file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(f"annotation file is not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise AnnotationParseError("annotation file must hold a top-level array")

    records: list[SlideRecord] = []
    seen_ids: set[str] = set()
    for i, entry in enumerate(data):
        image = _require(entry, "image", i, "image")
        pathname = _require(image, "pathname", i, "image.pathname")
        if not isinstance(pathname, str) or not pathname:
            raise AnnotationParseError(f"entry {i}: field 'image.pathname' is not a string")
        shape = _require(image, "shape", i, "image.shape")
        height = _int_field(shape, "r", i, "image.shape.r")
        width = _int_field(shape, "c", i, "image.shape.c")

        objects = _require(entry, "objects", i, "objects")
        if not isinstance(objects, list):
            raise AnnotationParseError(f"entry {i}: field 'objects' is not an array")
        annotations = []
        for j, obj in enumerate(objects):
            category = _require(obj, "category", i, f"objects[{j}].category")
            box = _require(obj, "bounding_box", i, f"objects[{j}].bounding_box")
            mn = _require(box, "minimum", i, f"objects[{j}].bounding_box.minimum")
            mx = _require(box, "maximum", i, f"objects[{j}].bounding_box.maximum")
            coords = (
                _int_field(mn, "r", i, f"objects[{j}].bounding_box.minimum.r"),
                _int_field(mn, "c", i, f"objects[{j}].bounding_box.minimum.c"),
                _int_field(mx, "r", i, f"objects[{j}].bounding_box.maximum.r"),
                _int_field(mx, "c", i, f"objects[{j}].bounding_box.maximum.c"),
            )
            try:
                bbox = BoundingBox(*coords)
                annotations.append(CellAnnotation(bbox=bbox, category=str(category)))
            except ValidationError as exc:
                raise ValidationError(f"entry {i}, object {j}: {exc}") from exc

        image_id = Path(pathname).stem
        if image_id in seen_ids:
            raise AnnotationParseError(f"entry {i}: duplicate image_id '{image_id}'")
        seen_ids.add(image_id)
        try:
            records.append(
                SlideRecord(
                    image_id=image_id,
                    image_path=pathname,
                    height=height,
                    width=width,
                    annotations=tuple(annotations),
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"entry {i}: {exc}") from exc
    return records


def records_to_entries(records: Sequence[SlideRecord]) -> list[dict]:
    """Serialize records back to the annotation schema (parse round-trips)."""
    entries = []
    for rec in records:
        entries.append(
            {
                "image": {
                    "pathname": rec.image_path,
                    "shape": {"r": rec.height, "c": rec.width, "channels": 3},
                },
                "objects": [
                    {
                        "category": ann.category,
                        "bounding_box": {
                            "minimum": {"r": ann.bbox.min_row, "c": ann.bbox.min_col},
                            "maximum": {"r": ann.bbox.max_row, "c": ann.bbox.max_col},
                        },
                    }
                    for ann in rec.annotations
                ],
            }
        )
    return entries


def write_annotations(records: Sequence[SlideRecord], path: Path | str) -> None:
    Path(path).write_text(
        json.dumps(records_to_entries(records), indent=2) + "\n", encoding="utf-8"
    )


def resolve_image_path(image_path: str, root: Path | str) -> Path:
    """Resolve a record's stored pathname against a dataset root.

    Dataset files store pathnames like ``/images/x.png`` that are relative to
    the dataset root despite the leading slash; absolute paths that exist on
    disk are used as-is.
    """
    p = Path(image_path)
    if p.is_absolute() and p.exists():
        return p
    return Path(root) / image_path.lstrip("/")


@dataclass(frozen=True)
class CropRef:
    """Reference to one labeled cell crop (image + box), the classifier unit."""

    image_id: str
    image_path: str
    bbox: BoundingBox
    stage: str

    def __post_init__(self) -> None:
        if self.stage not in STAGE_CLASSES:
            raise ValidationError(f"not a stage label: {self.stage!r}")


@dataclass(frozen=True)
class ClassifierDataset:
    items: tuple[CropRef, ...]
    per_class_counts: Mapping[str, int]
    seed: int
    warnings: tuple[str, ...] = ()

    def sidecar(self) -> dict:
        """Dataset metadata suitable for the JSON sidecar."""
        return {
            "total": len(self.items),
            "per_class_counts": dict(self.per_class_counts),
            "seed": self.seed,
            "warnings": list(self.warnings),
        }


def collect_stage_crops(records: Iterable[SlideRecord]) -> list[CropRef]:
    """Ground-truth parasite-stage boxes as classifier crop references."""
    crops = []
    for rec in records:
        for ann in rec.annotations:
            _, stage = map_taxonomy(ann.category)
            if stage is not None:
                crops.append(
                    CropRef(
                        image_id=rec.image_id,
                        image_path=rec.image_path,
                        bbox=ann.bbox,
                        stage=stage,
                    )
                )
    return crops


def _group_by_stage(items: Sequence[CropRef]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {stage: [] for stage in STAGE_CLASSES}
    for idx, item in enumerate(items):
        groups[item.stage].append(idx)
    return groups


def balanced_subset(items: Sequence[CropRef], cap: int, seed: int = 0) -> ClassifierDataset:
    """Clip every stage class to at most ``cap`` items by seeded uniform sampling.

    Classes short of the cap keep everything they have and leave a warning in
    the dataset metadata. Selection is without replacement and deterministic
    for a given seed.
    """
    if cap <= 0:
        raise ValidationError(f"cap must be positive, got {cap}")
    if not items:
        raise ValidationError("balanced_subset requires a non-empty item sequence")

    rng = np.random.default_rng(seed)
    groups = _group_by_stage(items)
    selected: list[CropRef] = []
    counts: dict[str, int] = {}
    warnings: list[str] = []
    for stage in STAGE_CLASSES:
        idxs = groups[stage]
        if not idxs:
            warnings.append(f"class '{stage}' has no items")
            counts[stage] = 0
            continue
        if len(idxs) <= cap:
            if len(idxs) < cap:
                warnings.append(
                    f"class '{stage}' has only {len(idxs)} items (cap {cap}); keeping all"
                )
            chosen = idxs
        else:
            pick = rng.choice(len(idxs), size=cap, replace=False)
            chosen = [idxs[k] for k in sorted(pick)]
        counts[stage] = len(chosen)
        selected.extend(items[k] for k in chosen)
    return ClassifierDataset(
        items=tuple(selected),
        per_class_counts=counts,
        seed=seed,
        warnings=tuple(warnings),
    )


def stratified_split(
    dataset: ClassifierDataset, train_fraction: float, seed: int = 0
) -> tuple[ClassifierDataset, ClassifierDataset]:
    """Split per class: floor(fraction * n) items to train, the rest to test."""
    if not (0.0 < train_fraction < 1.0):
        raise ValidationError(f"train_fraction must be in (0, 1), got {train_fraction}")

    rng = np.random.default_rng(seed)
    groups = _group_by_stage(dataset.items)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for stage in STAGE_CLASSES:
        idxs = groups[stage]
        if not idxs:
            continue
        if len(idxs) < 2:
            raise ValidationError(
                f"class '{stage}' has {len(idxs)} item(s); need at least 2 to split"
            )
        # The small epsilon keeps float rounding from dragging an exact
        # fraction*count product below its integer value.
        k = math.floor(train_fraction * len(idxs) + 1e-9)
        perm = rng.permutation(len(idxs))
        train_idx.extend(sorted(idxs[j] for j in perm[:k]))
        test_idx.extend(sorted(idxs[j] for j in perm[k:]))

    def build(indices: list[int]) -> ClassifierDataset:
        chosen = tuple(dataset.items[k] for k in indices)
        counts = {stage: 0 for stage in STAGE_CLASSES}
        for item in chosen:
            counts[item.stage] += 1
        return ClassifierDataset(
            items=chosen,
            per_class_counts=counts,
            seed=seed,
            warnings=dataset.warnings,
        )

    return build(train_idx), build(test_idx)
