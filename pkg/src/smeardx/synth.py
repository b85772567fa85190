"""Deterministic synthetic blood-smear generator.

Slides are flat-color cartoons, not realistic smears: each cell is a filled
disc, and each parasite stage carries a distinct geometric marker (annulus,
bar, dot cluster, lobes) in a shared marker color. Stage body colors are also
pairwise distant, so both a color segmenter and a shape heuristic can
separate the classes by construction. Ground truth is exact because the
renderer and the annotator are the same code.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .errors import CapacityError, ValidationError
from .ingest import (
    CATEGORIES,
    STAGE_CLASSES,
    BoundingBox,
    CellAnnotation,
    SlideRecord,
    write_annotations,
)
from .util import derived_seed, fingerprint, save_image, write_json

MARKER_SHAPES = ("none", "nucleus", "annulus", "bar", "dots", "lobes")
PLACEMENT_ATTEMPTS = 10000


@dataclass(frozen=True)
class CellStyle:
    """Visual recipe for one cell category."""

    fill: tuple[int, int, int]
    radius_range: tuple[int, int]
    marker: str = "none"
    marker_color: tuple[int, int, int] = (70, 40, 90)

    def __post_init__(self) -> None:
        if self.marker not in MARKER_SHAPES:
            raise ValidationError(f"unknown marker shape: {self.marker!r}")
        lo, hi = self.radius_range
        if not (2 <= lo <= hi):
            raise ValidationError(f"radius range must satisfy 2 <= lo <= hi, got {self.radius_range}")
        for color in (self.fill, self.marker_color):
            if len(color) != 3 or any(not (0 <= c <= 255) for c in color):
                raise ValidationError(f"colors must be RGB triples in 0..255, got {color}")

    def to_dict(self) -> dict:
        return {
            "fill": list(self.fill),
            "radius_range": list(self.radius_range),
            "marker": self.marker,
            "marker_color": list(self.marker_color),
        }


@dataclass(frozen=True)
class SynthSpec:
    """Full recipe for one slide: sizes, counts, palette, noise, seed."""

    height: int
    width: int
    counts: Mapping[str, int]
    styles: Mapping[str, CellStyle]
    background: tuple[int, int, int] = (235, 228, 230)
    noise: int = 6
    min_gap: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ValidationError("image dims must be at least 16x16")
        if self.noise < 0:
            raise ValidationError("noise amplitude must be >= 0")
        if self.min_gap < 0:
            raise ValidationError("min_gap must be >= 0")
        if len(self.background) != 3 or any(not (0 <= c <= 255) for c in self.background):
            raise ValidationError(f"background must be an RGB triple, got {self.background}")
        for category, count in self.counts.items():
            if category not in CATEGORIES or category == "difficult":
                raise ValidationError(f"cannot render category {category!r}")
            if count < 0:
                raise ValidationError(f"count for {category!r} must be >= 0")
            if count > 0 and category not in self.styles:
                raise ValidationError(f"no style defined for category {category!r}")
        for category, style in self.styles.items():
            hi = style.radius_range[1]
            if 2 * hi + 1 > min(self.height, self.width):
                raise ValidationError(
                    f"{category!r} radius {hi} cannot fit in {self.height}x{self.width}"
                )
        # Stage classes must stay separable by construction.
        markers = [self.styles[s].marker for s in STAGE_CLASSES if s in self.styles]
        if len(set(markers)) != len(markers):
            raise ValidationError("stage classes must have pairwise-distinct markers")

    @classmethod
    def default(
        cls,
        height: int = 256,
        width: int = 256,
        counts: Optional[Mapping[str, int]] = None,
        seed: int = 0,
        noise: int = 6,
        min_gap: int = 4,
    ) -> "SynthSpec":
        styles = {
            "red_blood_cell": CellStyle(fill=(220, 160, 160), radius_range=(8, 12)),
            "leukocyte": CellStyle(
                fill=(200, 180, 220),
                radius_range=(10, 14),
                marker="nucleus",
                marker_color=(110, 70, 130),
            ),
            "gametocyte": CellStyle(fill=(150, 190, 235), radius_range=(9, 13), marker="bar"),
            "ring": CellStyle(fill=(230, 210, 150), radius_range=(9, 13), marker="annulus"),
            "schizont": CellStyle(fill=(160, 230, 170), radius_range=(9, 13), marker="dots"),
            "trophozoite": CellStyle(fill=(240, 150, 210), radius_range=(9, 13), marker="lobes"),
        }
        if counts is None:
            counts = {
                "red_blood_cell": 6,
                "leukocyte": 1,
                "gametocyte": 1,
                "ring": 1,
                "schizont": 1,
                "trophozoite": 1,
            }
        return cls(
            height=height,
            width=width,
            counts=dict(counts),
            styles=styles,
            seed=seed,
            noise=noise,
            min_gap=min_gap,
        )

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "counts": dict(self.counts),
            "styles": {k: v.to_dict() for k, v in self.styles.items()},
            "background": list(self.background),
            "noise": self.noise,
            "min_gap": self.min_gap,
            "seed": self.seed,
        }


def _disc(dy: np.ndarray, dx: np.ndarray, radius: float) -> np.ndarray:
    return dy * dy + dx * dx <= radius * radius


def _marker_mask(style: CellStyle, dy: np.ndarray, dx: np.ndarray, r: int) -> Optional[np.ndarray]:
    """Marker geometry relative to the cell center; None for plain cells.

    Every marker stays within ~0.8r so the cell's extreme pixels keep the
    body fill color and a color segmenter recovers the exact bbox.
    """
    if style.marker == "none":
        return None
    if style.marker == "nucleus":
        return _disc(dy, dx, max(2, r // 2))
    if style.marker == "annulus":
        a = max(3, int(0.55 * r))
        d2 = dy * dy + dx * dx
        return ((a - 1) ** 2 <= d2) & (d2 <= (a + 1) ** 2)
    if style.marker == "bar":
        return (np.abs(dy) <= max(1, r // 4)) & (np.abs(dx) <= int(0.7 * r))
    if style.marker == "dots":
        d = max(2, int(0.45 * r))
        rr = max(1, r // 5)
        mask = _disc(dy, dx, rr)
        for oy, ox in ((-d, -d), (-d, d), (d, -d), (d, d)):
            mask |= _disc(dy - oy, dx - ox, rr)
        return mask
    if style.marker == "lobes":
        d = max(2, int(0.4 * r))
        rr = max(2, r // 3)
        mask = _disc(dy, dx - d, rr) | _disc(dy, dx + d, rr) | _disc(dy - d, dx, rr)
        return mask
    raise ValidationError(f"unknown marker shape: {style.marker!r}")


def _boxes_too_close(a: BoundingBox, b: BoundingBox, gap: int) -> bool:
    # True when the boxes overlap or sit closer than `gap` pixels apart.
    return (
        a.min_row < b.max_row + gap
        and b.min_row < a.max_row + gap
        and a.min_col < b.max_col + gap
        and b.min_col < a.max_col + gap
    )


def generate_slide(
    spec: SynthSpec,
    image_id: str = "slide",
    image_path: str = "slide.png",
) -> tuple[np.ndarray, SlideRecord]:
    """Render one slide and its exact annotations.

    Cells are placed by seeded rejection sampling; two cells never come
    closer than min_gap, so planted bboxes have pairwise IoU 0. Placement
    that fails PLACEMENT_ATTEMPTS times for one cell raises a capacity error
    naming the constraint.
    """
    rng = np.random.default_rng(spec.seed)
    image = np.empty((spec.height, spec.width, 3), dtype=np.int16)
    image[:, :] = spec.background

    placed: list[BoundingBox] = []
    annotations: list[CellAnnotation] = []
    # Fixed category order keeps the rng draw sequence stable.
    for category in CATEGORIES:
        count = spec.counts.get(category, 0)
        for _ in range(count):
            style = spec.styles[category]
            lo, hi = style.radius_range
            bbox = None
            for _attempt in range(PLACEMENT_ATTEMPTS):
                r = int(rng.integers(lo, hi + 1))
                cy = int(rng.integers(r, spec.height - r))
                cx = int(rng.integers(r, spec.width - r))
                candidate = BoundingBox(cy - r, cx - r, cy + r + 1, cx + r + 1)
                if all(not _boxes_too_close(candidate, other, spec.min_gap) for other in placed):
                    bbox = candidate
                    break
            if bbox is None:
                raise CapacityError(
                    f"could not place a {category!r} cell after {PLACEMENT_ATTEMPTS} "
                    f"attempts; lower the counts, radii, or min_gap for the "
                    f"{spec.height}x{spec.width} canvas"
                )
            placed.append(bbox)

            side = bbox.max_row - bbox.min_row
            r = (side - 1) // 2
            dy, dx = np.ogrid[-r : r + 1, -r : r + 1]
            body = _disc(dy, dx, r)
            region = image[bbox.min_row : bbox.max_row, bbox.min_col : bbox.max_col]
            region[body] = style.fill
            marker = _marker_mask(style, dy, dx, r)
            if marker is not None:
                region[marker & body] = style.marker_color
            annotations.append(CellAnnotation(bbox=bbox, category=category))

    if spec.noise > 0:
        image += rng.integers(-spec.noise, spec.noise + 1, size=image.shape, dtype=np.int16)
    pixels = np.clip(image, 0, 255).astype(np.uint8)
    record = SlideRecord(
        image_id=image_id,
        image_path=image_path,
        height=spec.height,
        width=spec.width,
        annotations=tuple(annotations),
    )
    return pixels, record


def generate_corpus(
    n: int,
    spec: Optional[SynthSpec] = None,
    seed: int = 0,
    output_dir: Path | str = "synth_corpus",
) -> Path:
    """Write n slides plus annotations.json and manifest.json.

    Each slide gets its own seed derived from (seed, slide index), so the
    corpus is reproducible as a whole and any slide is reproducible alone.
    """
    if n <= 0:
        raise ValidationError(f"corpus size must be positive, got {n}")
    if spec is None:
        spec = SynthSpec.default()
    out = Path(output_dir)
    images_dir = out / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    records = []
    slide_seeds = []
    totals: dict[str, int] = {}
    for i in range(n):
        slide_seed = derived_seed(seed, f"slide:{i}")
        slide_seeds.append(slide_seed)
        name = f"slide_{i:04d}"
        rel_path = f"images/{name}.png"
        pixels, record = generate_slide(
            replace(spec, seed=slide_seed), image_id=name, image_path=rel_path
        )
        save_image(out / rel_path, pixels)
        records.append(record)
        for ann in record.annotations:
            totals[ann.category] = totals.get(ann.category, 0) + 1

    write_annotations(records, out / "annotations.json")
    manifest = {
        "n_slides": n,
        "seed": seed,
        "slide_seeds": slide_seeds,
        "spec": spec.to_dict(),
        "per_class_totals": dict(sorted(totals.items())),
    }
    manifest["fingerprint"] = fingerprint(manifest)
    write_json(out / "manifest.json", manifest)
    return out
