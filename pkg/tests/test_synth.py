import hashlib

import numpy as np
import pytest

from smeardx import (
    STAGE_CLASSES,
    CapacityError,
    CellStyle,
    SynthSpec,
    ValidationError,
    balanced_subset,
    collect_stage_crops,
    generate_corpus,
    generate_slide,
    iou,
    parse_annotations,
)


class TestSynthSpec:
    def test_default_is_valid(self):
        spec = SynthSpec.default()
        assert spec.height == 256 and spec.width == 256
        assert all(stage in spec.styles for stage in STAGE_CLASSES)

    def test_negative_count_rejected(self):
        with pytest.raises(ValidationError):
            SynthSpec.default(counts={"ring": -1})

    def test_difficult_not_renderable(self):
        with pytest.raises(ValidationError):
            SynthSpec.default(counts={"difficult": 1})

    def test_unknown_category_rejected(self):
        with pytest.raises(ValidationError):
            SynthSpec.default(counts={"platelet": 1})

    def test_oversized_radius_rejected(self):
        with pytest.raises(ValidationError):
            SynthSpec.default(height=16, width=16)

    def test_duplicate_stage_markers_rejected(self):
        spec = SynthSpec.default()
        styles = dict(spec.styles)
        styles["ring"] = CellStyle(
            fill=(230, 210, 150), radius_range=(9, 13), marker="bar"
        )  # collides with gametocyte
        with pytest.raises(ValidationError, match="distinct"):
            SynthSpec(
                height=256,
                width=256,
                counts=dict(spec.counts),
                styles=styles,
            )

    def test_bad_marker_rejected(self):
        with pytest.raises(ValidationError):
            CellStyle(fill=(1, 2, 3), radius_range=(5, 8), marker="spiral")

    def test_bad_radius_rejected(self):
        with pytest.raises(ValidationError):
            CellStyle(fill=(1, 2, 3), radius_range=(9, 5))


class TestGenerateSlide:
    def test_zero_cells_background_only(self):
        spec = SynthSpec.default(counts={}, seed=4)
        image, record = generate_slide(spec)
        assert record.annotations == ()
        assert image.shape == (256, 256, 3)
        bg = np.array(spec.background)
        assert np.abs(image.astype(int) - bg).max() <= spec.noise

    def test_determinism(self):
        spec = SynthSpec.default(counts={"ring": 3, "red_blood_cell": 10}, seed=7)
        img_a, rec_a = generate_slide(spec)
        img_b, rec_b = generate_slide(spec)
        assert np.array_equal(img_a, img_b)
        assert rec_a == rec_b

    def test_annotation_count_matches_spec(self):
        spec = SynthSpec.default(seed=1)
        _, record = generate_slide(spec)
        by_cat = {}
        for ann in record.annotations:
            by_cat[ann.category] = by_cat.get(ann.category, 0) + 1
        assert by_cat == dict(spec.counts)

    def test_pairwise_iou_zero(self):
        for seed in range(5):
            _, record = generate_slide(SynthSpec.default(seed=seed))
            boxes = [ann.bbox for ann in record.annotations]
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    assert iou(boxes[i], boxes[j]) == 0.0

    def test_infeasible_placement_is_capacity_error(self):
        spec = SynthSpec.default(
            height=64, width=64, counts={"red_blood_cell": 40}, seed=0
        )
        with pytest.raises(CapacityError, match="red_blood_cell"):
            generate_slide(spec)

    def test_color_segmentation_recovers_boxes(self):
        # between the markers staying interior and the min-gap, matching a
        # cell's fill color inside its padded bbox must recover the bbox
        spec = SynthSpec.default(seed=9)
        image, record = generate_slide(spec)
        work = image.astype(int)
        for ann in record.annotations:
            style = spec.styles[ann.category]
            pad = 2
            r0 = max(0, ann.bbox.min_row - pad)
            c0 = max(0, ann.bbox.min_col - pad)
            r1 = min(spec.height, ann.bbox.max_row + pad)
            c1 = min(spec.width, ann.bbox.max_col + pad)
            region = work[r0:r1, c0:c1]
            mask = (np.abs(region - np.array(style.fill)) <= spec.noise).all(axis=2)
            rows, cols = np.nonzero(mask)
            assert rows.size > 0
            from smeardx import BoundingBox

            recovered = BoundingBox(
                r0 + rows.min(), c0 + cols.min(), r0 + rows.max() + 1, c0 + cols.max() + 1
            )
            assert iou(recovered, ann.bbox) >= 0.9


class TestGenerateCorpus:
    def test_round_trip_and_totals(self, tmp_path):
        spec = SynthSpec.default()
        out = generate_corpus(25, spec, seed=3, output_dir=tmp_path / "c")
        records = parse_annotations(out / "annotations.json")
        assert len(records) == 25
        totals = {}
        for rec in records:
            for ann in rec.annotations:
                totals[ann.category] = totals.get(ann.category, 0) + 1
        assert totals == {cat: 25 * n for cat, n in spec.counts.items()}

    def test_manifest_contents(self, tmp_path):
        out = generate_corpus(4, SynthSpec.default(), seed=5, output_dir=tmp_path / "c")
        from smeardx.util import read_json

        manifest = read_json(out / "manifest.json")
        assert manifest["n_slides"] == 4
        assert manifest["seed"] == 5
        assert len(manifest["slide_seeds"]) == 4
        assert "per_class_totals" in manifest and "spec" in manifest

    def test_corpus_determinism(self, tmp_path):
        spec = SynthSpec.default()
        a = generate_corpus(6, spec, seed=8, output_dir=tmp_path / "a")
        b = generate_corpus(6, spec, seed=8, output_dir=tmp_path / "b")
        for name in ("annotations.json", "manifest.json", "images/slide_0002.png"):
            ha = hashlib.sha256((a / name).read_bytes()).hexdigest()
            hb = hashlib.sha256((b / name).read_bytes()).hexdigest()
            assert ha == hb, name

    def test_balanced_subset_arithmetic_on_corpus(self, corpus_dir):
        # 30 slides x 1 cell per stage; capping at 20 gives 80 crops
        records = parse_annotations(corpus_dir / "annotations.json")
        crops = collect_stage_crops(records)
        ds = balanced_subset(crops, 20, seed=0)
        assert len(ds.items) == 80
        assert ds.warnings == ()

    def test_bad_corpus_size(self, tmp_path):
        with pytest.raises(ValidationError):
            generate_corpus(0, SynthSpec.default(), output_dir=tmp_path / "c")

    def test_images_exist_and_load(self, corpus_dir):
        from smeardx.util import load_image

        records = parse_annotations(corpus_dir / "annotations.json")
        image = load_image(corpus_dir / records[0].image_path)
        assert image.shape == (records[0].height, records[0].width, 3)
