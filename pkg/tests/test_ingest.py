import json
import math
import os
from pathlib import Path

import pytest

from smeardx import (
    STAGE_CLASSES,
    AnnotationParseError,
    BoundingBox,
    CellAnnotation,
    CropRef,
    SlideRecord,
    ValidationError,
    balanced_subset,
    map_taxonomy,
    parse_annotations,
    stratified_split,
    write_annotations,
)


def entry(pathname="images/a.png", r=100, c=120, objects=()):
    return {
        "image": {"pathname": pathname, "shape": {"r": r, "c": c, "channels": 3}},
        "objects": list(objects),
    }


def obj(category, min_r, min_c, max_r, max_c):
    return {
        "category": category,
        "bounding_box": {
            "minimum": {"r": min_r, "c": min_c},
            "maximum": {"r": max_r, "c": max_c},
        },
    }


def write(tmp_path, data, name="ann.json") -> Path:
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


class TestBoundingBox:
    def test_valid(self):
        b = BoundingBox(1, 2, 4, 7)
        assert (b.height, b.width, b.area) == (3, 5, 15)

    @pytest.mark.parametrize(
        "coords", [(5, 0, 5, 4), (6, 0, 5, 4), (0, 3, 4, 3), (-1, 0, 4, 4), (0, -2, 4, 4)]
    )
    def test_invalid(self, coords):
        with pytest.raises(ValidationError):
            BoundingBox(*coords)

    def test_clip_inside_is_identity(self):
        b = BoundingBox(1, 2, 4, 7)
        assert b.clip(100, 100) == b

    def test_clip_partial(self):
        b = BoundingBox(90, 95, 120, 130)
        assert b.clip(100, 100) == BoundingBox(90, 95, 100, 100)

    def test_clip_outside_is_none(self):
        assert BoundingBox(50, 50, 60, 60).clip(40, 40) is None

    def test_dict_round_trip(self):
        b = BoundingBox(3, 1, 9, 8)
        assert BoundingBox.from_dict(b.to_dict()) == b


class TestTaxonomy:
    def test_ring_is_infected(self):
        assert map_taxonomy("ring") == ("infected", "ring")

    def test_rbc_is_uninfected(self):
        assert map_taxonomy("red_blood_cell") == ("uninfected", None)

    def test_difficult_is_excluded(self):
        assert map_taxonomy("difficult") == (None, None)

    def test_total_over_all_categories(self):
        for cat in ("gametocyte", "ring", "trophozoite", "schizont"):
            assert map_taxonomy(cat) == ("infected", cat)
        assert map_taxonomy("leukocyte") == ("uninfected", None)

    def test_unknown_rejected(self):
        with pytest.raises(ValidationError):
            map_taxonomy("platelet")

    def test_pure(self):
        assert map_taxonomy("schizont") == map_taxonomy("schizont")


class TestParseAnnotations:
    def test_one_image_zero_objects(self, tmp_path):
        records = parse_annotations(write(tmp_path, [entry()]))
        assert len(records) == 1
        assert records[0].annotations == ()
        assert records[0].image_id == "a"
        assert (records[0].height, records[0].width) == (100, 120)

    def test_inverted_box_names_entry_index(self, tmp_path):
        data = [entry(objects=[obj("ring", 10, 10, 5, 20)])]
        with pytest.raises(ValidationError, match="entry 0"):
            parse_annotations(write(tmp_path, data))

    def test_missing_field_named(self, tmp_path):
        bad = {"image": {"pathname": "x.png"}, "objects": []}
        with pytest.raises(AnnotationParseError, match="shape"):
            parse_annotations(write(tmp_path, [bad]))

    def test_missing_file_is_io_error(self, tmp_path):
        with pytest.raises(OSError):
            parse_annotations(tmp_path / "nope.json")

    def test_unknown_category_rejected(self, tmp_path):
        data = [entry(objects=[obj("platelet", 0, 0, 5, 5)])]
        with pytest.raises(ValidationError, match="platelet"):
            parse_annotations(write(tmp_path, data))

    def test_bbox_outside_image_rejected(self, tmp_path):
        data = [entry(r=50, c=50, objects=[obj("ring", 0, 0, 60, 10)])]
        with pytest.raises((AnnotationParseError, ValidationError)):
            parse_annotations(write(tmp_path, data))

    def test_duplicate_image_id_rejected(self, tmp_path):
        data = [entry("x/a.png"), entry("y/a.png")]
        with pytest.raises(AnnotationParseError, match="duplicate"):
            parse_annotations(write(tmp_path, data))

    def test_extra_fields_ignored(self, tmp_path):
        data = [entry(objects=[obj("ring", 0, 0, 5, 5)])]
        data[0]["extra"] = {"noise": 1}
        data[0]["objects"][0]["confidence"] = 0.5
        records = parse_annotations(write(tmp_path, data))
        assert records[0].annotations[0].category == "ring"

    def test_order_preserved_and_counts_match(self, tmp_path):
        objects = [
            obj("ring", 0, 0, 5, 5),
            obj("red_blood_cell", 10, 10, 20, 20),
            obj("schizont", 30, 30, 40, 40),
        ]
        records = parse_annotations(write(tmp_path, [entry(objects=objects)]))
        cats = [a.category for a in records[0].annotations]
        assert cats == ["ring", "red_blood_cell", "schizont"]
        assert sum(len(r.annotations) for r in records) == len(objects)

    def test_round_trip(self, tmp_path):
        data = [
            entry("images/a.png", objects=[obj("ring", 0, 0, 5, 5)]),
            entry("images/b.png", objects=[obj("difficult", 2, 3, 9, 9)]),
        ]
        first = parse_annotations(write(tmp_path, data))
        write_annotations(first, tmp_path / "copy.json")
        second = parse_annotations(tmp_path / "copy.json")
        assert first == second

    @pytest.mark.skipif(
        "SMEARDX_BBBC041_ANNOTATIONS" not in os.environ,
        reason="full thin-smear dataset not available in this environment",
    )
    def test_full_dataset_record_count(self):
        records = parse_annotations(os.environ["SMEARDX_BBBC041_ANNOTATIONS"])
        assert len(records) == 1364


def make_crops(counts: dict) -> list[CropRef]:
    crops = []
    for stage, n in counts.items():
        for k in range(n):
            crops.append(
                CropRef(
                    image_id=f"{stage}_{k}",
                    image_path=f"images/{stage}_{k}.png",
                    bbox=BoundingBox(0, 0, 10, 10),
                    stage=stage,
                )
            )
    return crops


class TestBalancedSubset:
    def test_cap_forces_counts(self):
        crops = make_crops(
            {"gametocyte": 200, "ring": 150, "schizont": 141, "trophozoite": 140}
        )
        ds = balanced_subset(crops, 140, seed=1)
        assert ds.per_class_counts == {s: 140 for s in STAGE_CLASSES}
        assert len(ds.items) == 560

    def test_short_class_kept_with_warning(self):
        crops = make_crops(
            {"gametocyte": 100, "ring": 200, "schizont": 200, "trophozoite": 200}
        )
        ds = balanced_subset(crops, 140, seed=1)
        assert ds.per_class_counts == {
            "gametocyte": 100,
            "ring": 140,
            "schizont": 140,
            "trophozoite": 140,
        }
        assert any("gametocyte" in w for w in ds.warnings)

    def test_deterministic(self):
        crops = make_crops({s: 50 for s in STAGE_CLASSES})
        a = balanced_subset(crops, 20, seed=7)
        b = balanced_subset(crops, 20, seed=7)
        assert a.items == b.items

    def test_never_exceeds_cap_and_subset_of_input(self):
        crops = make_crops({"gametocyte": 33, "ring": 5, "schizont": 0, "trophozoite": 21})
        ds = balanced_subset(crops, 10, seed=3)
        pool = set(crops)
        for stage in STAGE_CLASSES:
            assert ds.per_class_counts[stage] <= 10
        assert all(item in pool for item in ds.items)
        assert any("schizont" in w for w in ds.warnings)

    def test_empty_input_rejected(self):
        with pytest.raises(ValidationError):
            balanced_subset([], 10)

    def test_bad_cap_rejected(self):
        with pytest.raises(ValidationError):
            balanced_subset(make_crops({"ring": 3}), 0)


class TestStratifiedSplit:
    def test_protocol_arithmetic(self):
        ds = balanced_subset(make_crops({s: 140 for s in STAGE_CLASSES}), 140, seed=0)
        train, test = stratified_split(ds, 0.9, seed=0)
        assert len(train.items) == 504
        assert len(test.items) == 56
        assert train.per_class_counts == {s: 126 for s in STAGE_CLASSES}
        assert test.per_class_counts == {s: 14 for s in STAGE_CLASSES}

    def test_even_split(self):
        ds = balanced_subset(make_crops({s: 10 for s in STAGE_CLASSES}), 10, seed=0)
        train, test = stratified_split(ds, 0.5, seed=0)
        assert train.per_class_counts == {s: 5 for s in STAGE_CLASSES}
        assert test.per_class_counts == {s: 5 for s in STAGE_CLASSES}

    def test_deterministic(self):
        ds = balanced_subset(make_crops({s: 30 for s in STAGE_CLASSES}), 30, seed=2)
        a = stratified_split(ds, 0.8, seed=5)
        b = stratified_split(ds, 0.8, seed=5)
        assert a[0].items == b[0].items and a[1].items == b[1].items

    def test_disjoint_exhaustive(self):
        ds = balanced_subset(make_crops({s: 17 for s in STAGE_CLASSES}), 17, seed=2)
        train, test = stratified_split(ds, 0.7, seed=9)
        got = sorted((i.image_id for i in train.items + test.items))
        assert got == sorted(i.image_id for i in ds.items)
        assert not set(i.image_id for i in train.items) & set(
            i.image_id for i in test.items
        )

    def test_per_class_floor_property(self):
        import numpy as np

        rng = np.random.default_rng(0)
        for _ in range(25):
            counts = {s: int(rng.integers(2, 40)) for s in STAGE_CLASSES}
            fraction = float(rng.uniform(0.05, 0.95))
            ds = balanced_subset(make_crops(counts), 40, seed=1)
            train, _ = stratified_split(ds, fraction, seed=int(rng.integers(1 << 16)))
            for s in STAGE_CLASSES:
                assert train.per_class_counts[s] == math.floor(
                    fraction * counts[s] + 1e-9
                )

    def test_tiny_class_rejected_by_name(self):
        ds = balanced_subset(
            make_crops({"gametocyte": 1, "ring": 5, "schizont": 5, "trophozoite": 5}),
            10,
            seed=0,
        )
        with pytest.raises(ValidationError, match="gametocyte"):
            stratified_split(ds, 0.5, seed=0)

    def test_bad_fraction_rejected(self):
        ds = balanced_subset(make_crops({s: 4 for s in STAGE_CLASSES}), 4, seed=0)
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValidationError):
                stratified_split(ds, bad, seed=0)


class TestRecordInvariants:
    def test_annotation_outside_image_rejected(self):
        with pytest.raises(ValidationError):
            SlideRecord(
                image_id="x",
                image_path="x.png",
                height=50,
                width=50,
                annotations=(CellAnnotation(BoundingBox(0, 0, 60, 10), "ring"),),
            )

    def test_unknown_category_rejected(self):
        with pytest.raises(ValidationError):
            CellAnnotation(BoundingBox(0, 0, 5, 5), "parasite")
