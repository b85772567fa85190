"""Release gates for the toolkit, one test per gate.

Each gate prints a single [PASS]/[FAIL] verdict line straight to the terminal
(bypassing capture) so a full run shows every gate at a glance, and asserts
its stated tolerance so pytest fails loudly when a gate regresses.

  1. iou / matching / average precision agree with independent oracles
  2. classification-report aggregate identities plus reference F1 roundings
  3. balancing and split arithmetic (cap 140 -> 560 -> 504/56), seeded rerun
  4. bulk suppression invariants and detect-output hygiene
  5. synthetic end-to-end: both pipeline modes score >= 0.95 held out
  6. gradient correctness, softmax normalization, zero-weight tie-break
  7. byte-identical JSON artifacts across identical experiment reruns
"""

import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

from smeardx import (
    STAGE_CLASSES,
    ClassifierModel,
    Detection,
    DetectorConfig,
    PipelineConfig,
    SynthSpec,
    average_precision,
    classification_report,
    classify_crop,
    collapse_to_infected,
    collect_stage_crops,
    balanced_subset,
    detect,
    f1_score,
    generate_corpus,
    iou,
    match_detections,
    nms,
    parse_annotations,
    resolve_image_path,
    run_experiment,
    stratified_split,
    train_detector,
)
from smeardx.classify import LAYER_SIZES, init_mlp_params, mlp_forward
from smeardx.util import load_image, stable_dumps

from oracles import (
    ap_staircase_oracle,
    gradient_check_oracle,
    greedy_match_oracle,
    iou_pixel_oracle,
    random_box,
    random_scenario,
)


def _verdict(capsys, gate: int, title: str, problems: list[str], detail: str) -> None:
    status = "PASS" if not problems else "FAIL"
    with capsys.disabled():
        print(f"\n[{status}] gate {gate} {title}: {detail}")
    assert not problems, f"gate {gate} ({title}): " + " | ".join(problems[:8])


@pytest.fixture(scope="module")
def corpus200(tmp_path_factory):
    """200-slide seed-fixed corpus plus the seconds spent generating it."""
    root = tmp_path_factory.mktemp("acceptance_corpus") / "corpus"
    started = time.perf_counter()
    generate_corpus(200, SynthSpec.default(), seed=2026, output_dir=root)
    return root, time.perf_counter() - started


@pytest.fixture(scope="module")
def e2e_run(corpus200, tmp_path_factory):
    """Compare-mode experiment over the 200-slide corpus, timed end to end."""
    corpus_dir, gen_seconds = corpus200
    out = tmp_path_factory.mktemp("acceptance_run")
    config = PipelineConfig.from_dict(
        {
            "annotations": str(corpus_dir / "annotations.json"),
            "output_dir": str(out / "run_a"),
        }
    )
    started = time.perf_counter()
    summary = run_experiment(config, "compare")
    return config, summary, gen_seconds + (time.perf_counter() - started)


def test_gate_1_metric_oracle_equivalence(capsys):
    rng = np.random.default_rng(20260816)
    problems: list[str] = []
    n_scenarios = 120
    worst_ap = 0.0
    started = time.perf_counter()
    for case in range(n_scenarios):
        dets, gts, threshold = random_scenario(rng)
        for d in dets:
            for g in gts:
                if iou(d.bbox, g) != iou_pixel_oracle(d.bbox, g):
                    problems.append(f"case {case}: iou != pixel enumeration")
        result = match_detections(dets, gts, threshold)
        is_tp, matched, taken = greedy_match_oracle(dets, gts, threshold)
        if (
            list(result.det_is_tp) != is_tp
            or list(result.det_matched_gt) != matched
            or list(result.gt_matched) != taken
        ):
            problems.append(f"case {case}: matching diverged from greedy oracle")
        delta = abs(average_precision(dets, gts, threshold) - ap_staircase_oracle(dets, gts, threshold))
        worst_ap = max(worst_ap, delta)
        if delta > 1e-9:
            problems.append(f"case {case}: AP off by {delta:.3e}")
    seconds = time.perf_counter() - started
    if seconds >= 10.0:
        problems.append(f"runtime {seconds:.1f}s exceeds 10s")
    _verdict(
        capsys,
        1,
        "metric oracle equivalence",
        problems,
        f"{n_scenarios} scenarios exact, worst AP delta {worst_ap:.1e} <= 1e-9, {seconds:.1f}s < 10s",
    )


def test_gate_2_report_identities(capsys):
    rng = np.random.default_rng(708)
    problems: list[str] = []
    n_sets = 120
    for case in range(n_sets):
        n = int(rng.integers(5, 80))
        # Sometimes restrict labels to a prefix of the classes so empty rows
        # and zero-support divisions get exercised.
        width = int(rng.integers(2, len(STAGE_CLASSES) + 1))
        truths = [STAGE_CLASSES[i] for i in rng.integers(0, width, size=n)]
        preds = [STAGE_CLASSES[i] for i in rng.integers(0, width, size=n)]
        report = classification_report(truths, preds)
        if report.weighted_avg[1] != report.accuracy:
            problems.append(f"case {case}: weighted recall != accuracy")
        macro_f1 = sum(m.f1 for m in report.per_class) / len(report.per_class)
        if abs(report.macro_avg[2] - macro_f1) > 1e-12:
            problems.append(f"case {case}: macro f1 off mean by > 1e-12")
    ring_like = f1_score(0.91, 0.77)
    if f"{ring_like:.2f}" != "0.83":
        problems.append(f"f1(0.91, 0.77) renders {ring_like:.2f}, wanted 0.83")
    equal_case = f1_score(0.87, 0.87)
    if abs(equal_case - 0.87) > 1e-15 or f"{equal_case:.2f}" != "0.87":
        problems.append(f"f1(0.87, 0.87) = {equal_case!r}, wanted exactly 0.87")
    _verdict(
        capsys,
        2,
        "classification-report identities",
        problems,
        f"{n_sets} sets: weighted recall == accuracy, macro f1 within 1e-12; "
        "f1 anchors 0.83 / 0.87",
    )


def _dataset_bytes(ds) -> bytes:
    payload = {
        "sidecar": ds.sidecar(),
        "items": [
            {
                "image_id": it.image_id,
                "image_path": it.image_path,
                "bbox": [it.bbox.min_row, it.bbox.min_col, it.bbox.max_row, it.bbox.max_col],
                "stage": it.stage,
            }
            for it in ds.items
        ],
    }
    return stable_dumps(payload).encode()


def test_gate_3_dataset_protocol(capsys, corpus200):
    corpus_dir, _ = corpus200
    problems: list[str] = []

    def one_pass():
        records = parse_annotations(corpus_dir / "annotations.json")
        crops = collect_stage_crops(records)
        balanced = balanced_subset(crops, 140, seed=5)
        train, test = stratified_split(balanced, 0.9, seed=6)
        return balanced, train, test

    balanced, train, test = one_pass()
    if len(balanced.items) != 560:
        problems.append(f"balanced subset has {len(balanced.items)} items, wanted 560")
    if (len(train.items), len(test.items)) != (504, 56):
        problems.append(f"split sizes {len(train.items)}/{len(test.items)}, wanted 504/56")
    for stage in STAGE_CLASSES:
        triple = (
            balanced.per_class_counts[stage],
            train.per_class_counts[stage],
            test.per_class_counts[stage],
        )
        if triple != (140, 126, 14):
            problems.append(f"{stage}: per-class counts {triple}, wanted (140, 126, 14)")

    rerun = one_pass()
    for name, first, second in zip(("balanced", "train", "test"), (balanced, train, test), rerun):
        if _dataset_bytes(first) != _dataset_bytes(second):
            problems.append(f"{name} dataset not byte-identical on seeded rerun")
    _verdict(
        capsys,
        3,
        "dataset protocol",
        problems,
        "cap 140 -> 560 items -> 504/56 (126/14 per class), seeded rerun byte-identical",
    )


def test_gate_4_suppression_and_detect_hygiene(capsys, tmp_path):
    rng = np.random.default_rng(41)
    problems: list[str] = []
    n_sets = 1000
    started = time.perf_counter()
    for case in range(n_sets):
        n = int(rng.integers(0, 13))
        coarse = bool(rng.integers(0, 2))
        dets = [
            Detection(
                bbox=random_box(rng, 24),
                score=float(rng.integers(0, 11)) / 10.0 if coarse else float(rng.random()),
                label="infected",
            )
            for _ in range(n)
        ]
        threshold = float(rng.choice([0.1, 0.25, 0.5, 0.75]))
        kept = nms(dets, threshold)
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                if iou(kept[i].bbox, kept[j].bbox) > threshold:
                    problems.append(f"case {case}: surviving pair exceeds IoU threshold")
        if nms(kept, threshold) != kept:
            problems.append(f"case {case}: suppression is not idempotent")

    corpus_dir = tmp_path / "corpus"
    generate_corpus(12, SynthSpec.default(), seed=99, output_dir=corpus_dir)
    records = collapse_to_infected(parse_annotations(corpus_dir / "annotations.json"))
    config = DetectorConfig()
    model = train_detector(records, config, backend="blob", images_root=corpus_dir)
    for rec in records[:5]:
        image = load_image(resolve_image_path(rec.image_path, corpus_dir))
        height, width = image.shape[:2]
        found = detect(model, image, config)
        scores = [d.score for d in found]
        if scores != sorted(scores, reverse=True):
            problems.append(f"{rec.image_id}: detections not score-sorted")
        for d in found:
            inside = (
                0 <= d.bbox.min_row < d.bbox.max_row <= height
                and 0 <= d.bbox.min_col < d.bbox.max_col <= width
            )
            if not inside or d.bbox.clip(height, width) != d.bbox:
                problems.append(f"{rec.image_id}: detection box not clipped to bounds")
    seconds = time.perf_counter() - started
    if seconds >= 30.0:
        problems.append(f"runtime {seconds:.1f}s exceeds 30s")
    _verdict(
        capsys,
        4,
        "suppression and detect hygiene",
        problems,
        f"{n_sets} random sets clean + idempotent; detect sorted and clipped; "
        f"{seconds:.1f}s < 30s",
    )


def test_gate_5_synthetic_end_to_end(capsys, e2e_run):
    config, summary, seconds = e2e_run
    problems: list[str] = []
    if summary["status"] != "complete":
        problems.append(f"experiment status {summary['status']!r}")
    two = summary["metrics"]["two_stage"]
    if two["map"] < 0.95:
        problems.append(f"two-stage mAP@0.5 {two['map']:.3f} < 0.95")
    if two["classification_accuracy"] < 0.95:
        problems.append(f"held-out stage accuracy {two['classification_accuracy']:.3f} < 0.95")
    e2e_acc = two["e2e"]["stage_accuracy"]
    if e2e_acc is None or e2e_acc < 0.95:
        problems.append(f"end-to-end stage accuracy {e2e_acc} < 0.95")
    if "one_stage" not in summary["metrics"]:
        problems.append("one-stage baseline missing from compare run")
    table = Path(config.output_dir) / "compare.txt"
    if not table.exists():
        problems.append("compare.txt not emitted")
    else:
        text = table.read_text()
        for needle in ("two_stage", "one_stage", "mAP"):
            if needle not in text:
                problems.append(f"compare table missing {needle!r}")
    if seconds >= 300.0:
        problems.append(f"runtime {seconds:.0f}s exceeds 300s")
    detail = (
        f"200 slides: mAP {two['map']:.3f}, stage acc {two['classification_accuracy']:.3f}, "
        f"e2e {e2e_acc if e2e_acc is None else format(e2e_acc, '.3f')}, "
        f"baseline + table emitted, {seconds:.0f}s < 300s"
    )
    _verdict(capsys, 5, "synthetic end-to-end", problems, detail)


def test_gate_6_classifier_numerics(capsys):
    problems: list[str] = []
    worst = max(gradient_check_oracle((12, 9, 7, 5, 4), seed) for seed in range(5))
    if worst >= 1e-4:
        problems.append(f"gradient relative error {worst:.3e} >= 1e-4")

    rng = np.random.default_rng(17)
    worst_sum = 0.0
    for sizes in ((6, 5, 4, 4, 4), (30, 16, 8, 6, 4), LAYER_SIZES):
        weights, biases = init_mlp_params(sizes, rng)
        x = rng.standard_normal((16, sizes[0]))
        probs, _ = mlp_forward(weights, biases, x)
        worst_sum = max(worst_sum, float(np.abs(probs.sum(axis=1) - 1.0).max()))
        if (probs < 0).any():
            problems.append(f"negative probability from sizes {sizes}")
    if worst_sum > 1e-6:
        problems.append(f"softmax row sum off by {worst_sum:.3e} > 1e-6")

    zero_model = ClassifierModel.zeros()
    for vector in (np.zeros(2048), rng.standard_normal(2048)):
        pred = classify_crop(zero_model, vector)
        if pred.probabilities != (0.25, 0.25, 0.25, 0.25):
            problems.append(f"zero-weight probabilities {pred.probabilities}")
        if pred.predicted != STAGE_CLASSES[0]:
            problems.append(f"zero-weight tie-break chose {pred.predicted!r}")
    _verdict(
        capsys,
        6,
        "classifier numerics",
        problems,
        f"gradient rel err {worst:.1e} < 1e-4, softmax sums within {worst_sum:.1e}, "
        "zero weights -> exact uniform + first-class tie-break",
    )


def _json_artifacts(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.json"))}


def test_gate_7_reproducibility(capsys, e2e_run, tmp_path):
    config_a, _, _ = e2e_run
    config_b = dataclasses.replace(config_a, output_dir=str(tmp_path / "run_b"))
    run_experiment(config_b, "compare")
    first = _json_artifacts(Path(config_a.output_dir))
    second = _json_artifacts(Path(config_b.output_dir))
    problems: list[str] = []
    if set(first) != set(second):
        problems.append(
            f"artifact sets differ: {sorted(set(first) ^ set(second))}"
        )
    differing = [name for name in first if name in second and first[name] != second[name]]
    if differing:
        problems.append(f"artifacts not byte-identical: {differing}")
    _verdict(
        capsys,
        7,
        "reproducibility",
        problems,
        f"{len(first)} JSON artifacts byte-identical across identical reruns",
    )
