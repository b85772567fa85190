"""smeardx: two-stage malaria blood-smear analysis.

Layer 1 finds infected cells on a slide; Layer 2 crops each hit, embeds it
as a 2048-entry feature vector, and assigns one of four parasite stages
(gametocyte, ring, schizont, trophozoite). Includes detection metrics
(IoU / matching / AP / mAP), a one-stage multiclass baseline for comparison,
and a deterministic synthetic slide generator so the whole pipeline is
testable on CPU.
"""

from .errors import (
    AnnotationParseError,
    CapacityError,
    ConfigurationError,
    SmearError,
    ValidationError,
)
from .ingest import (
    CATEGORIES,
    INFECTED,
    STAGE_CLASSES,
    UNINFECTED,
    BoundingBox,
    CellAnnotation,
    ClassifierDataset,
    CropRef,
    SlideRecord,
    balanced_subset,
    collect_stage_crops,
    map_taxonomy,
    parse_annotations,
    resolve_image_path,
    stratified_split,
    write_annotations,
)
from .metrics import (
    ClassificationReport,
    DetectionEvaluation,
    MatchResult,
    average_precision,
    classification_report,
    confusion_matrix,
    detection_recall,
    evaluate_detections,
    f1_score,
    iou,
    match_detections,
    mean_average_precision,
    pr_curve,
)
from .detect import (
    Detection,
    DetectorConfig,
    DetectorModel,
    collapse_to_infected,
    detect,
    get_detector_backend,
    load_model,
    nms,
    save_model,
    train_detector,
)
from .classify import (
    CellCrop,
    ClassifierModel,
    ClassifierTrainConfig,
    StagePrediction,
    classify_crop,
    extract_crop,
    extract_features,
    get_feature_backend,
    train_classifier,
)
from .synth import CellStyle, SynthSpec, generate_corpus, generate_slide
from .pipeline import (
    DetectionEntry,
    PipelineConfig,
    SlideReport,
    run_experiment,
    run_one_stage,
    run_two_stage,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotationParseError",
    "CapacityError",
    "ConfigurationError",
    "SmearError",
    "ValidationError",
    "CATEGORIES",
    "INFECTED",
    "STAGE_CLASSES",
    "UNINFECTED",
    "BoundingBox",
    "CellAnnotation",
    "ClassifierDataset",
    "CropRef",
    "SlideRecord",
    "balanced_subset",
    "collect_stage_crops",
    "map_taxonomy",
    "parse_annotations",
    "resolve_image_path",
    "stratified_split",
    "write_annotations",
    "ClassificationReport",
    "DetectionEvaluation",
    "MatchResult",
    "average_precision",
    "classification_report",
    "confusion_matrix",
    "detection_recall",
    "evaluate_detections",
    "f1_score",
    "iou",
    "match_detections",
    "mean_average_precision",
    "pr_curve",
    "Detection",
    "DetectorConfig",
    "DetectorModel",
    "collapse_to_infected",
    "detect",
    "get_detector_backend",
    "load_model",
    "nms",
    "save_model",
    "train_detector",
    "CellCrop",
    "ClassifierModel",
    "ClassifierTrainConfig",
    "StagePrediction",
    "classify_crop",
    "extract_crop",
    "extract_features",
    "get_feature_backend",
    "train_classifier",
    "CellStyle",
    "SynthSpec",
    "generate_corpus",
    "generate_slide",
    "DetectionEntry",
    "PipelineConfig",
    "SlideReport",
    "run_experiment",
    "run_one_stage",
    "run_two_stage",
    "__version__",
]
