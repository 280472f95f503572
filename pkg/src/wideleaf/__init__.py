"""wideleaf: wide-angle leaf diagnosis pipelines and IoU-matched evaluation.

Two composable strategies over pluggable detector/diagnoser stages
(end-to-end vs detect-then-diagnose), dataset preparation with seeded
splits and crop extraction, greedy IoU>=0.5 matching with per-class
precision/recall/F1 reporting, synthetic corruption stages for closed-loop
benchmarks, and a line-delimited subprocess protocol for real models.
"""

from ._native import kernel_backend
from .dataset import (
    AnnotatedLeaf,
    ClassCounts,
    CropRecord,
    DatasetManifest,
    LeafLabel,
    Scene,
    TrainingProvenance,
    augment_crop,
    extract_crops,
    load_manifest,
    merge_crop_sets,
    resize_scene,
    save_manifest,
    split_dataset,
)
from .evaluation import (
    ClassMetrics,
    EvalReport,
    MatchConfig,
    MatchResult,
    average_f1,
    brute_force_match,
    evaluate,
    match,
    render_report,
)
from .geometry import BoundingBox, ImageSize, area, clip, iou, rescale
from .pipeline import (
    Detection,
    PipelineConfig,
    nms,
    run_end_to_end,
    run_over_manifest,
    run_two_stage,
)
from .protocol import ModelEndpoint
from .synthetic import (
    SyntheticDetectorParams,
    SyntheticDiagnoserParams,
    run_shift_experiment,
    synth_detect,
    synth_diagnose,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotatedLeaf",
    "BoundingBox",
    "ClassCounts",
    "ClassMetrics",
    "CropRecord",
    "DatasetManifest",
    "Detection",
    "EvalReport",
    "ImageSize",
    "LeafLabel",
    "MatchConfig",
    "MatchResult",
    "ModelEndpoint",
    "PipelineConfig",
    "Scene",
    "SyntheticDetectorParams",
    "SyntheticDiagnoserParams",
    "TrainingProvenance",
    "area",
    "augment_crop",
    "average_f1",
    "brute_force_match",
    "clip",
    "evaluate",
    "extract_crops",
    "iou",
    "kernel_backend",
    "load_manifest",
    "match",
    "merge_crop_sets",
    "nms",
    "render_report",
    "rescale",
    "resize_scene",
    "run_end_to_end",
    "run_over_manifest",
    "run_shift_experiment",
    "run_two_stage",
    "save_manifest",
    "split_dataset",
    "synth_detect",
    "synth_diagnose",
    "__version__",
]
