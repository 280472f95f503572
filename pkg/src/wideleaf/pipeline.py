"""The two diagnosis strategies over pluggable stages.

End-to-end: one detector emits labeled boxes. Two-stage: a class-agnostic
leaf detector, then a per-leaf diagnoser over crops cut from the
original-resolution scene. Both share confidence filtering and greedy NMS.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from . import jsonio
from ._native import nms_keep
from .dataset import DatasetManifest, LeafLabel, Scene, TrainingProvenance, resize_target
from .geometry import BoundingBox, GeometryError, ImageSize, boxes_to_array, clip, rescale
from .raster import crop_resample

log = logging.getLogger(__name__)

PREDICTIONS_FORMAT_VERSION = 1

RESIZE_NATIVE = "native"

PIPELINE_END_TO_END = "end_to_end"
PIPELINE_TWO_STAGE = "two_stage"


class PipelineError(RuntimeError):
    """Stage or configuration failure, annotated with the scene id."""


@dataclass(frozen=True, slots=True)
class Detection:
    box: BoundingBox
    confidence: float
    label: LeafLabel | None = None
    # Provenance of replayed boxes (gold leaf_id or a spurious marker); never
    # serialized, used by synthetic stages to keep crop/gold correspondence.
    source_id: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


@dataclass(frozen=True, slots=True)
class Crop:
    """What a diagnoser sees for one surviving detection."""

    scene_id: str
    box: BoundingBox
    pixels: np.ndarray | None
    source_id: str | None
    true_label: LeafLabel | None


@runtime_checkable
class DetectorStage(Protocol):
    emits_labels: bool

    def detect(self, scene: Scene, frame: ImageSize) -> list[Detection]:
        """Boxes in `frame` coordinates for the scene's image."""
        ...


@runtime_checkable
class DiagnoserStage(Protocol):
    def diagnose(self, crop: Crop) -> tuple[LeafLabel, float]:
        ...


@dataclass(frozen=True, slots=True)
class PipelineConfig:
    confidence_threshold: float = 0.5
    nms_iou_threshold: float = 0.45
    resize_policy: str = RESIZE_NATIVE
    crop_size: ImageSize = ImageSize(224, 224)

    def __post_init__(self):
        if not 0.0 < self.confidence_threshold < 1.0:
            raise PipelineError(f"confidence_threshold must be in (0, 1), got {self.confidence_threshold}")
        if not 0.0 < self.nms_iou_threshold < 1.0:
            raise PipelineError(f"nms_iou_threshold must be in (0, 1), got {self.nms_iou_threshold}")


def detector_frame(scene_size: ImageSize, policy: str) -> ImageSize:
    if policy == RESIZE_NATIVE:
        return scene_size
    return resize_target(scene_size, policy)


def nms(detections: Sequence[Detection], iou_threshold: float,
        per_label: bool = False) -> list[Detection]:
    """Greedy suppression, highest confidence first (ties: larger area, then
    input order). Per-label groups when `per_label`, one global group otherwise.
    Output keeps the priority order."""
    if not 0.0 < iou_threshold < 1.0:
        raise PipelineError(f"nms iou_threshold must be in (0, 1), got {iou_threshold}")
    if not detections:
        return []
    order = sorted(
        range(len(detections)),
        key=lambda i: (-detections[i].confidence,
                       -detections[i].box.width * detections[i].box.height,
                       i),
    )
    groups: dict[object, list[int]] = {}
    for rank, idx in enumerate(order):
        key = detections[idx].label if per_label else None
        groups.setdefault(key, []).append(rank)
    kept_ranks: list[int] = []
    for ranks in groups.values():
        boxes = boxes_to_array([detections[order[r]].box for r in ranks])
        for k in nms_keep(boxes, iou_threshold):
            kept_ranks.append(ranks[int(k)])
    kept_ranks.sort()
    return [detections[order[r]] for r in kept_ranks]


def _to_scene_frame(detections: Sequence[Detection], frame: ImageSize,
                    scene: Scene) -> list[Detection]:
    out = []
    for det in detections:
        box = rescale(det.box, frame, scene.size)
        clipped = clip(box, scene.size)
        if clipped is None:
            log.warning("scene %s: detection fell outside the image after rescaling; dropped",
                        scene.scene_id)
            continue
        out.append(replace(det, box=clipped))
    return out


def _detect_filtered(scene: Scene, detector: DetectorStage,
                     cfg: PipelineConfig) -> tuple[list[Detection], ImageSize]:
    frame = detector_frame(scene.size, cfg.resize_policy)
    try:
        raw = detector.detect(scene, frame)
    except Exception as exc:
        raise PipelineError(f"detector failed on scene '{scene.scene_id}': {exc}") from exc
    kept = [d for d in raw if d.confidence >= cfg.confidence_threshold]
    return kept, frame


def run_end_to_end(scene: Scene, detector: DetectorStage,
                   cfg: PipelineConfig) -> list[Detection]:
    """Labeled detections in original scene coordinates."""
    if not detector.emits_labels:
        raise PipelineError("end-to-end pipeline needs a detector that emits labels")
    kept, frame = _detect_filtered(scene, detector, cfg)
    kept = nms(kept, cfg.nms_iou_threshold, per_label=True)
    return _to_scene_frame(kept, frame, scene)


def run_two_stage(scene: Scene, detector: DetectorStage, diagnoser: DiagnoserStage,
                  cfg: PipelineConfig, *, scene_pixels: np.ndarray | None = None) -> list[Detection]:
    """Class-agnostic detection, then per-crop diagnosis.

    Crops are cut from the original-resolution scene when `scene_pixels` is
    given. A diagnoser failure drops that detection and continues.
    """
    kept, frame = _detect_filtered(scene, detector, cfg)
    kept = [replace(d, label=None) for d in kept]
    kept = nms(kept, cfg.nms_iou_threshold, per_label=False)
    kept = _to_scene_frame(kept, frame, scene)
    gold = scene.leaf_map()
    out: list[Detection] = []
    for det in kept:
        pixels = None
        if scene_pixels is not None:
            try:
                pixels = crop_resample(scene_pixels, det.box, cfg.crop_size)
            except Exception as exc:
                log.warning("scene %s: crop failed (%s); detection dropped", scene.scene_id, exc)
                continue
        true_label = None
        if det.source_id is not None and det.source_id in gold:
            true_label = gold[det.source_id].label
        crop = Crop(scene_id=scene.scene_id, box=det.box, pixels=pixels,
                    source_id=det.source_id, true_label=true_label)
        try:
            label, confidence = diagnoser.diagnose(crop)
        except Exception as exc:
            log.warning("scene %s: diagnoser failed (%s); detection dropped", scene.scene_id, exc)
            continue
        out.append(replace(det, label=label, confidence=confidence))
    return out


def run_over_manifest(manifest: DatasetManifest, kind: str, detector: DetectorStage,
                      diagnoser: DiagnoserStage | None = None,
                      cfg: PipelineConfig = PipelineConfig(), *,
                      workers: int = 1,
                      pixels_loader=None,
                      failures: dict[str, str] | None = None) -> dict[str, list[Detection]]:
    """Run one pipeline over every scene; results keyed by scene_id.

    Scene results are independent, so any worker count produces identical
    output. `pixels_loader(scene)` supplies the original-resolution raster
    for two-stage crops when a pixel diagnoser is in play. With a `failures`
    dict the batch keeps going past per-scene errors and records them there;
    without one the first error propagates.
    """
    if kind == PIPELINE_TWO_STAGE and diagnoser is None:
        raise PipelineError("two-stage pipeline needs a diagnoser")
    if kind not in (PIPELINE_END_TO_END, PIPELINE_TWO_STAGE):
        raise PipelineError(f"unknown pipeline kind {kind!r}")

    def one(scene: Scene) -> list[Detection]:
        if kind == PIPELINE_END_TO_END:
            return run_end_to_end(scene, detector, cfg)
        pixels = pixels_loader(scene) if pixels_loader is not None else None
        return run_two_stage(scene, detector, diagnoser, cfg, scene_pixels=pixels)

    def guarded(scene: Scene) -> list[Detection]:
        if failures is None:
            return one(scene)
        try:
            return one(scene)
        except Exception as exc:
            failures[scene.scene_id] = str(exc)
            return []

    if workers <= 1:
        return {scene.scene_id: guarded(scene) for scene in manifest.scenes}
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {scene.scene_id: pool.submit(guarded, scene) for scene in manifest.scenes}
        return {scene_id: fut.result() for scene_id, fut in futures.items()}


# ---------------------------------------------------------------------------
# Stage helpers


@dataclass(frozen=True, slots=True)
class ConstantDiagnoser:
    """Labels every crop the same way; useful as a degenerate baseline."""

    label: LeafLabel
    confidence: float = 1.0

    def diagnose(self, crop: Crop) -> tuple[LeafLabel, float]:
        return (self.label, self.confidence)


# ---------------------------------------------------------------------------
# Prediction files


def detections_to_dicts(detections: Sequence[Detection]) -> list[dict]:
    return [
        {
            "x_min": d.box.x_min,
            "y_min": d.box.y_min,
            "x_max": d.box.x_max,
            "y_max": d.box.y_max,
            "label": d.label.value if d.label is not None else None,
            "confidence": d.confidence,
        }
        for d in detections
    ]


def predictions_to_dict(system: str, pipeline_kind: str, cfg: PipelineConfig,
                        manifest: DatasetManifest,
                        per_scene: Mapping[str, Sequence[Detection]],
                        *, stages: Mapping[str, str] | None = None,
                        seed: int | None = None,
                        provenance: TrainingProvenance | None = None) -> dict:
    return {
        "format_version": PREDICTIONS_FORMAT_VERSION,
        "run": {
            "system": system,
            "pipeline": pipeline_kind,
            "manifest": manifest.name,
            "config": {
                "confidence_threshold": cfg.confidence_threshold,
                "nms_iou_threshold": cfg.nms_iou_threshold,
                "resize_policy": cfg.resize_policy,
                "crop_size": [cfg.crop_size.width, cfg.crop_size.height],
            },
            "stages": dict(stages or {}),
            "seed": seed,
            "provenance": provenance.to_dict() if provenance is not None else None,
        },
        "scenes": [
            {
                "scene_id": scene.scene_id,
                "detections": detections_to_dicts(per_scene.get(scene.scene_id, [])),
            }
            for scene in manifest.scenes
        ],
    }


def _detection_from_dict(data: Mapping, where: str) -> Detection:
    try:
        box = BoundingBox(float(data["x_min"]), float(data["y_min"]),
                          float(data["x_max"]), float(data["y_max"]))
        label = data.get("label")
        return Detection(
            box=box,
            confidence=float(data["confidence"]),
            label=LeafLabel.parse(label) if label is not None else None,
        )
    except (KeyError, TypeError, ValueError, GeometryError) as exc:
        raise PipelineError(f"{where}: invalid detection: {exc}") from None


def predictions_from_dict(data: Mapping, source: str = "<memory>") -> tuple[dict, dict[str, list[Detection]]]:
    """Returns (run header, detections keyed by scene_id)."""
    if data.get("format_version") != PREDICTIONS_FORMAT_VERSION:
        raise PipelineError(f"{source}: unsupported predictions format_version "
                            f"{data.get('format_version')!r}")
    header = data.get("run")
    if not isinstance(header, Mapping):
        raise PipelineError(f"{source}: missing run header")
    per_scene: dict[str, list[Detection]] = {}
    for i, entry in enumerate(data.get("scenes", [])):
        scene_id = entry.get("scene_id")
        if not isinstance(scene_id, str):
            raise PipelineError(f"{source}: scenes[{i}] missing scene_id")
        if scene_id in per_scene:
            raise PipelineError(f"{source}: duplicate scene_id '{scene_id}' in predictions")
        per_scene[scene_id] = [
            _detection_from_dict(d, f"{source}: scene '{scene_id}' detection[{j}]")
            for j, d in enumerate(entry.get("detections", []))
        ]
    return dict(header), per_scene


def save_predictions(path, payload: dict) -> None:
    jsonio.write_json(path, payload)


def load_predictions(path) -> tuple[dict, dict[str, list[Detection]]]:
    return predictions_from_dict(jsonio.read_json(path), source=str(path))
