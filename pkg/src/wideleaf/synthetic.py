"""Parametric fake stages: ground-truth replay under controlled corruption.

A synthetic detector drops gold leaves, jitters the survivors and adds
spurious boxes; a synthetic diagnoser flips labels at class-conditional
rates. Together they reproduce, in closed loop, the qualitative contrast
between an in-distribution regime and a domain-shifted one where the
end-to-end strategy's disease labeling collapses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .dataset import DatasetManifest, LeafLabel, Scene
from .evaluation import EvalReport, MatchConfig, evaluate, pct
from .geometry import BoundingBox, ImageSize, clip, rescale
from .pipeline import (
    PIPELINE_END_TO_END,
    PIPELINE_TWO_STAGE,
    Crop,
    Detection,
    PipelineConfig,
    run_over_manifest,
)
from .seeding import rng_stream


class SyntheticModelError(ValueError):
    """Raised for out-of-range corruption parameters."""


@dataclass(frozen=True, slots=True)
class SyntheticDetectorParams:
    miss_rate: float = 0.0
    spurious_rate: float = 0.0          # expected false boxes per scene (Poisson)
    jitter_sigma: float = 0.0           # Gaussian corner noise, pixels
    hit_confidence_lo: float = 0.6      # matched boxes: Uniform[lo, 1]
    spurious_confidence: tuple[float, float] = (0.5, 0.9)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.miss_rate <= 1.0:
            raise SyntheticModelError(f"miss_rate must be in [0, 1], got {self.miss_rate}")
        if self.spurious_rate < 0.0:
            raise SyntheticModelError(f"spurious_rate must be >= 0, got {self.spurious_rate}")
        if self.jitter_sigma < 0.0:
            raise SyntheticModelError(f"jitter_sigma must be >= 0, got {self.jitter_sigma}")
        lo, hi = self.spurious_confidence
        if not (0.0 <= self.hit_confidence_lo <= 1.0 and 0.0 <= lo <= hi <= 1.0):
            raise SyntheticModelError("confidence bounds must satisfy 0 <= lo <= hi <= 1")


@dataclass(frozen=True, slots=True)
class SyntheticDiagnoserParams:
    flip_healthy_to_diseased: float = 0.0
    flip_diseased_to_healthy: float = 0.0
    spurious_prior: LeafLabel = LeafLabel.HEALTHY  # assumed truth for fake boxes
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_healthy_to_diseased", "flip_diseased_to_healthy"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise SyntheticModelError(f"{name} must be in [0, 1], got {rate}")


def manifest_area_range(manifest: DatasetManifest,
                        percentiles: tuple[float, float] = (5.0, 95.0)) -> tuple[float, float] | None:
    """5th..95th percentile of gold leaf areas; None for an empty manifest."""
    areas = [leaf.box.width * leaf.box.height for s in manifest.scenes for leaf in s.leaves]
    if not areas:
        return None
    lo, hi = np.percentile(np.asarray(areas, dtype=np.float64), percentiles)
    return (float(lo), float(hi))


def _jittered(box: BoundingBox, sigma: float, size: ImageSize,
              rng: np.random.Generator) -> BoundingBox:
    noise = rng.normal(0.0, sigma, size=4)
    x0, y0, x1, y1 = (box.x_min + noise[0], box.y_min + noise[1],
                      box.x_max + noise[2], box.y_max + noise[3])
    x0, x1 = min(x0, x1), max(x0, x1)
    y0, y1 = min(y0, y1), max(y0, y1)
    if x0 == x1 or y0 == y1:
        return box
    jittered = clip(BoundingBox(x0, y0, x1, y1), size)
    if jittered is None:
        fallback = clip(box, size)
        return fallback if fallback is not None else box
    return jittered


def synth_detect(scene: Scene, params: SyntheticDetectorParams,
                 area_range: tuple[float, float] | None = None) -> list[Detection]:
    """Replay the scene's gold boxes under the configured corruption.

    Deterministic per (seed, scene_id, leaf_id): each leaf and the spurious
    generator draw from their own hashed streams.
    """
    out: list[Detection] = []
    for leaf in scene.leaves:
        rng = rng_stream("det", params.seed, scene.scene_id, leaf.leaf_id)
        if params.miss_rate > 0.0 and rng.random() < params.miss_rate:
            continue
        box = leaf.box
        if params.jitter_sigma > 0.0:
            box = _jittered(box, params.jitter_sigma, scene.size, rng)
        confidence = rng.uniform(params.hit_confidence_lo, 1.0)
        out.append(Detection(box=box, confidence=float(confidence), label=None,
                             source_id=leaf.leaf_id))
    if params.spurious_rate > 0.0:
        rng = rng_stream("spurious", params.seed, scene.scene_id)
        count = int(rng.poisson(params.spurious_rate))
        if area_range is None:
            image_area = scene.size.width * scene.size.height
            area_range = (0.005 * image_area, 0.05 * image_area)
        lo_area, hi_area = max(area_range[0], 4.0), max(area_range[1], 4.0)
        lo, hi = params.spurious_confidence
        for i in range(count):
            area = math.exp(rng.uniform(math.log(lo_area), math.log(hi_area)))
            aspect = rng.uniform(0.5, 2.0)
            w = min(math.sqrt(area * aspect), scene.size.width * 0.9)
            h = min(area / w, scene.size.height * 0.9)
            x0 = rng.uniform(0.0, scene.size.width - w)
            y0 = rng.uniform(0.0, scene.size.height - h)
            confidence = rng.uniform(lo, hi)
            out.append(Detection(box=BoundingBox(x0, y0, x0 + w, y0 + h),
                                 confidence=float(confidence), label=None,
                                 source_id=f"spurious:{i}"))
    return out


def synth_diagnose(true_label: LeafLabel | None, params: SyntheticDiagnoserParams,
                   key: str) -> tuple[LeafLabel, float]:
    """Flip the true label at its class-conditional rate; spurious boxes
    (no truth) take the configured prior. Deterministic per (seed, key)."""
    label = true_label if true_label is not None else params.spurious_prior
    rng = rng_stream("diag", params.seed, key)
    rate = (params.flip_healthy_to_diseased if label is LeafLabel.HEALTHY
            else params.flip_diseased_to_healthy)
    if rate > 0.0 and rng.random() < rate:
        label = label.other()
    confidence = rng.uniform(0.5, 1.0)
    return (label, float(confidence))


class SyntheticDetector:
    """Replay detector stage. With `labeler` set it emits (possibly flipped)
    labels, modeling an end-to-end system; without, it is class-agnostic."""

    def __init__(self, params: SyntheticDetectorParams,
                 labeler: SyntheticDiagnoserParams | None = None,
                 area_range: tuple[float, float] | None = None):
        self.params = params
        self.labeler = labeler
        self.area_range = area_range
        self.emits_labels = labeler is not None

    def detect(self, scene: Scene, frame: ImageSize) -> list[Detection]:
        detections = synth_detect(scene, self.params, self.area_range)
        if self.labeler is not None:
            gold = scene.leaf_map()
            labeled = []
            for det in detections:
                truth = gold[det.source_id].label if det.source_id in gold else None
                label, _ = synth_diagnose(truth, self.labeler,
                                          key=f"{scene.scene_id}|{det.source_id}")
                labeled.append(replace(det, label=label))
            detections = labeled
        if frame != scene.size:
            detections = [replace(d, box=rescale(d.box, scene.size, frame))
                          for d in detections]
        return detections


class SyntheticDiagnoser:
    """Diagnoser stage driven by crop/gold correspondence instead of pixels."""

    def __init__(self, params: SyntheticDiagnoserParams):
        self.params = params

    def diagnose(self, crop: Crop) -> tuple[LeafLabel, float]:
        key = crop.source_id
        if key is None:
            box = crop.box
            key = f"box:{box.x_min!r},{box.y_min!r},{box.x_max!r},{box.y_max!r}"
        return synth_diagnose(crop.true_label, self.params, key=f"{crop.scene_id}|{key}")


def replay_detector(labeled: bool = False, seed: int = 0) -> SyntheticDetector:
    """Zero-corruption replay: exactly the gold boxes (and labels when asked)."""
    params = SyntheticDetectorParams(seed=seed, hit_confidence_lo=0.9)
    labeler = SyntheticDiagnoserParams(seed=seed) if labeled else None
    return SyntheticDetector(params, labeler=labeler)


def oracle_diagnoser(seed: int = 0) -> SyntheticDiagnoser:
    return SyntheticDiagnoser(SyntheticDiagnoserParams(seed=seed))


# ---------------------------------------------------------------------------
# Shift experiment


@dataclass(frozen=True, slots=True)
class StagePair:
    detector: SyntheticDetectorParams
    labels: SyntheticDiagnoserParams


@dataclass(frozen=True, slots=True)
class RegimeParams:
    end_to_end: StagePair
    two_stage: StagePair


REGIME_IN_DISTRIBUTION = "in_distribution"
REGIME_SHIFTED = "shifted"

REPORT_CELLS = (
    ("detector", "f1"), ("detector", "p"), ("detector", "r"),
    ("healthy", "f1"), ("healthy", "p"), ("healthy", "r"),
    ("diseased", "f1"), ("diseased", "p"), ("diseased", "r"),
)


@dataclass(frozen=True)
class ShiftExperimentResult:
    reports: dict[str, EvalReport]       # keyed "<strategy>/<regime>"
    deltas: dict[str, dict[str, float]]  # per strategy: cell -> shifted - in_dist


def _report_cells(report: EvalReport) -> dict[str, float]:
    blocks = {"detector": report.detection, "healthy": report.healthy,
              "diseased": report.diseased}
    cells = {}
    for block, col in REPORT_CELLS:
        m = blocks[block]
        value = {"f1": m.f1, "p": m.precision, "r": m.recall}[col]
        cells[f"{block}_{col}"] = pct(value)
    cells["average_f1"] = pct(report.average_f1)
    return cells


def run_shift_experiment(manifest: DatasetManifest, in_dist: RegimeParams,
                         shifted: RegimeParams,
                         pipeline_cfg: PipelineConfig = PipelineConfig(),
                         match_cfg: MatchConfig = MatchConfig(),
                         *, workers: int = 1) -> ShiftExperimentResult:
    """Both strategies under both regimes: four reports plus per-cell deltas."""
    area_range = manifest_area_range(manifest)
    reports: dict[str, EvalReport] = {}
    for regime_name, regime in ((REGIME_IN_DISTRIBUTION, in_dist), (REGIME_SHIFTED, shifted)):
        e2e_detector = SyntheticDetector(regime.end_to_end.detector,
                                         labeler=regime.end_to_end.labels,
                                         area_range=area_range)
        per_scene = run_over_manifest(manifest, PIPELINE_END_TO_END, e2e_detector,
                                      cfg=pipeline_cfg, workers=workers)
        reports[f"{PIPELINE_END_TO_END}/{regime_name}"] = evaluate(per_scene, manifest, match_cfg)

        ts_detector = SyntheticDetector(regime.two_stage.detector, area_range=area_range)
        ts_diagnoser = SyntheticDiagnoser(regime.two_stage.labels)
        per_scene = run_over_manifest(manifest, PIPELINE_TWO_STAGE, ts_detector,
                                      diagnoser=ts_diagnoser, cfg=pipeline_cfg,
                                      workers=workers)
        reports[f"{PIPELINE_TWO_STAGE}/{regime_name}"] = evaluate(per_scene, manifest, match_cfg)

    deltas: dict[str, dict[str, float]] = {}
    for strategy in (PIPELINE_END_TO_END, PIPELINE_TWO_STAGE):
        base = _report_cells(reports[f"{strategy}/{REGIME_IN_DISTRIBUTION}"])
        moved = _report_cells(reports[f"{strategy}/{REGIME_SHIFTED}"])
        deltas[strategy] = {
            cell: round(moved[cell] - base[cell], 1) for cell in base
        }
    return ShiftExperimentResult(reports=reports, deltas=deltas)


# ---------------------------------------------------------------------------
# Config parsing (used by the CLI's synthetic stage specs)


def detector_params_from_dict(data: Mapping) -> SyntheticDetectorParams:
    known = {"miss_rate", "spurious_rate", "jitter_sigma", "hit_confidence_lo",
             "spurious_confidence", "seed"}
    unknown = set(data) - known
    if unknown:
        raise SyntheticModelError(f"unknown synthetic detector fields: {sorted(unknown)}")
    kwargs = dict(data)
    if "spurious_confidence" in kwargs:
        kwargs["spurious_confidence"] = tuple(kwargs["spurious_confidence"])
    return SyntheticDetectorParams(**kwargs)


def diagnoser_params_from_dict(data: Mapping) -> SyntheticDiagnoserParams:
    known = {"flip_healthy_to_diseased", "flip_diseased_to_healthy",
             "spurious_prior", "seed"}
    unknown = set(data) - known
    if unknown:
        raise SyntheticModelError(f"unknown synthetic diagnoser fields: {sorted(unknown)}")
    kwargs = dict(data)
    if "spurious_prior" in kwargs:
        kwargs["spurious_prior"] = LeafLabel.parse(kwargs["spurious_prior"])
    return SyntheticDiagnoserParams(**kwargs)
