"""Greedy IoU matching of predictions to gold leaves and the derived metrics.

A prediction matches the still-unmatched gold leaf with the highest
IoU >= threshold, visiting predictions in confidence-descending order.
Detection metrics are class-agnostic; diagnosis metrics repeat the matching
class-aware and read per-class true/false positives off it. A prediction
box at exactly the threshold counts as a match.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from functools import lru_cache
from typing import Mapping, Sequence

from ._native import greedy_assign
from .dataset import AnnotatedLeaf, DatasetManifest, LeafLabel
from .geometry import boxes_to_array, iou as box_iou, pairwise_iou
from .pipeline import Detection

BRUTE_FORCE_LIMIT = 8


class MatchingError(ValueError):
    """Raised for invalid matching configuration or oversized oracle inputs."""


@dataclass(frozen=True, slots=True)
class MatchConfig:
    iou_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise MatchingError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")


@dataclass(frozen=True, slots=True)
class MatchPair:
    pred_index: int
    leaf_id: str
    iou: float


@dataclass(frozen=True, slots=True)
class MatchResult:
    pairs: tuple[MatchPair, ...]
    unmatched_predictions: tuple[int, ...]
    unmatched_gold: tuple[str, ...]

    @property
    def tp(self) -> int:
        return len(self.pairs)


def match(predictions: Sequence[Detection], gold: Sequence[AnnotatedLeaf],
          cfg: MatchConfig = MatchConfig(), class_aware: bool = False) -> MatchResult:
    """One-to-one greedy matching. With `class_aware`, only gold leaves with
    the prediction's label are candidates (unlabeled predictions match nothing)."""
    order = sorted(range(len(predictions)), key=lambda i: (-predictions[i].confidence, i))
    gold_sorted = sorted(gold, key=lambda leaf: leaf.leaf_id)
    matrix = pairwise_iou(
        boxes_to_array([predictions[i].box for i in order]),
        boxes_to_array([leaf.box for leaf in gold_sorted]),
    )
    if class_aware:
        for row, i in enumerate(order):
            label = predictions[i].label
            for col, leaf in enumerate(gold_sorted):
                if label is None or leaf.label is not label:
                    matrix[row, col] = -1.0
    assignment = greedy_assign(matrix, cfg.iou_threshold)
    pairs = []
    matched_gold: set[str] = set()
    matched_preds: set[int] = set()
    for row, col in enumerate(assignment):
        if col < 0:
            continue
        pred_index = order[row]
        leaf = gold_sorted[col]
        pairs.append(MatchPair(pred_index=pred_index, leaf_id=leaf.leaf_id,
                               iou=float(matrix[row, col])))
        matched_preds.add(pred_index)
        matched_gold.add(leaf.leaf_id)
    pairs.sort(key=lambda p: p.pred_index)
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_predictions=tuple(i for i in range(len(predictions)) if i not in matched_preds),
        unmatched_gold=tuple(leaf.leaf_id for leaf in gold_sorted if leaf.leaf_id not in matched_gold),
    )


def brute_force_match(predictions: Sequence[Detection], gold: Sequence[AnnotatedLeaf],
                      cfg: MatchConfig = MatchConfig()) -> MatchResult:
    """Exhaustive one-to-one assignment maximizing pair count, then total IoU.

    Test oracle only; limited to 8x8 instances.
    """
    if len(predictions) > BRUTE_FORCE_LIMIT or len(gold) > BRUTE_FORCE_LIMIT:
        raise MatchingError(
            f"brute-force oracle is limited to {BRUTE_FORCE_LIMIT} boxes per side, "
            f"got {len(predictions)}x{len(gold)}"
        )
    gold_sorted = sorted(gold, key=lambda leaf: leaf.leaf_id)
    n_pred, n_gold = len(predictions), len(gold_sorted)
    ious = [[box_iou(p.box, g.box) for g in gold_sorted] for p in predictions]

    @lru_cache(maxsize=None)
    def best(i: int, used: int) -> tuple[int, float]:
        if i == n_pred:
            return (0, 0.0)
        count, total = best(i + 1, used)  # leave prediction i unmatched
        for j in range(n_gold):
            if used & (1 << j) or ious[i][j] < cfg.iou_threshold:
                continue
            sub_count, sub_total = best(i + 1, used | (1 << j))
            cand = (sub_count + 1, sub_total + ious[i][j])
            if cand > (count, total):
                count, total = cand
        return (count, total)

    pairs: list[MatchPair] = []
    used = 0
    for i in range(n_pred):
        target = best(i, used)
        skip = best(i + 1, used)
        chosen = None
        if skip != target:
            for j in range(n_gold):
                if used & (1 << j) or ious[i][j] < cfg.iou_threshold:
                    continue
                sub = best(i + 1, used | (1 << j))
                if (sub[0] + 1, sub[1] + ious[i][j]) == target:
                    chosen = j
                    break
        if chosen is not None:
            pairs.append(MatchPair(pred_index=i, leaf_id=gold_sorted[chosen].leaf_id,
                                   iou=ious[i][chosen]))
            used |= 1 << chosen
    best.cache_clear()
    matched_preds = {p.pred_index for p in pairs}
    matched_gold = {p.leaf_id for p in pairs}
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_predictions=tuple(i for i in range(n_pred) if i not in matched_preds),
        unmatched_gold=tuple(leaf.leaf_id for leaf in gold_sorted if leaf.leaf_id not in matched_gold),
    )


# ---------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True, slots=True)
class ClassMetrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    precision_undefined: bool = False
    recall_undefined: bool = False

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "ClassMetrics":
        p_undef = (tp + fp) == 0
        r_undef = (tp + fn) == 0
        precision = 0.0 if p_undef else tp / (tp + fp)
        recall = 0.0 if r_undef else tp / (tp + fn)
        f1 = harmonic_f1(precision, recall)
        return cls(tp=tp, fp=fp, fn=fn, precision=precision, recall=recall, f1=f1,
                   precision_undefined=p_undef, recall_undefined=r_undef)


def harmonic_f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def average_f1(healthy: ClassMetrics, diseased: ClassMetrics) -> float:
    return (healthy.f1 + diseased.f1) / 2.0


@dataclass(frozen=True, slots=True)
class SceneEval:
    scene_id: str
    agnostic: MatchResult
    aware: MatchResult
    predictions: tuple[Detection, ...]
    gold: tuple[AnnotatedLeaf, ...]


@dataclass(frozen=True)
class EvalReport:
    detection: ClassMetrics
    healthy: ClassMetrics
    diseased: ClassMetrics
    average_f1: float
    scene_count: int
    gold_count: int
    prediction_count: int
    warnings: tuple[str, ...] = field(default=(), compare=False)


def detection_metrics(scene_evals: Sequence[SceneEval]) -> ClassMetrics:
    tp = sum(ev.agnostic.tp for ev in scene_evals)
    fp = sum(len(ev.agnostic.unmatched_predictions) for ev in scene_evals)
    fn = sum(len(ev.agnostic.unmatched_gold) for ev in scene_evals)
    return ClassMetrics.from_counts(tp=tp, fp=fp, fn=fn)


def diagnosis_metrics(scene_evals: Sequence[SceneEval], label: LeafLabel) -> ClassMetrics:
    tp = fp = fn = 0
    for ev in scene_evals:
        matched = {pair.pred_index for pair in ev.aware.pairs}
        preds_c = [i for i, det in enumerate(ev.predictions) if det.label is label]
        tp_c = sum(1 for i in preds_c if i in matched)
        tp += tp_c
        fp += len(preds_c) - tp_c
        gold_c = sum(1 for leaf in ev.gold if leaf.label is label)
        fn += gold_c - tp_c
    return ClassMetrics.from_counts(tp=tp, fp=fp, fn=fn)


def evaluate_scene(scene_id: str, predictions: Sequence[Detection],
                   gold: Sequence[AnnotatedLeaf], cfg: MatchConfig) -> SceneEval:
    return SceneEval(
        scene_id=scene_id,
        agnostic=match(predictions, gold, cfg, class_aware=False),
        aware=match(predictions, gold, cfg, class_aware=True),
        predictions=tuple(predictions),
        gold=tuple(gold),
    )


def evaluate(per_scene: Mapping[str, Sequence[Detection]], manifest: DatasetManifest,
             cfg: MatchConfig = MatchConfig()) -> EvalReport:
    """Aggregate report over every scene of the manifest.

    Predictions for unknown scenes are excluded and reported as warnings, as
    are boxes lying outside their scene (a likely coordinate-frame mismatch).
    """
    warnings: list[str] = []
    scene_evals: list[SceneEval] = []
    known = manifest.scene_map()
    for scene_id in per_scene:
        if scene_id not in known:
            warnings.append(f"scene '{scene_id}': not in manifest '{manifest.name}'; excluded")
    for scene in manifest.scenes:
        preds = list(per_scene.get(scene.scene_id, []))
        outside = sum(
            1 for det in preds
            if det.box.x_min < 0 or det.box.y_min < 0
            or det.box.x_max > scene.size.width or det.box.y_max > scene.size.height
        )
        if outside:
            warnings.append(
                f"scene '{scene.scene_id}': {outside} prediction box(es) exceed the "
                f"{scene.size.width}x{scene.size.height} frame; coordinate frames may disagree"
            )
        scene_evals.append(evaluate_scene(scene.scene_id, preds, scene.leaves, cfg))
    detection = detection_metrics(scene_evals)
    healthy = diagnosis_metrics(scene_evals, LeafLabel.HEALTHY)
    diseased = diagnosis_metrics(scene_evals, LeafLabel.DISEASED)
    return EvalReport(
        detection=detection,
        healthy=healthy,
        diseased=diseased,
        average_f1=average_f1(healthy, diseased),
        scene_count=len(manifest.scenes),
        gold_count=sum(len(s.leaves) for s in manifest.scenes),
        prediction_count=sum(len(ev.predictions) for ev in scene_evals),
        warnings=tuple(warnings),
    )


# ---------------------------------------------------------------------------
# Report rendering


def pct(value: float) -> float:
    """Fraction -> percent with one decimal, half-up."""
    return float(Decimal(repr(value * 100.0)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def _metrics_block(m: ClassMetrics) -> dict:
    return {
        "f1": pct(m.f1),
        "p": pct(m.precision),
        "r": pct(m.recall),
        "tp": m.tp,
        "fp": m.fp,
        "fn": m.fn,
        "precision_undefined": m.precision_undefined,
        "recall_undefined": m.recall_undefined,
    }


def report_to_dict(system: str, report: EvalReport) -> dict:
    return {
        "system": system,
        "detector": _metrics_block(report.detection),
        "healthy": _metrics_block(report.healthy),
        "diseased": _metrics_block(report.diseased),
        "average_f1": pct(report.average_f1),
        "counts": {
            "scenes": report.scene_count,
            "gold_leaves": report.gold_count,
            "predictions": report.prediction_count,
        },
        "warnings": list(report.warnings),
    }


def render_report(reports: Mapping[str, EvalReport]) -> tuple[str, list[dict]]:
    """Aligned text table plus the canonical JSON payload (one row per system)."""
    if not reports:
        raise MatchingError("render_report needs at least one report")
    payload = [report_to_dict(system, report) for system, report in reports.items()]
    name_width = max(len("system"), max(len(s) for s in reports))
    groups = [("detector", "detect"), ("healthy", "healthy"), ("diseased", "diseased")]
    header_1 = f"{'':{name_width}}"
    header_2 = f"{'system':{name_width}}"
    for _, title in groups:
        header_1 += f" | {title:^23}"
        header_2 += " | " + " ".join(f"{h:>7}" for h in ("F1", "P", "R"))
    header_1 += " | avg F1"
    header_2 += " |       "
    lines = [header_1, header_2, "-" * len(header_2)]
    for row in payload:
        line = f"{row['system']:{name_width}}"
        for key, _ in groups:
            block = row[key]
            line += " | " + " ".join(f"{block[col]:>7.1f}" for col in ("f1", "p", "r"))
        line += f" | {row['average_f1']:>6.1f}"
        lines.append(line)
    return ("\n".join(lines) + "\n", payload)
