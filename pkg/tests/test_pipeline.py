import numpy as np
import pytest

from wideleaf.dataset import LeafLabel
from wideleaf.geometry import iou
from wideleaf.pipeline import (
    PIPELINE_END_TO_END,
    PIPELINE_TWO_STAGE,
    ConstantDiagnoser,
    PipelineConfig,
    PipelineError,
    load_predictions,
    nms,
    predictions_from_dict,
    predictions_to_dict,
    run_end_to_end,
    run_over_manifest,
    run_two_stage,
    save_predictions,
)
from wideleaf.schemas import PREDICTIONS_SCHEMA, validate_output
from wideleaf.synthetic import oracle_diagnoser, replay_detector

from helpers import D, H, det, leaf, manifest, scene, random_box


class FixedDetector:
    """Returns a canned list of detections regardless of the scene."""

    def __init__(self, detections, emits_labels=True):
        self._detections = list(detections)
        self.emits_labels = emits_labels

    def detect(self, scene, frame):
        return list(self._detections)


class FailingDiagnoser:
    def __init__(self, fail_on):
        self.fail_on = fail_on

    def diagnose(self, crop):
        if crop.source_id == self.fail_on:
            raise RuntimeError("model exploded")
        return (LeafLabel.HEALTHY, 0.9)


class TestNms:
    def test_duplicate_suppression(self):
        a = det(0, 0, 10, 10, confidence=0.9)
        b = det(0, 0, 10, 10, confidence=0.8)
        assert nms([a, b], 0.45) == [a]

    def test_disjoint_boxes_survive(self):
        a = det(0, 0, 10, 10, confidence=0.9)
        b = det(50, 50, 60, 60, confidence=0.8)
        assert nms([a, b], 0.45) == [a, b]

    def test_greedy_chain(self):
        # B overlaps A at 0.6 (suppressed); C overlaps A at 1/3 (< 0.45, kept)
        # and would overlap B at 0.6, but B is already gone.
        a = det(0, 0, 10, 10, confidence=0.9)
        b = det(2.5, 0, 12.5, 10, confidence=0.8)
        c = det(5, 0, 15, 10, confidence=0.7)
        assert iou(a.box, b.box) == pytest.approx(0.6)
        assert iou(b.box, c.box) == pytest.approx(0.6)
        assert iou(a.box, c.box) == pytest.approx(1 / 3)
        assert nms([a, b, c], 0.45) == [a, c]

    def test_per_label_groups(self):
        a = det(0, 0, 10, 10, confidence=0.9, label=H)
        b = det(0, 0, 10, 10, confidence=0.8, label=D)
        assert nms([a, b], 0.45, per_label=True) == [a, b]
        assert nms([a, b], 0.45, per_label=False) == [a]

    def test_output_confidence_sorted(self):
        dets = [det(i * 30, 0, i * 30 + 10, 10, confidence=c)
                for i, c in enumerate((0.2, 0.9, 0.5))]
        out = nms(dets, 0.45)
        assert [d.confidence for d in out] == [0.9, 0.5, 0.2]

    def test_confidence_tie_prefers_larger_area(self):
        small = det(0, 0, 10, 10, confidence=0.8)
        large = det(0, 0, 12, 12, confidence=0.8)
        out = nms([small, large], 0.45)
        assert out == [large]

    def test_idempotent_and_subset(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            dets = [det(*random_box(rng, field=60.0).as_tuple(),
                        confidence=float(rng.uniform(0.01, 1.0)))
                    for _ in range(int(rng.integers(0, 15)))]
            once = nms(dets, 0.45)
            assert nms(once, 0.45) == once
            ids = {id(d) for d in dets}
            assert all(id(d) in ids for d in once)

    def test_threshold_validation(self):
        with pytest.raises(PipelineError):
            nms([], 0.0)


class TestEndToEnd:
    def _scene(self):
        return scene("s", [
            leaf("a", 0, 0, 10, 10, H),
            leaf("b", 30, 0, 45, 20, D),
            leaf("c", 60, 60, 80, 85, H),
        ])

    def test_replay_returns_gold(self):
        sc = self._scene()
        out = run_end_to_end(sc, replay_detector(labeled=True), PipelineConfig())
        assert len(out) == 3
        got = {d.source_id: d for d in out}
        for gold in sc.leaves:
            assert got[gold.leaf_id].box == gold.box
            assert got[gold.leaf_id].label is gold.label

    def test_confidence_filter(self):
        sc = self._scene()
        detector = FixedDetector([det(0, 0, 10, 10, confidence=0.3, label=H)])
        assert run_end_to_end(sc, detector, PipelineConfig(confidence_threshold=0.5)) == []

    def test_requires_labeling_detector(self):
        with pytest.raises(PipelineError, match="emits labels"):
            run_end_to_end(self._scene(), replay_detector(labeled=False), PipelineConfig())

    def test_frame_boxes_mapped_back_to_scene(self):
        sc = scene("s", [], width=1024, height=1024)
        detector = FixedDetector([det(10, 10, 20, 20, confidence=0.9, label=H)])
        out = run_end_to_end(sc, detector, PipelineConfig(resize_policy="fixed512"))
        assert out[0].box.as_tuple() == pytest.approx((20, 20, 40, 40))

    def test_outputs_clipped_to_scene(self):
        sc = scene("s", [], width=50, height=50)
        detector = FixedDetector([det(40, 40, 70, 70, confidence=0.9, label=H)])
        out = run_end_to_end(sc, detector, PipelineConfig())
        assert out[0].box.as_tuple() == (40, 40, 50, 50)

    def test_detector_failure_names_scene(self):
        class Exploding:
            emits_labels = True

            def detect(self, scene, frame):
                raise RuntimeError("cuda out of memory")

        with pytest.raises(PipelineError, match="scene 's'"):
            run_end_to_end(self._scene(), Exploding(), PipelineConfig())

    def test_output_confidences_at_least_threshold(self):
        from wideleaf.synthetic import SyntheticDetector, SyntheticDetectorParams, SyntheticDiagnoserParams

        sc = self._scene()
        detector = SyntheticDetector(
            SyntheticDetectorParams(hit_confidence_lo=0.0, spurious_rate=2.0, seed=3),
            labeler=SyntheticDiagnoserParams(seed=3))
        cfg = PipelineConfig(confidence_threshold=0.6)
        out = run_end_to_end(sc, detector, cfg)
        assert all(d.confidence >= cfg.confidence_threshold for d in out)


class TestTwoStage:
    def _scene(self):
        return scene("s", [
            leaf("a", 0, 0, 10, 10, H),
            leaf("b", 30, 0, 45, 20, H),
            leaf("c", 60, 60, 80, 85, D),
        ])

    def test_replay_plus_oracle_recovers_gold(self):
        sc = self._scene()
        out = run_two_stage(sc, replay_detector(), oracle_diagnoser(), PipelineConfig())
        got = {d.source_id: d.label for d in out}
        assert got == {"a": H, "b": H, "c": D}

    def test_constant_diagnoser_labels_everything(self):
        sc = self._scene()
        out = run_two_stage(sc, replay_detector(), ConstantDiagnoser(D), PipelineConfig())
        assert len(out) == 3
        assert all(d.label is D for d in out)

    def test_detector_labels_are_discarded(self):
        sc = self._scene()
        out = run_two_stage(sc, replay_detector(labeled=True), ConstantDiagnoser(H),
                            PipelineConfig())
        assert all(d.label is H for d in out)

    def test_box_set_independent_of_diagnoser(self):
        rng = np.random.default_rng(22)
        for trial in range(20):
            leaves = [leaf(f"g{i}", *random_box(rng, field=90.0).as_tuple(),
                           label=H if rng.random() < 0.5 else D)
                      for i in range(int(rng.integers(1, 8)))]
            sc = scene(f"s{trial}", leaves)
            boxes_a = sorted(d.box.as_tuple() for d in run_two_stage(
                sc, replay_detector(), ConstantDiagnoser(D), PipelineConfig()))
            boxes_b = sorted(d.box.as_tuple() for d in run_two_stage(
                sc, replay_detector(), oracle_diagnoser(), PipelineConfig()))
            assert boxes_a == boxes_b

    def test_diagnoser_failure_drops_only_that_detection(self):
        sc = self._scene()
        out = run_two_stage(sc, replay_detector(), FailingDiagnoser("b"), PipelineConfig())
        assert {d.source_id for d in out} == {"a", "c"}


class TestRunOverManifest:
    def _manifest(self):
        from wideleaf.synthgen import make_manifest

        return make_manifest("m", 6, 30, 12, seed=3)

    def test_workers_do_not_change_results(self):
        m = self._manifest()
        serial = run_over_manifest(m, PIPELINE_END_TO_END, replay_detector(labeled=True))
        parallel = run_over_manifest(m, PIPELINE_END_TO_END, replay_detector(labeled=True),
                                     workers=4)
        assert serial == parallel

    def test_two_stage_kind_needs_diagnoser(self):
        with pytest.raises(PipelineError):
            run_over_manifest(self._manifest(), PIPELINE_TWO_STAGE, replay_detector())

    def test_failures_recorded_and_batch_continues(self):
        m = self._manifest()

        class FlakyDetector:
            emits_labels = True

            def detect(self, scene, frame):
                if scene.scene_id.endswith("0002"):
                    raise RuntimeError("boom")
                return []

        failures = {}
        results = run_over_manifest(m, PIPELINE_END_TO_END, FlakyDetector(),
                                    failures=failures)
        assert set(results) == {s.scene_id for s in m.scenes}
        assert list(failures) == ["m-s0002"]
        assert "boom" in failures["m-s0002"]


class TestPredictionFiles:
    def test_round_trip(self, tmp_path):
        m = manifest("m", [scene("s1", [leaf("a", 0, 0, 10, 10)]), scene("s2", [])])
        per_scene = {"s1": [det(1, 2, 3.5, 4, confidence=0.75, label=D),
                            det(5, 5, 9, 9, confidence=0.5)]}
        payload = predictions_to_dict("sys", PIPELINE_END_TO_END, PipelineConfig(),
                                      m, per_scene, stages={"detector": "replay"}, seed=7)
        validate_output(payload, PREDICTIONS_SCHEMA, "predictions")
        path = tmp_path / "preds.json"
        save_predictions(path, payload)
        header, loaded = load_predictions(path)
        assert header["system"] == "sys"
        assert header["seed"] == 7
        assert loaded["s1"][0].box.as_tuple() == (1, 2, 3.5, 4)
        assert loaded["s1"][0].label is D
        assert loaded["s1"][1].label is None
        assert loaded["s2"] == []

    def test_rejects_bad_version(self):
        with pytest.raises(PipelineError, match="format_version"):
            predictions_from_dict({"format_version": 99, "run": {}, "scenes": []})

    def test_rejects_duplicate_scene(self):
        payload = {
            "format_version": 1,
            "run": {"system": "x", "pipeline": "end_to_end", "config": {}},
            "scenes": [{"scene_id": "s", "detections": []},
                       {"scene_id": "s", "detections": []}],
        }
        with pytest.raises(PipelineError, match="duplicate"):
            predictions_from_dict(payload)


class TestCoordinateRoundTrip:
    def test_frame_to_scene_composition_is_identity(self):
        from wideleaf.dataset import resize_scene
        from wideleaf.geometry import rescale

        rng = np.random.default_rng(23)
        sc = scene("s", [leaf(f"g{i}", *random_box(rng, field=3800.0).as_tuple())
                         for i in range(20)], width=4000, height=6000)
        resized = resize_scene(sc, "aspect")
        for orig, moved in zip(sc.leaves, resized.leaves):
            back = rescale(moved.box, resized.size, sc.size)
            for got, want in zip(back.as_tuple(), orig.box.as_tuple()):
                assert abs(got - want) < 1e-6
