import json

import numpy as np
import pytest

from wideleaf.dataset import (
    AUGMENT_OPS,
    CropRecord,
    DatasetError,
    ManifestError,
    PROVENANCE_EXTERNAL,
    TrainingProvenance,
    augment_crop,
    extract_crops,
    load_crop_set,
    load_manifest,
    manifest_from_dict,
    merge_crop_sets,
    resize_scene,
    save_crop_set,
    save_manifest,
    split_dataset,
)
from wideleaf.geometry import ImageSize
from wideleaf.raster import new_raster
from wideleaf.synthgen import make_manifest

from helpers import D, H, leaf, manifest, scene


def fixture_manifest_dict():
    """Two scenes, five leaves: 3 healthy / 2 diseased."""
    return {
        "format_version": 1,
        "name": "fixture",
        "scenes": [
            {
                "scene_id": "s1",
                "image_ref": "images/s1.png",
                "width": 100,
                "height": 100,
                "source_tag": "farm-a",
                "leaves": [
                    {"leaf_id": "a", "label": "healthy", "x_min": 0.0, "y_min": 0.0, "x_max": 10.0, "y_max": 10.0},
                    {"leaf_id": "b", "label": "diseased", "x_min": 20.0, "y_min": 20.0, "x_max": 40.0, "y_max": 40.0},
                    {"leaf_id": "c", "label": "healthy", "x_min": 50.0, "y_min": 50.0, "x_max": 60.0, "y_max": 70.0},
                ],
            },
            {
                "scene_id": "s2",
                "image_ref": "images/s2.png",
                "width": 200,
                "height": 150,
                "source_tag": "farm-b",
                "leaves": [
                    {"leaf_id": "a", "label": "diseased", "x_min": 5.5, "y_min": 5.5, "x_max": 30.0, "y_max": 30.0},
                    {"leaf_id": "b", "label": "healthy", "x_min": 100.0, "y_min": 10.0, "x_max": 180.0, "y_max": 90.0},
                ],
            },
        ],
    }


class TestManifestIO:
    def test_load_recomputes_counts(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps(fixture_manifest_dict()))
        m = load_manifest(path)
        counts = m.class_counts()
        assert (counts.healthy, counts.diseased) == (3, 2)
        assert counts.total == 5
        assert not m.warnings

    def test_empty_scene_list(self):
        m = manifest_from_dict({"format_version": 1, "name": "empty", "scenes": []})
        assert m.class_counts() == m.class_counts()
        assert (m.class_counts().healthy, m.class_counts().diseased) == (0, 0)

    def test_stored_counts_disagree_warns(self, tmp_path):
        data = fixture_manifest_dict()
        data["class_counts"] = {"healthy": 99, "diseased": 1}
        path = tmp_path / "m.json"
        path.write_text(json.dumps(data))
        m = load_manifest(path)
        assert (m.class_counts().healthy, m.class_counts().diseased) == (3, 2)
        assert len(m.warnings) == 1
        assert "recomputed" in m.warnings[0]

    def test_round_trip_byte_stable(self, tmp_path):
        path0 = tmp_path / "m0.json"
        path0.write_text(json.dumps(fixture_manifest_dict()))
        m = load_manifest(path0)
        path1 = tmp_path / "m1.json"
        path2 = tmp_path / "m2.json"
        save_manifest(m, path1)
        save_manifest(load_manifest(path1), path2)
        assert path1.read_bytes() == path2.read_bytes()

    def test_parse_error_has_location(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"format_version": 1,\n  "name": oops}')
        with pytest.raises(ManifestError, match=r"line 2"):
            load_manifest(path)

    def test_inverted_box_names_leaf(self):
        data = fixture_manifest_dict()
        data["scenes"][0]["leaves"][1]["x_max"] = -5.0
        with pytest.raises(ManifestError, match="leaf 'b'"):
            manifest_from_dict(data)

    def test_box_outside_image_rejected(self):
        data = fixture_manifest_dict()
        data["scenes"][0]["leaves"][0].update(x_min=200.0, x_max=300.0)
        with pytest.raises(ManifestError, match="outside"):
            manifest_from_dict(data)

    def test_overhanging_box_accepted(self):
        data = fixture_manifest_dict()
        data["scenes"][0]["leaves"][0].update(x_min=-5.0, x_max=30.0)
        m = manifest_from_dict(data)
        assert m.scenes[0].leaves[0].box.x_min == -5.0

    def test_duplicate_leaf_id_rejected(self):
        data = fixture_manifest_dict()
        data["scenes"][0]["leaves"][1]["leaf_id"] = "a"
        with pytest.raises(ManifestError, match="duplicate leaf_id"):
            manifest_from_dict(data)

    def test_unknown_label_rejected(self):
        data = fixture_manifest_dict()
        data["scenes"][0]["leaves"][0]["label"] = "wilted"
        with pytest.raises(DatasetError, match="wilted"):
            manifest_from_dict(data)

    def test_missing_field_rejected(self):
        data = fixture_manifest_dict()
        del data["scenes"][0]["leaves"][0]["x_min"]
        with pytest.raises(ManifestError, match="x_min"):
            manifest_from_dict(data)

    def test_wrong_version_rejected(self):
        data = fixture_manifest_dict()
        data["format_version"] = 2
        with pytest.raises(ManifestError, match="format_version"):
            manifest_from_dict(data)

    def test_malformed_containers_rejected(self):
        data = fixture_manifest_dict()
        data["scenes"] = 5
        with pytest.raises(ManifestError, match="array"):
            manifest_from_dict(data)
        data = fixture_manifest_dict()
        data["scenes"] = ["not-an-object"]
        with pytest.raises(ManifestError, match="object"):
            manifest_from_dict(data)
        data = fixture_manifest_dict()
        data["class_counts"] = [3, 2]
        with pytest.raises(ManifestError, match="class_counts"):
            manifest_from_dict(data)


class TestSplit:
    def test_sizes_and_partition(self):
        m = make_manifest("split", 10, 40, 20, seed=5)
        train, test = split_dataset(m, 0.9, seed=1)
        assert (len(train.scenes), len(test.scenes)) == (9, 1)
        train_ids = {s.scene_id for s in train.scenes}
        test_ids = {s.scene_id for s in test.scenes}
        assert train_ids | test_ids == {s.scene_id for s in m.scenes}
        assert not train_ids & test_ids

    def test_sizes_independent_of_seed(self):
        m = make_manifest("split", 10, 40, 20, seed=5)
        for seed in (1, 2, 99):
            train, test = split_dataset(m, 0.9, seed=seed)
            assert (len(train.scenes), len(test.scenes)) == (9, 1)

    def test_deterministic_membership(self):
        m = make_manifest("split", 20, 100, 50, seed=5)
        a_train, a_test = split_dataset(m, 0.7, seed=42)
        b_train, b_test = split_dataset(m, 0.7, seed=42)
        assert [s.scene_id for s in a_train.scenes] == [s.scene_id for s in b_train.scenes]
        assert [s.scene_id for s in a_test.scenes] == [s.scene_id for s in b_test.scenes]

    def test_seed_changes_membership(self):
        m = make_manifest("split", 20, 100, 50, seed=5)
        a, _ = split_dataset(m, 0.5, seed=1)
        b, _ = split_dataset(m, 0.5, seed=2)
        assert {s.scene_id for s in a.scenes} != {s.scene_id for s in b.scenes}

    def test_membership_stable_across_file_order(self):
        m = make_manifest("split", 12, 60, 30, seed=5)
        reversed_m = manifest("split", tuple(reversed(m.scenes)))
        a, _ = split_dataset(m, 0.75, seed=3)
        b, _ = split_dataset(reversed_m, 0.75, seed=3)
        assert {s.scene_id for s in a.scenes} == {s.scene_id for s in b.scenes}

    def test_per_class_conservation(self):
        m = make_manifest("split", 15, 77, 33, seed=5)
        total = m.class_counts()
        for seed in (0, 7, 123):
            train, test = split_dataset(m, 0.8, seed=seed)
            tc, sc = train.class_counts(), test.class_counts()
            assert tc.healthy + sc.healthy == total.healthy
            assert tc.diseased + sc.diseased == total.diseased

    def test_round_half_up_size(self):
        # 963 * 0.9 = 866.7 -> 867 (plain floor would give 866)
        m = make_manifest("tiny", 3, 6, 3, seed=1)
        train, test = split_dataset(m, 0.5, seed=1)   # 1.5 -> 2
        assert (len(train.scenes), len(test.scenes)) == (2, 1)

    def test_too_few_scenes(self):
        m = make_manifest("one", 1, 3, 2, seed=1)
        with pytest.raises(DatasetError):
            split_dataset(m, 0.9, seed=1)

    def test_bad_fraction(self):
        m = make_manifest("x", 4, 8, 4, seed=1)
        for fraction in (0.0, 1.0, 1.2, -0.1):
            with pytest.raises(DatasetError):
                split_dataset(m, fraction, seed=1)


class TestResize:
    def test_aspect_2_3(self):
        s = scene("s", [leaf("a", 0, 0, 400, 400)], width=4000, height=6000)
        out = resize_scene(s, "aspect")
        assert out.size == ImageSize(600, 900)
        assert out.leaves[0].box.as_tuple() == pytest.approx((0, 0, 60, 60))

    def test_aspect_3_4(self):
        s = scene("s", [], width=3000, height=4000)
        assert resize_scene(s, "aspect").size == ImageSize(600, 800)

    def test_aspect_landscape_preserves_orientation(self):
        s = scene("s", [], width=6000, height=4000)
        assert resize_scene(s, "aspect").size == ImageSize(900, 600)

    def test_fixed_policy(self):
        s = scene("s", [leaf("a", 10, 10, 110, 110)], width=1024, height=1024)
        out = resize_scene(s, "fixed512")
        assert out.size == ImageSize(512, 512)
        assert out.leaves[0].box.as_tuple() == pytest.approx((5, 5, 55, 55))

    def test_aspect_out_of_tolerance(self):
        s = scene("s", [], width=1000, height=1000)
        with pytest.raises(DatasetError, match="tolerance"):
            resize_scene(s, "aspect")

    def test_unknown_policy(self):
        with pytest.raises(DatasetError):
            resize_scene(scene("s", []), "bilinear")


class TestExtractCrops:
    def test_bookkeeping_counts(self):
        m = manifest("m", [
            scene("s1", [leaf("a", 0, 0, 10, 10, H), leaf("b", 20, 0, 30, 10, D)]),
            scene("s2", [leaf("a", 0, 0, 10, 10, D)]),
            scene("s3", []),
        ])
        result = extract_crops(m)
        assert len(result.records) == 3
        counts = result.class_counts()
        assert (counts.healthy, counts.diseased) == (1, 2)
        assert not result.failures
        labels = {r.crop_id: r.label for r in result.records}
        assert labels["s1/a"] is H and labels["s1/b"] is D and labels["s2/a"] is D

    def test_empty_scene_yields_nothing(self):
        result = extract_crops(manifest("m", [scene("s", [])]))
        assert result.records == ()

    def test_clipped_resample_on_fixture_image(self):
        # 4x4 image, leaf box overhanging the top-left corner: the crop must
        # come from the clipped region only.
        pixels = np.arange(4 * 4 * 3, dtype=np.uint8).reshape(4, 4, 3)
        m = manifest("m", [scene("s", [leaf("a", -2, -2, 2, 2)], width=4, height=4)])
        result = extract_crops(m, crop_size=ImageSize(2, 2),
                               image_loader=lambda sc: pixels)
        assert len(result.records) == 1 and not result.failures
        # clipped region is [0,2)x[0,2); 2x2 nearest sampling hits those pixels
        # exactly (sample centers 0.5 and 1.5)

    def test_materializes_pngs(self, tmp_path):
        pixels = new_raster(ImageSize(32, 32), fill=(10, 200, 30))
        m = manifest("m", [scene("s", [leaf("a", 2, 2, 20, 20)], width=32, height=32)])
        result = extract_crops(m, crop_size=ImageSize(8, 8),
                               image_loader=lambda sc: pixels, out_dir=tmp_path)
        assert (tmp_path / "s" / "a.png").exists()
        assert result.records[0].pixels_ref == "s/a.png"

    def test_unresolvable_image_marks_failed_and_continues(self):
        m = manifest("m", [
            scene("bad", [leaf("a", 0, 0, 10, 10, H)]),
            scene("good", [leaf("a", 0, 0, 10, 10, D)]),
        ])

        def loader(sc):
            if sc.scene_id == "bad":
                raise FileNotFoundError("no such image")
            return new_raster(ImageSize(100, 100))

        result = extract_crops(m, image_loader=loader)
        assert len(result.records) == 2
        by_scene = {r.parent_scene_id: r for r in result.records}
        assert by_scene["bad"].failed and not by_scene["good"].failed
        assert len(result.failures) == 1 and "bad" in result.failures[0]
        # failed records still carry their labels: per-class counts preserved
        counts = result.class_counts()
        assert (counts.healthy, counts.diseased) == (1, 1)


class TestMergeCrops:
    def _rec(self, crop_id, label=H):
        return CropRecord(crop_id=crop_id, parent_scene_id=None, parent_leaf_id=None,
                          label=label, pixels_ref=f"{crop_id}.png",
                          provenance=PROVENANCE_EXTERNAL)

    def test_concatenation(self):
        merged = merge_crop_sets([self._rec("a"), self._rec("b", D)], [self._rec("c")])
        assert [r.crop_id for r in merged] == ["a", "b", "c"]

    def test_identity_with_empty(self):
        a = [self._rec("a")]
        assert merge_crop_sets(a, []) == a

    def test_collision_names_id(self):
        with pytest.raises(DatasetError, match="'dup'"):
            merge_crop_sets([self._rec("dup")], [self._rec("dup")])

    def test_namespacing_avoids_collision(self):
        merged = merge_crop_sets([self._rec("x")], [self._rec("x")],
                                 namespace_a="left", namespace_b="right")
        assert {r.crop_id for r in merged} == {"left/x", "right/x"}

    def test_crop_set_file_round_trip(self, tmp_path):
        records = [self._rec("a"), self._rec("b", D)]
        path = tmp_path / "crops.json"
        save_crop_set(records, path)
        assert load_crop_set(path) == records

    def test_merge_at_reference_scale(self):
        # 22,196 cropped records (15,369 / 6,827) plus an external single-leaf
        # set sized to bring both classes to 25,000: 50,000 records total
        m = make_manifest("big", 867, 15_369, 6_827, seed=6)
        cropped = extract_crops(m).records
        external = (
            [self._rec(f"ext-h{i}", H) for i in range(25_000 - 15_369)]
            + [self._rec(f"ext-d{i}", D) for i in range(25_000 - 6_827)]
        )
        assert len(external) == 50_000 - 22_196
        merged = merge_crop_sets(cropped, external)
        assert len(merged) == 50_000
        from wideleaf.dataset import crop_class_counts

        counts = crop_class_counts(merged)
        assert (counts.healthy, counts.diseased) == (25_000, 25_000)


class TestAugment:
    def test_flip_h_involution(self):
        rng = np.random.default_rng(0)
        crop = rng.integers(0, 255, size=(8, 8, 3), dtype=np.uint8)
        assert np.array_equal(augment_crop(augment_crop(crop, "flip_h"), "flip_h"), crop)

    def test_rot90_cycle(self):
        rng = np.random.default_rng(1)
        crop = rng.integers(0, 255, size=(6, 6, 3), dtype=np.uint8)
        out = crop
        for _ in range(4):
            out = augment_crop(out, "rot90")
        assert np.array_equal(out, crop)

    def test_rot90_is_counter_clockwise(self):
        crop = np.array([[1, 2], [3, 4]], dtype=np.uint8)
        assert augment_crop(crop, "rot90").tolist() == [[2, 4], [1, 3]]

    def test_rot180_equals_double_rot90(self):
        rng = np.random.default_rng(2)
        crop = rng.integers(0, 255, size=(5, 5), dtype=np.uint8)
        assert np.array_equal(augment_crop(crop, "rot180"),
                              augment_crop(augment_crop(crop, "rot90"), "rot90"))

    def test_rotation_needs_square(self):
        crop = np.zeros((4, 6, 3), dtype=np.uint8)
        with pytest.raises(DatasetError, match="square"):
            augment_crop(crop, "rot90")

    def test_flips_allow_non_square(self):
        crop = np.zeros((4, 6, 3), dtype=np.uint8)
        assert augment_crop(crop, "flip_v").shape == crop.shape

    def test_all_ops_preserve_shape_on_square(self):
        crop = np.zeros((4, 4, 3), dtype=np.uint8)
        for op in AUGMENT_OPS:
            assert augment_crop(crop, op).shape == crop.shape

    def test_unknown_op(self):
        with pytest.raises(DatasetError):
            augment_crop(np.zeros((4, 4, 3), dtype=np.uint8), "blur")


class TestTrainingProvenance:
    def test_round_trip(self):
        p = TrainingProvenance(optimizer="sgd-momentum", learning_rate=1e-3,
                               momentum=0.9, weight_decay=0.0005, batch_size=16,
                               iterations=50000)
        assert TrainingProvenance.from_dict(p.to_dict()) == p

    def test_positive_fields_enforced(self):
        with pytest.raises(DatasetError, match="learning_rate"):
            TrainingProvenance(learning_rate=-1.0)

    def test_unknown_field_rejected(self):
        with pytest.raises(DatasetError, match="warmup"):
            TrainingProvenance.from_dict({"warmup": 5})
