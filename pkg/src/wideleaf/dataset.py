"""Annotation manifests and dataset preparation.

Covers the whole data side: the manifest file format, seeded scene-level
train/test splitting, the wide-angle resize policy, single-leaf crop
extraction, crop-set merging and crop augmentation.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence
from enum import Enum

import numpy as np

from . import jsonio
from .geometry import BoundingBox, GeometryError, ImageSize, clip, rescale
from .raster import crop_resample, save_png

MANIFEST_FORMAT_VERSION = 1

# Split membership is defined by shuffling the lexicographically sorted
# scene_id list with this named generator, so it is stable across file
# orderings and Python runs.
SPLIT_GENERATOR = "wideleaf-split-v1"

RESIZE_FIXED = "fixed512"
RESIZE_ASPECT = "aspect"
ASPECT_TOLERANCE = 0.02

PROVENANCE_CROPPED = "cropped_from_wide_angle"
PROVENANCE_EXTERNAL = "external_single_leaf"

DEFAULT_CROP_SIZE = ImageSize(224, 224)


class DatasetError(ValueError):
    """Raised for invalid dataset contents or operations."""


class ManifestError(DatasetError):
    """Raised when a manifest file fails to parse or validate."""


class LeafLabel(str, Enum):
    HEALTHY = "healthy"
    DISEASED = "diseased"

    @classmethod
    def parse(cls, value: str) -> "LeafLabel":
        try:
            return cls(value)
        except ValueError:
            raise DatasetError(
                f"unknown leaf label {value!r} (expected 'healthy' or 'diseased')"
            ) from None

    def other(self) -> "LeafLabel":
        return LeafLabel.DISEASED if self is LeafLabel.HEALTHY else LeafLabel.HEALTHY


@dataclass(frozen=True, slots=True)
class ClassCounts:
    healthy: int
    diseased: int

    @property
    def total(self) -> int:
        return self.healthy + self.diseased


@dataclass(frozen=True, slots=True)
class AnnotatedLeaf:
    leaf_id: str
    box: BoundingBox
    label: LeafLabel


@dataclass(frozen=True, slots=True)
class Scene:
    scene_id: str
    image_ref: str
    size: ImageSize
    leaves: tuple[AnnotatedLeaf, ...]
    source_tag: str = ""

    def leaf_map(self) -> dict[str, AnnotatedLeaf]:
        return {leaf.leaf_id: leaf for leaf in self.leaves}


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    scenes: tuple[Scene, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False, repr=False)

    def class_counts(self) -> ClassCounts:
        healthy = sum(1 for s in self.scenes for leaf in s.leaves if leaf.label is LeafLabel.HEALTHY)
        diseased = sum(1 for s in self.scenes for leaf in s.leaves if leaf.label is LeafLabel.DISEASED)
        return ClassCounts(healthy=healthy, diseased=diseased)

    def scene_map(self) -> dict[str, Scene]:
        return {s.scene_id: s for s in self.scenes}


@dataclass(frozen=True, slots=True)
class CropRecord:
    crop_id: str
    parent_scene_id: str | None
    parent_leaf_id: str | None
    label: LeafLabel
    pixels_ref: str
    provenance: str
    failed: bool = False


@dataclass(frozen=True, slots=True)
class TrainingProvenance:
    """Optimizer metadata carried through run outputs; never executed."""

    optimizer: str | None = None
    learning_rate: float | None = None
    momentum: float | None = None
    weight_decay: float | None = None
    batch_size: int | None = None
    iterations: int | None = None
    epochs: int | None = None

    def __post_init__(self):
        numeric = {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "epochs": self.epochs,
        }
        for name, value in numeric.items():
            if value is not None and value <= 0:
                raise DatasetError(f"training provenance field {name} must be positive, got {value}")

    def to_dict(self) -> dict:
        out = {}
        for name in ("optimizer", "learning_rate", "momentum", "weight_decay",
                     "batch_size", "iterations", "epochs"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainingProvenance":
        known = {"optimizer", "learning_rate", "momentum", "weight_decay",
                 "batch_size", "iterations", "epochs"}
        unknown = set(data) - known
        if unknown:
            raise DatasetError(f"unknown training provenance fields: {sorted(unknown)}")
        return cls(**dict(data))


# ---------------------------------------------------------------------------
# Manifest (de)serialization


def _leaf_to_dict(leaf: AnnotatedLeaf) -> dict:
    return {
        "leaf_id": leaf.leaf_id,
        "label": leaf.label.value,
        "x_min": leaf.box.x_min,
        "y_min": leaf.box.y_min,
        "x_max": leaf.box.x_max,
        "y_max": leaf.box.y_max,
    }


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        "format_version": MANIFEST_FORMAT_VERSION,
        "name": manifest.name,
        "scenes": [
            {
                "scene_id": s.scene_id,
                "image_ref": s.image_ref,
                "width": s.size.width,
                "height": s.size.height,
                "source_tag": s.source_tag,
                "leaves": [_leaf_to_dict(leaf) for leaf in s.leaves],
            }
            for s in manifest.scenes
        ],
    }


def _require(data: Mapping, key: str, where: str):
    if key not in data:
        raise ManifestError(f"{where}: missing field '{key}'")
    return data[key]


def _parse_leaf(data: Mapping, where: str, size: ImageSize) -> AnnotatedLeaf:
    leaf_id = str(_require(data, "leaf_id", where))
    where = f"{where} leaf '{leaf_id}'"
    label = LeafLabel.parse(str(_require(data, "label", where)))
    coords = {}
    for key in ("x_min", "y_min", "x_max", "y_max"):
        value = _require(data, key, where)
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ManifestError(f"{where}: field '{key}' must be a number, got {value!r}")
        coords[key] = float(value)
    try:
        box = BoundingBox(**coords)
    except GeometryError as exc:
        raise ManifestError(f"{where}: {exc}") from None
    if clip(box, size) is None:
        raise ManifestError(f"{where}: box lies entirely outside the {size.width}x{size.height} image")
    return AnnotatedLeaf(leaf_id=leaf_id, box=box, label=label)


def manifest_from_dict(data: Mapping, source: str = "<memory>") -> DatasetManifest:
    warnings: list[str] = []
    version = _require(data, "format_version", source)
    if version != MANIFEST_FORMAT_VERSION:
        raise ManifestError(f"{source}: unsupported format_version {version!r}")
    name = str(_require(data, "name", source))
    scene_list = _require(data, "scenes", source)
    if not isinstance(scene_list, list):
        raise ManifestError(f"{source}: 'scenes' must be a JSON array")
    scenes: list[Scene] = []
    seen_scene_ids: set[str] = set()
    for i, scene_data in enumerate(scene_list):
        if not isinstance(scene_data, Mapping):
            raise ManifestError(f"{source}: scene[{i}] must be a JSON object")
        where = f"{source}: scene[{i}]"
        scene_id = str(_require(scene_data, "scene_id", where))
        where = f"{source}: scene '{scene_id}'"
        if scene_id in seen_scene_ids:
            raise ManifestError(f"{where}: duplicate scene_id")
        seen_scene_ids.add(scene_id)
        try:
            size = ImageSize(int(_require(scene_data, "width", where)),
                             int(_require(scene_data, "height", where)))
        except (GeometryError, TypeError, ValueError) as exc:
            raise ManifestError(f"{where}: invalid image size: {exc}") from None
        leaves = []
        seen_leaf_ids: set[str] = set()
        for leaf_data in _require(scene_data, "leaves", where):
            leaf = _parse_leaf(leaf_data, where, size)
            if leaf.leaf_id in seen_leaf_ids:
                raise ManifestError(f"{where}: duplicate leaf_id '{leaf.leaf_id}'")
            seen_leaf_ids.add(leaf.leaf_id)
            leaves.append(leaf)
        scenes.append(Scene(
            scene_id=scene_id,
            image_ref=str(_require(scene_data, "image_ref", where)),
            size=size,
            leaves=tuple(leaves),
            source_tag=str(scene_data.get("source_tag", "")),
        ))
    manifest = DatasetManifest(name=name, scenes=tuple(scenes))
    stored = data.get("class_counts")
    if stored is not None:
        if not isinstance(stored, Mapping):
            raise ManifestError(f"{source}: 'class_counts' must be a JSON object")
        recomputed = manifest.class_counts()
        stored_counts = (stored.get("healthy"), stored.get("diseased"))
        if stored_counts != (recomputed.healthy, recomputed.diseased):
            warnings.append(
                f"{source}: stored class_counts {stored_counts} disagree with recomputed "
                f"({recomputed.healthy}, {recomputed.diseased}); recomputed counts are authoritative"
            )
    return DatasetManifest(name=manifest.name, scenes=manifest.scenes, warnings=tuple(warnings))


def load_manifest(path) -> DatasetManifest:
    try:
        data = jsonio.read_json(path)
    except jsonio.JsonFileError as exc:
        raise ManifestError(str(exc)) from None
    if not isinstance(data, Mapping):
        raise ManifestError(f"{path}: manifest root must be a JSON object")
    return manifest_from_dict(data, source=str(path))


def save_manifest(manifest: DatasetManifest, path) -> None:
    jsonio.write_json(path, manifest_to_dict(manifest))


def resolve_image_ref(scene: Scene, base_dir) -> Path:
    """Resolve a scene's image reference relative to its manifest's directory."""
    ref = Path(scene.image_ref)
    if ref.is_absolute():
        return ref
    return (Path(base_dir) / ref).resolve()


# ---------------------------------------------------------------------------
# Splitting


def split_dataset(manifest: DatasetManifest, train_fraction: float,
                  seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    """Deterministic scene-level split; train gets round-half-up(fraction*N)."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(manifest.scenes)
    if n < 2:
        raise DatasetError(f"cannot split a manifest with {n} scene(s)")
    ids = sorted(s.scene_id for s in manifest.scenes)
    rng = random.Random(f"{SPLIT_GENERATOR}|{seed}")
    rng.shuffle(ids)
    n_train = math.floor(train_fraction * n + 0.5)
    train_ids = set(ids[:n_train])
    train_scenes = tuple(s for s in manifest.scenes if s.scene_id in train_ids)
    test_scenes = tuple(s for s in manifest.scenes if s.scene_id not in train_ids)
    return (
        DatasetManifest(name=f"{manifest.name}-train", scenes=train_scenes),
        DatasetManifest(name=f"{manifest.name}-test", scenes=test_scenes),
    )


# ---------------------------------------------------------------------------
# Resize policy


def aspect_target(size: ImageSize, tolerance: float = ASPECT_TOLERANCE) -> ImageSize:
    """Target resolution for a 2:3 or 3:4 image (either orientation)."""
    ratio = min(size.width, size.height) / max(size.width, size.height)
    if abs(ratio - 2.0 / 3.0) <= tolerance:
        target = (600, 900)
    elif abs(ratio - 3.0 / 4.0) <= tolerance:
        target = (600, 800)
    else:
        raise DatasetError(
            f"aspect ratio {size.width}:{size.height} is outside tolerance {tolerance} "
            "of 2:3 or 3:4"
        )
    if size.width <= size.height:
        return ImageSize(*target)
    return ImageSize(target[1], target[0])


def resize_target(size: ImageSize, policy: str) -> ImageSize:
    if policy == RESIZE_FIXED:
        return ImageSize(512, 512)
    if policy == RESIZE_ASPECT:
        return aspect_target(size)
    raise DatasetError(f"unknown resize policy {policy!r}")


def resize_scene(scene: Scene, policy: str) -> Scene:
    """Replace the scene size by the policy target and rescale every leaf box."""
    target = resize_target(scene.size, policy)
    leaves = tuple(
        AnnotatedLeaf(leaf_id=leaf.leaf_id,
                      box=rescale(leaf.box, scene.size, target),
                      label=leaf.label)
        for leaf in scene.leaves
    )
    return Scene(scene_id=scene.scene_id, image_ref=scene.image_ref, size=target,
                 leaves=leaves, source_tag=scene.source_tag)


# ---------------------------------------------------------------------------
# Crop extraction


@dataclass(frozen=True)
class CropExtraction:
    records: tuple[CropRecord, ...]
    failures: tuple[str, ...]

    def class_counts(self) -> ClassCounts:
        return crop_class_counts(self.records)


def crop_class_counts(records: Iterable[CropRecord]) -> ClassCounts:
    healthy = diseased = 0
    for rec in records:
        if rec.label is LeafLabel.HEALTHY:
            healthy += 1
        else:
            diseased += 1
    return ClassCounts(healthy=healthy, diseased=diseased)


def extract_crops(manifest: DatasetManifest,
                  crop_size: ImageSize = DEFAULT_CROP_SIZE,
                  *,
                  image_loader: Callable[[Scene], np.ndarray] | None = None,
                  out_dir=None) -> CropExtraction:
    """One CropRecord per annotated leaf: the leaf box clipped to the image,
    stretched to `crop_size`.

    Pixels are materialized only when both `image_loader` and `out_dir` are
    given; otherwise records are bookkeeping-only. A scene whose image cannot
    be loaded has its records marked failed and the run continues.
    """
    records: list[CropRecord] = []
    failures: list[str] = []
    for scene in manifest.scenes:
        pixels = None
        scene_failed = False
        if image_loader is not None:
            try:
                pixels = image_loader(scene)
            except Exception as exc:
                failures.append(f"scene '{scene.scene_id}': {exc}")
                scene_failed = True
        for leaf in scene.leaves:
            ref = f"{scene.scene_id}/{leaf.leaf_id}.png"
            failed = scene_failed
            if pixels is not None:
                try:
                    crop = crop_resample(pixels, leaf.box, crop_size)
                    if out_dir is not None:
                        dest = Path(out_dir) / ref
                        dest.parent.mkdir(parents=True, exist_ok=True)
                        save_png(crop, dest)
                except Exception as exc:
                    failures.append(f"scene '{scene.scene_id}' leaf '{leaf.leaf_id}': {exc}")
                    failed = True
            records.append(CropRecord(
                crop_id=f"{scene.scene_id}/{leaf.leaf_id}",
                parent_scene_id=scene.scene_id,
                parent_leaf_id=leaf.leaf_id,
                label=leaf.label,
                pixels_ref=ref,
                provenance=PROVENANCE_CROPPED,
                failed=failed,
            ))
    return CropExtraction(records=tuple(records), failures=tuple(failures))


def merge_crop_sets(a: Sequence[CropRecord], b: Sequence[CropRecord],
                    namespace_a: str | None = None,
                    namespace_b: str | None = None) -> list[CropRecord]:
    """Concatenate two crop sets; duplicate crop ids (after namespacing) error."""

    def namespaced(records: Sequence[CropRecord], ns: str | None) -> list[CropRecord]:
        if ns is None:
            return list(records)
        return [
            CropRecord(crop_id=f"{ns}/{r.crop_id}", parent_scene_id=r.parent_scene_id,
                       parent_leaf_id=r.parent_leaf_id, label=r.label,
                       pixels_ref=r.pixels_ref, provenance=r.provenance, failed=r.failed)
            for r in records
        ]

    merged = namespaced(a, namespace_a) + namespaced(b, namespace_b)
    seen: set[str] = set()
    for rec in merged:
        if rec.crop_id in seen:
            raise DatasetError(f"duplicate crop_id '{rec.crop_id}' when merging crop sets")
        seen.add(rec.crop_id)
    return merged


def crop_record_to_dict(rec: CropRecord) -> dict:
    return {
        "crop_id": rec.crop_id,
        "parent_scene_id": rec.parent_scene_id,
        "parent_leaf_id": rec.parent_leaf_id,
        "label": rec.label.value,
        "pixels_ref": rec.pixels_ref,
        "provenance": rec.provenance,
        "failed": rec.failed,
    }


def crop_record_from_dict(data: Mapping, where: str = "<crop>") -> CropRecord:
    provenance = str(_require(data, "provenance", where))
    if provenance not in (PROVENANCE_CROPPED, PROVENANCE_EXTERNAL):
        raise DatasetError(f"{where}: unknown provenance {provenance!r}")
    rec = CropRecord(
        crop_id=str(_require(data, "crop_id", where)),
        parent_scene_id=data.get("parent_scene_id"),
        parent_leaf_id=data.get("parent_leaf_id"),
        label=LeafLabel.parse(str(_require(data, "label", where))),
        pixels_ref=str(_require(data, "pixels_ref", where)),
        provenance=provenance,
        failed=bool(data.get("failed", False)),
    )
    if rec.provenance == PROVENANCE_CROPPED and rec.parent_scene_id is None:
        raise DatasetError(f"{where}: cropped record '{rec.crop_id}' needs a parent_scene_id")
    return rec


def save_crop_set(records: Sequence[CropRecord], path) -> None:
    jsonio.write_json(path, [crop_record_to_dict(r) for r in records])


def load_crop_set(path) -> list[CropRecord]:
    data = jsonio.read_json(path)
    if not isinstance(data, list):
        raise DatasetError(f"{path}: crop set must be a JSON array")
    return [crop_record_from_dict(item, where=f"{path}[{i}]") for i, item in enumerate(data)]


# ---------------------------------------------------------------------------
# Crop augmentation

AUGMENT_OPS = ("flip_h", "flip_v", "rot90", "rot180", "rot270")


def augment_crop(pixels: np.ndarray, op: str) -> np.ndarray:
    """Deterministic pixel permutation; rotations are counter-clockwise and
    require a square crop."""
    if op not in AUGMENT_OPS:
        raise DatasetError(f"unknown augmentation {op!r} (expected one of {AUGMENT_OPS})")
    if pixels.ndim < 2:
        raise DatasetError("augmentation needs a 2-d pixel array")
    if op.startswith("rot") and pixels.shape[0] != pixels.shape[1]:
        raise DatasetError(f"rotations need a square crop, got {pixels.shape[0]}x{pixels.shape[1]}")
    if op == "flip_h":
        out = np.flip(pixels, axis=1)
    elif op == "flip_v":
        out = np.flip(pixels, axis=0)
    else:
        out = np.rot90(pixels, k={"rot90": 1, "rot180": 2, "rot270": 3}[op])
    return np.ascontiguousarray(out)
