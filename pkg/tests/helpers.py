"""Shared construction helpers for the test suite."""

from __future__ import annotations

import numpy as np

from wideleaf.dataset import AnnotatedLeaf, DatasetManifest, LeafLabel, Scene
from wideleaf.geometry import BoundingBox, ImageSize
from wideleaf.pipeline import Detection

H = LeafLabel.HEALTHY
D = LeafLabel.DISEASED


def box(x0, y0, x1, y1) -> BoundingBox:
    return BoundingBox(float(x0), float(y0), float(x1), float(y1))


def leaf(leaf_id, x0, y0, x1, y1, label=H) -> AnnotatedLeaf:
    return AnnotatedLeaf(leaf_id=leaf_id, box=box(x0, y0, x1, y1), label=label)


def scene(scene_id, leaves, width=100, height=100, image_ref=None, source_tag="") -> Scene:
    return Scene(
        scene_id=scene_id,
        image_ref=image_ref or f"images/{scene_id}.png",
        size=ImageSize(width, height),
        leaves=tuple(leaves),
        source_tag=source_tag,
    )


def manifest(name, scenes) -> DatasetManifest:
    return DatasetManifest(name=name, scenes=tuple(scenes))


def det(x0, y0, x1, y1, confidence=0.9, label=None, source_id=None) -> Detection:
    return Detection(box=box(x0, y0, x1, y1), confidence=confidence,
                     label=label, source_id=source_id)


def random_box(rng: np.random.Generator, field=100.0, min_side=2.0, max_side=40.0) -> BoundingBox:
    w = rng.uniform(min_side, max_side)
    h = rng.uniform(min_side, max_side)
    x0 = rng.uniform(0.0, field - w)
    y0 = rng.uniform(0.0, field - h)
    return BoundingBox(x0, y0, x0 + w, y0 + h)


def jittered_copy(rng: np.random.Generator, b: BoundingBox, amount=6.0) -> BoundingBox:
    dx0, dy0, dx1, dy1 = rng.uniform(-amount, amount, size=4)
    x0, x1 = sorted((b.x_min + dx0, b.x_max + dx1))
    y0, y1 = sorted((b.y_min + dy0, b.y_max + dy1))
    if x1 - x0 < 1.0:
        x1 = x0 + 1.0
    if y1 - y0 < 1.0:
        y1 = y0 + 1.0
    return BoundingBox(x0, y0, x1, y1)
