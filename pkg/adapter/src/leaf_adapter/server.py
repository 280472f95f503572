"""Line-protocol model server: replay detector / green-dominance diagnoser.

Speaks protocol version 1 over stdin/stdout, one JSON object per line.
Detector mode answers detect requests by replaying the annotation manifest,
keyed by image path, optionally corrupted (misses, corner jitter, spurious
boxes). Diagnoser mode labels a crop healthy when its mean green channel
exceeds a threshold: a deliberately naive stand-in for a trained
classifier, useful only for protocol conformance and demos.

Standard library only; consumes the toolkit solely through its external
interfaces (the manifest JSON schema and the wire protocol).
"""

from __future__ import annotations

import base64
import json
import math
import random
import sys
from dataclasses import dataclass
from pathlib import Path

PROTOCOL_VERSION = 1

MODE_DETECTOR = "detector"
MODE_DIAGNOSER = "diagnoser"

ADAPTER_NAME = "leaf-adapter"
ADAPTER_VERSION = "0.1.0"


class AdapterError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    mode: str
    manifest: str | None = None
    green_threshold: float = 100.0
    seed: int = 0
    miss_rate: float = 0.0
    spurious_rate: float = 0.0
    jitter_sigma: float = 0.0

    def __post_init__(self):
        if self.mode not in (MODE_DETECTOR, MODE_DIAGNOSER):
            raise AdapterError(f"unknown mode {self.mode!r}")
        if self.mode == MODE_DETECTOR and not self.manifest:
            raise AdapterError("detector mode needs --manifest")
        if not 0.0 <= self.green_threshold <= 255.0:
            raise AdapterError("--green-threshold must be in [0, 255]")
        if not 0.0 <= self.miss_rate <= 1.0:
            raise AdapterError("--miss-rate must be in [0, 1]")
        if self.spurious_rate < 0.0 or self.jitter_sigma < 0.0:
            raise AdapterError("corruption rates must be non-negative")

    @property
    def corrupting(self) -> bool:
        return self.miss_rate > 0 or self.spurious_rate > 0 or self.jitter_sigma > 0


def load_scene_index(manifest_path: str) -> dict:
    """Scenes keyed by image path: resolved absolute path, raw ref and basename."""
    path = Path(manifest_path)
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("format_version") != 1:
        raise AdapterError(f"unsupported manifest format_version {data.get('format_version')!r}")
    base_dir = path.resolve().parent
    index: dict[str, dict] = {}
    for scene in data.get("scenes", []):
        ref = scene["image_ref"]
        keys = {ref, Path(ref).name, str((base_dir / ref).resolve())}
        for key in keys:
            index.setdefault(key, scene)
    return index


def _lookup(index: dict, image: str) -> dict | None:
    for key in (image, str(Path(image).resolve()), Path(image).name):
        if key in index:
            return index[key]
    return None


def _poisson(rng: random.Random, lam: float) -> int:
    # Knuth's algorithm; lam stays small here (boxes per scene)
    threshold = math.exp(-lam)
    k, p = 0, 1.0
    while True:
        p *= rng.random()
        if p <= threshold:
            return k
        k += 1


def _replay_boxes(config: AdapterConfig, scene: dict, image: str,
                  width: int, height: int) -> list[dict]:
    sx = width / scene["width"]
    sy = height / scene["height"]
    boxes = []
    for leaf in scene.get("leaves", []):
        coords = [leaf["x_min"] * sx, leaf["y_min"] * sy,
                  leaf["x_max"] * sx, leaf["y_max"] * sy]
        confidence = 1.0
        if config.corrupting:
            rng = random.Random(f"{config.seed}|{image}|{leaf['leaf_id']}")
            if rng.random() < config.miss_rate:
                continue
            if config.jitter_sigma > 0:
                jittered = [c + rng.gauss(0.0, config.jitter_sigma) for c in coords]
                x0, x1 = sorted(jittered[0::2])
                y0, y1 = sorted(jittered[1::2])
                x0, x1 = max(x0, 0.0), min(x1, float(width))
                y0, y1 = max(y0, 0.0), min(y1, float(height))
                if x0 < x1 and y0 < y1:
                    coords = [x0, y0, x1, y1]
            confidence = rng.uniform(0.6, 1.0)
        boxes.append({"x_min": coords[0], "y_min": coords[1],
                      "x_max": coords[2], "y_max": coords[3],
                      "confidence": confidence})
    if config.spurious_rate > 0:
        rng = random.Random(f"{config.seed}|{image}|spurious")
        for _ in range(_poisson(rng, config.spurious_rate)):
            w = rng.uniform(0.05, 0.25) * width
            h = rng.uniform(0.05, 0.25) * height
            x0 = rng.uniform(0.0, width - w)
            y0 = rng.uniform(0.0, height - h)
            boxes.append({"x_min": x0, "y_min": y0, "x_max": x0 + w, "y_max": y0 + h,
                          "confidence": rng.uniform(0.5, 0.9)})
    return boxes


def _diagnose(config: AdapterConfig, request: dict) -> dict:
    raw = base64.b64decode(request["pixels"])
    width, height = int(request["width"]), int(request["height"])
    expected = width * height * 3
    if len(raw) != expected:
        raise AdapterError(f"crop payload is {len(raw)} bytes, expected {expected}")
    greens = raw[1::3]
    mean_green = sum(greens) / len(greens)
    label = "healthy" if mean_green > config.green_threshold else "diseased"
    confidence = 0.5 + min(0.5, abs(mean_green - config.green_threshold) / 255.0)
    return {"label": label, "confidence": confidence}


def serve(config: AdapterConfig, stdin=None, stdout=None) -> int:
    """Answer requests until the input stream closes; returns exit status."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    index = load_scene_index(config.manifest) if config.mode == MODE_DETECTOR else {}

    def emit(obj):
        stdout.write(json.dumps(obj) + "\n")
        stdout.flush()

    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            emit({"type": "error", "id": None, "message": f"malformed JSON: {exc}"})
            continue
        rtype = request.get("type")
        rid = request.get("id")
        if rtype == "hello":
            emit({
                "type": "hello",
                "protocol": PROTOCOL_VERSION,
                "role": config.mode,
                "name": ADAPTER_NAME,
                "version": ADAPTER_VERSION,
                "emits_labels": False,
                "concurrency": "serial",
            })
        elif rtype == "detect" and config.mode == MODE_DETECTOR:
            image = str(request.get("image", ""))
            scene = _lookup(index, image)
            if scene is None:
                emit({"type": "detections", "id": rid, "boxes": [],
                      "warning": f"unknown image path {image!r}"})
                continue
            boxes = _replay_boxes(config, scene, image,
                                  int(request["width"]), int(request["height"]))
            emit({"type": "detections", "id": rid, "boxes": boxes})
        elif rtype == "diagnose" and config.mode == MODE_DIAGNOSER:
            try:
                result = _diagnose(config, request)
            except (AdapterError, KeyError, ValueError) as exc:
                emit({"type": "error", "id": rid, "message": str(exc)})
                continue
            emit({"type": "diagnosis", "id": rid, **result})
        else:
            emit({"type": "error", "id": rid,
                  "message": f"unknown request type {rtype!r} for role {config.mode!r}"})
    return 0
