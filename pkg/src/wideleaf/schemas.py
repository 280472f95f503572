"""JSON schemas for every machine-readable file the toolkit writes.

Outputs are validated against these before hitting disk, so schema drift
fails the producing command instead of a downstream consumer.
"""

from __future__ import annotations

import jsonschema


class SchemaValidationError(ValueError):
    pass


_LABEL = {"enum": ["healthy", "diseased"]}
_OPTIONAL_LABEL = {"enum": ["healthy", "diseased", None]}

_LEAF = {
    "type": "object",
    "required": ["leaf_id", "label", "x_min", "y_min", "x_max", "y_max"],
    "properties": {
        "leaf_id": {"type": "string"},
        "label": _LABEL,
        "x_min": {"type": "number"},
        "y_min": {"type": "number"},
        "x_max": {"type": "number"},
        "y_max": {"type": "number"},
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format_version", "name", "scenes"],
    "properties": {
        "format_version": {"const": 1},
        "name": {"type": "string"},
        "scenes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["scene_id", "image_ref", "width", "height", "leaves"],
                "properties": {
                    "scene_id": {"type": "string"},
                    "image_ref": {"type": "string"},
                    "width": {"type": "integer", "minimum": 1},
                    "height": {"type": "integer", "minimum": 1},
                    "source_tag": {"type": "string"},
                    "leaves": {"type": "array", "items": _LEAF},
                },
            },
        },
    },
}

CROP_SET_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["crop_id", "label", "pixels_ref", "provenance", "failed"],
        "properties": {
            "crop_id": {"type": "string"},
            "parent_scene_id": {"type": ["string", "null"]},
            "parent_leaf_id": {"type": ["string", "null"]},
            "label": _LABEL,
            "pixels_ref": {"type": "string"},
            "provenance": {"enum": ["cropped_from_wide_angle", "external_single_leaf"]},
            "failed": {"type": "boolean"},
        },
    },
}

PREDICTIONS_SCHEMA = {
    "type": "object",
    "required": ["format_version", "run", "scenes"],
    "properties": {
        "format_version": {"const": 1},
        "run": {
            "type": "object",
            "required": ["system", "pipeline", "config"],
            "properties": {
                "system": {"type": "string"},
                "pipeline": {"enum": ["end_to_end", "two_stage"]},
                "config": {"type": "object"},
            },
        },
        "scenes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["scene_id", "detections"],
                "properties": {
                    "scene_id": {"type": "string"},
                    "detections": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["x_min", "y_min", "x_max", "y_max",
                                         "label", "confidence"],
                            "properties": {
                                "x_min": {"type": "number"},
                                "y_min": {"type": "number"},
                                "x_max": {"type": "number"},
                                "y_max": {"type": "number"},
                                "label": _OPTIONAL_LABEL,
                                "confidence": {"type": "number", "minimum": 0, "maximum": 1},
                            },
                        },
                    },
                },
            },
        },
    },
}

_METRIC_BLOCK = {
    "type": "object",
    "required": ["f1", "p", "r", "tp", "fp", "fn"],
    "properties": {
        "f1": {"type": "number"},
        "p": {"type": "number"},
        "r": {"type": "number"},
        "tp": {"type": "integer", "minimum": 0},
        "fp": {"type": "integer", "minimum": 0},
        "fn": {"type": "integer", "minimum": 0},
        "precision_undefined": {"type": "boolean"},
        "recall_undefined": {"type": "boolean"},
    },
}

REPORT_LIST_SCHEMA = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "object",
        "required": ["system", "detector", "healthy", "diseased", "average_f1", "counts"],
        "properties": {
            "system": {"type": "string"},
            "detector": _METRIC_BLOCK,
            "healthy": _METRIC_BLOCK,
            "diseased": _METRIC_BLOCK,
            "average_f1": {"type": "number"},
            "counts": {
                "type": "object",
                "required": ["scenes", "gold_leaves", "predictions"],
            },
            "warnings": {"type": "array", "items": {"type": "string"}},
        },
    },
}

SHIFT_SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["end_to_end", "two_stage"],
    "additionalProperties": {
        "type": "object",
        "additionalProperties": {"type": "number"},
    },
}


def validate_output(instance, schema, what: str) -> None:
    try:
        jsonschema.validate(instance=instance, schema=schema)
    except jsonschema.ValidationError as exc:
        raise SchemaValidationError(f"{what}: {exc.message}") from None
