"""Canonical JSON reading/writing.

All machine-readable outputs use a fixed key order (insertion order of the
producing code), two-space indentation, UTF-8, shortest round-trip float
representation (Python's default) and a trailing newline, so identical data
serializes to identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path


class JsonFileError(ValueError):
    """Parse failure with file/line context."""


def dumps_canonical(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_canonical(obj), encoding="utf-8")


def read_json(path):
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise JsonFileError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
