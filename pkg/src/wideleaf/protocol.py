"""Client side of the line-delimited external-model protocol.

A model endpoint is a child process speaking JSON objects, one per line,
over stdin/stdout. After a hello handshake the client issues detect or
diagnose requests carrying a monotonically increasing id which the server
must echo; responses may arrive out of order for endpoints that declare
themselves concurrent. See PROTOCOL.md for byte-level examples.
"""

from __future__ import annotations

import base64
import itertools
import json
import logging
import shlex
import subprocess
import threading
from dataclasses import dataclass

import numpy as np

from .dataset import LeafLabel, Scene
from .geometry import BoundingBox, GeometryError, ImageSize, clip
from .pipeline import Crop, Detection

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1

ROLE_DETECTOR = "detector"
ROLE_DIAGNOSER = "diagnoser"

CONCURRENCY_SERIAL = "serial"
CONCURRENCY_CONCURRENT = "concurrent"

DEFAULT_HANDSHAKE_TIMEOUT = 10.0
DEFAULT_REQUEST_TIMEOUT = 60.0
_MAX_PIPELINED = 64


class ProtocolError(RuntimeError):
    """Malformed traffic, timeouts, or contract violations on an endpoint."""


class EndpointDead(ProtocolError):
    """The child process closed its stream; in-flight requests fail."""


@dataclass(frozen=True, slots=True)
class EndpointInfo:
    name: str
    version: str
    role: str
    emits_labels: bool
    concurrency: str


class _Pending:
    __slots__ = ("event", "response", "error")

    def __init__(self):
        self.event = threading.Event()
        self.response: dict | None = None
        self.error: Exception | None = None


class ModelEndpoint:
    """Spawns and talks to one external model process.

    Usable from multiple workers: requests to serial endpoints are queued
    one at a time, concurrent endpoints allow pipelining; responses are
    matched to requests by id either way.
    """

    def __init__(self, command: str | list[str], role: str, *,
                 handshake_timeout: float = DEFAULT_HANDSHAKE_TIMEOUT,
                 request_timeout: float = DEFAULT_REQUEST_TIMEOUT):
        if role not in (ROLE_DETECTOR, ROLE_DIAGNOSER):
            raise ProtocolError(f"unknown endpoint role {role!r}")
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.expected_role = role
        self.handshake_timeout = handshake_timeout
        self.request_timeout = request_timeout
        self.info: EndpointInfo | None = None
        self.box_warnings = 0
        self._proc: subprocess.Popen | None = None
        self._ids = itertools.count(1)
        self._pending: dict[int, _Pending] = {}
        self._hello = _Pending()
        self._lock = threading.Lock()
        self._write_lock = threading.Lock()
        self._slot: threading.Semaphore | None = None
        self._dead: Exception | None = None
        self._reader: threading.Thread | None = None

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> EndpointInfo:
        if self._proc is not None:
            raise ProtocolError("endpoint already started")
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, encoding="utf-8", bufsize=1,
            )
        except OSError as exc:
            raise ProtocolError(f"cannot spawn {self.command!r}: {exc}") from exc
        self._reader = threading.Thread(target=self._read_loop, daemon=True,
                                        name=f"endpoint-reader-{self._proc.pid}")
        self._reader.start()
        try:
            self._handshake()
        except BaseException:
            self.close()
            raise
        return self.info

    def close(self) -> None:
        proc = self._proc
        if proc is None:
            return
        try:
            if proc.stdin and not proc.stdin.closed:
                proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=5.0)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
        if self._reader is not None:
            self._reader.join(timeout=5.0)

    def __enter__(self) -> "ModelEndpoint":
        self.start()
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    # -- wire helpers ------------------------------------------------------

    def _send(self, payload: dict) -> None:
        if self._dead is not None:
            raise EndpointDead(f"endpoint {self.command!r} is dead: {self._dead}")
        line = json.dumps(payload, separators=(",", ":")) + "\n"
        try:
            with self._write_lock:
                self._proc.stdin.write(line)
                self._proc.stdin.flush()
        except (OSError, ValueError) as exc:
            self._mark_dead(EndpointDead(f"endpoint {self.command!r} stdin closed: {exc}"))
            raise self._dead from exc

    def _read_loop(self) -> None:
        try:
            for line in self._proc.stdout:
                line = line.strip()
                if not line:
                    continue
                try:
                    message = json.loads(line)
                except json.JSONDecodeError as exc:
                    self._mark_dead(ProtocolError(
                        f"endpoint {self.command!r} sent malformed JSON: {exc}"))
                    return
                self._dispatch(message)
        except (OSError, ValueError):
            pass
        finally:
            self._mark_dead(EndpointDead(f"endpoint {self.command!r} closed its stream"))

    def _dispatch(self, message: dict) -> None:
        if not isinstance(message, dict):
            self._mark_dead(ProtocolError(f"endpoint {self.command!r} sent a non-object line"))
            return
        if message.get("type") == "hello":
            self._hello.response = message
            self._hello.event.set()
            return
        rid = message.get("id")
        with self._lock:
            pending = self._pending.pop(rid, None)
        if pending is None:
            self._mark_dead(ProtocolError(
                f"endpoint {self.command!r} echoed unknown request id {rid!r}"))
            return
        pending.response = message
        pending.event.set()

    def _mark_dead(self, exc: Exception) -> None:
        with self._lock:
            if self._dead is None:
                self._dead = exc
            waiters = list(self._pending.values())
            self._pending.clear()
        for pending in waiters:
            pending.error = self._dead
            pending.event.set()

    # -- handshake ---------------------------------------------------------

    def _handshake(self) -> None:
        self._send({"type": "hello", "protocol": PROTOCOL_VERSION})
        if not self._hello.event.wait(self.handshake_timeout):
            raise ProtocolError(
                f"no handshake reply within {self.handshake_timeout:g}s from {self.command!r}")
        reply = self._hello.response
        if reply.get("protocol") != PROTOCOL_VERSION:
            raise ProtocolError(
                f"protocol version mismatch from {self.command!r}: "
                f"got {reply.get('protocol')!r}, need {PROTOCOL_VERSION}")
        role = reply.get("role")
        if role != self.expected_role:
            raise ProtocolError(
                f"role mismatch from {self.command!r}: got {role!r}, "
                f"need {self.expected_role!r}")
        concurrency = reply.get("concurrency", CONCURRENCY_SERIAL)
        if concurrency not in (CONCURRENCY_SERIAL, CONCURRENCY_CONCURRENT):
            raise ProtocolError(f"unknown concurrency declaration {concurrency!r}")
        self.info = EndpointInfo(
            name=str(reply.get("name", "")),
            version=str(reply.get("version", "")),
            role=role,
            emits_labels=bool(reply.get("emits_labels", False)),
            concurrency=concurrency,
        )
        self._slot = threading.Semaphore(
            1 if concurrency == CONCURRENCY_SERIAL else _MAX_PIPELINED)

    # -- requests ----------------------------------------------------------

    def _request(self, payload: dict) -> dict:
        if self.info is None:
            raise ProtocolError("endpoint not started")
        rid = next(self._ids)
        payload = {**payload, "id": rid}
        pending = _Pending()
        with self._lock:
            if self._dead is not None:
                raise EndpointDead(str(self._dead))
            self._pending[rid] = pending
        with self._slot:
            self._send(payload)
            if not pending.event.wait(self.request_timeout):
                with self._lock:
                    self._pending.pop(rid, None)
                raise ProtocolError(
                    f"no reply to request {rid} within {self.request_timeout:g}s "
                    f"from {self.command!r}")
        if pending.error is not None:
            raise pending.error
        response = pending.response
        if response.get("type") == "error":
            raise ProtocolError(
                f"endpoint {self.command!r} answered request {rid} with error: "
                f"{response.get('message')!r}")
        return response

    def _parse_box(self, data: dict, frame: ImageSize) -> Detection | None:
        try:
            box = BoundingBox(float(data["x_min"]), float(data["y_min"]),
                              float(data["x_max"]), float(data["y_max"]))
            confidence = float(data["confidence"])
            if not 0.0 <= confidence <= 1.0:
                raise ValueError(f"confidence {confidence} outside [0, 1]")
            raw_label = data.get("label")
            label = LeafLabel.parse(raw_label) if raw_label is not None else None
        except (KeyError, TypeError, ValueError, GeometryError) as exc:
            self.box_warnings += 1
            log.warning("endpoint %r: invalid box rejected (%s): %r", self.command, exc, data)
            return None
        clipped = clip(box, frame)
        if clipped is None:
            self.box_warnings += 1
            log.warning("endpoint %r: box outside the %dx%d frame rejected: %r",
                        self.command, frame.width, frame.height, data)
            return None
        return Detection(box=clipped, confidence=confidence, label=label)

    def request_detect(self, image_path, frame: ImageSize) -> list[Detection]:
        if self.info is None or self.info.role != ROLE_DETECTOR:
            raise ProtocolError("detect request needs a detector endpoint")
        response = self._request({
            "type": "detect",
            "image": str(image_path),
            "width": frame.width,
            "height": frame.height,
        })
        if response.get("type") != "detections":
            raise ProtocolError(f"expected a detections reply, got {response.get('type')!r}")
        if response.get("warning"):
            log.warning("endpoint %r: %s", self.command, response["warning"])
        boxes = response.get("boxes")
        if not isinstance(boxes, list):
            raise ProtocolError("detections reply is missing its boxes array")
        out = []
        for data in boxes:
            det = self._parse_box(data, frame)
            if det is not None:
                out.append(det)
        return out

    def request_diagnose(self, pixels: np.ndarray) -> tuple[LeafLabel, float]:
        if self.info is None or self.info.role != ROLE_DIAGNOSER:
            raise ProtocolError("diagnose request needs a diagnoser endpoint")
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
            raise ProtocolError(f"diagnose needs (h, w, 3) uint8 pixels, got "
                                f"{pixels.shape} {pixels.dtype}")
        height, width = pixels.shape[:2]
        response = self._request({
            "type": "diagnose",
            "width": width,
            "height": height,
            "pixels": base64.b64encode(np.ascontiguousarray(pixels).tobytes()).decode("ascii"),
        })
        if response.get("type") != "diagnosis":
            raise ProtocolError(f"expected a diagnosis reply, got {response.get('type')!r}")
        raw_label = response.get("label")
        try:
            label = LeafLabel.parse(raw_label)
        except Exception:
            raise ProtocolError(f"unknown diagnosis label {raw_label!r}") from None
        confidence = response.get("confidence")
        if not isinstance(confidence, (int, float)) or not 0.0 <= float(confidence) <= 1.0:
            raise ProtocolError(f"diagnosis confidence {confidence!r} outside [0, 1]")
        return (label, float(confidence))


def encode_crop(pixels: np.ndarray) -> str:
    """Base64 of raw RGB8 rows, as sent on the wire."""
    return base64.b64encode(np.ascontiguousarray(pixels).tobytes()).decode("ascii")


def decode_crop(payload: str, width: int, height: int) -> np.ndarray:
    raw = base64.b64decode(payload.encode("ascii"))
    expected = width * height * 3
    if len(raw) != expected:
        raise ProtocolError(f"crop payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).copy()


# ---------------------------------------------------------------------------
# Pipeline stage adapters


class EndpointDetector:
    """DetectorStage backed by a detector endpoint; images go by path."""

    def __init__(self, endpoint: ModelEndpoint, image_resolver):
        if endpoint.info is None:
            raise ProtocolError("endpoint must be started before wrapping")
        self.endpoint = endpoint
        self.image_resolver = image_resolver
        self.emits_labels = endpoint.info.emits_labels

    def detect(self, scene: Scene, frame: ImageSize) -> list[Detection]:
        return self.endpoint.request_detect(self.image_resolver(scene), frame)


class EndpointDiagnoser:
    """DiagnoserStage backed by a diagnoser endpoint; crops go inline."""

    def __init__(self, endpoint: ModelEndpoint):
        if endpoint.info is None:
            raise ProtocolError("endpoint must be started before wrapping")
        self.endpoint = endpoint

    def diagnose(self, crop: Crop) -> tuple[LeafLabel, float]:
        if crop.pixels is None:
            raise ProtocolError(
                f"scene '{crop.scene_id}': no pixels available for the diagnoser crop")
        return self.endpoint.request_diagnose(crop.pixels)
