"""Read-only HTTP query service over an immutable model + index pair.

Endpoints:

* ``POST /query`` — multipart form with an image file plus ``k``,
  ``scenario``, ``magnification``, and an optional ``true_label``;
  responds with the ranked hits as JSON.
* ``GET /index/stats`` — entry counts by label and magnification.
* ``GET /healthz`` — 200 once the model and index are loaded, 503 before.
* ``GET /thumb/<entry-id>`` — the indexed image file, resolved through
  the manifests found under the data root and confined to it.

Any other GET is served from the optional UI root (static files).  The
service never mutates its state, so any number of requests may run
concurrently; reindexing means restarting.
"""

from __future__ import annotations

import io
import json
import mimetypes
import uuid
from dataclasses import dataclass, field
from email.parser import BytesParser
from email.policy import default as _email_policy
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import modelio
from . import retrieval as rt
from .datasets import load_manifest
from .errors import ConfigError, DataError, FeatureIndexError
from .version import __version__


@dataclass
class ServiceState:
    """Everything a request needs; immutable once ``ready`` flips on."""

    model: object = None
    index: rt.FeatureIndex | None = None
    data_root: Path | None = None
    ui_root: Path | None = None
    id_to_path: dict[str, Path] = field(default_factory=dict)
    entries_by_id: dict[str, rt.IndexEntry] = field(default_factory=dict)
    ready: bool = False


def _scan_thumbnails(data_root: Path) -> dict[str, Path]:
    mapping: dict[str, Path] = {}
    for manifest_path in sorted(data_root.rglob("manifest.csv")):
        try:
            manifest = load_manifest(manifest_path)
        except DataError:
            continue
        for record in manifest.records:
            resolved = Path(record.path).resolve()
            if resolved.is_relative_to(data_root.resolve()):
                mapping[record.id] = resolved
    return mapping


def load_state(model_path, index_path, data_root=None, ui_root=None) -> ServiceState:
    state = ServiceState()
    state.model = modelio.load_model(model_path)
    state.index = rt.load_index(index_path)
    if state.index.layout_id != state.model.layout_id:
        raise FeatureIndexError(
            f"index layout {state.index.layout_id.hex()} does not match model "
            f"{state.model.layout_id.hex()}"
        )
    state.entries_by_id = {e.id: e for e in state.index.entries}
    if data_root is not None:
        state.data_root = Path(data_root).resolve()
        state.id_to_path = _scan_thumbnails(state.data_root)
    if ui_root is not None:
        state.ui_root = Path(ui_root).resolve()
    state.ready = True
    return state


def _decode_upload(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            if img.mode not in ("RGB", "L"):
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ConfigError(f"cannot decode uploaded image: {exc}") from None
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr])
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def _parse_multipart(content_type: str, body: bytes) -> dict[str, bytes]:
    if not content_type or "multipart/form-data" not in content_type:
        raise ConfigError("expected a multipart/form-data request")
    message = BytesParser(policy=_email_policy).parsebytes(
        b"Content-Type: " + content_type.encode("latin-1") + b"\r\n\r\n" + body
    )
    if not message.is_multipart():
        raise ConfigError("malformed multipart body")
    fields: dict[str, bytes] = {}
    for part in message.iter_parts():
        name = part.get_param("name", header="content-disposition")
        if name:
            fields[name] = part.get_payload(decode=True) or b""
    return fields


def run_query(state: ServiceState, fields: dict[str, bytes]) -> dict:
    if "image" not in fields or not fields["image"]:
        raise ConfigError("missing image field")
    try:
        k = int(fields.get("k", b"5").decode())
    except ValueError:
        raise ConfigError("k must be an integer") from None
    if not 1 <= k <= 50:
        raise ConfigError(f"k must be in [1, 50], got {k}")
    scenario = fields.get("scenario", b"sen1").decode().lower()
    magnification = fields.get("magnification", b"").decode() or None
    true_label = fields.get("true_label", b"").decode() or None

    image = _decode_upload(fields["image"])
    result = rt.search(
        state.index, state.model, image, k, scenario, query_magnification=magnification
    )
    hits = []
    for hit in result.hits:
        entry = state.entries_by_id[hit.entry_id]
        hits.append(
            {
                "entry_id": hit.entry_id,
                "distance": hit.distance,
                "label": hit.label,
                "magnification": hit.magnification,
                "center": entry.center,
                "thumbnail_url": f"/thumb/{hit.entry_id}" if hit.entry_id in state.id_to_path else None,
            }
        )
    return {
        "hits": hits,
        "elapsed_seconds": result.elapsed_seconds,
        "grouped_by_magnification": scenario == "sen2",
        "k": k,
        "scenario": scenario,
        "true_label": true_label,
    }


def index_stats(state: ServiceState) -> dict:
    return {
        "entries": len(state.index),
        "per_label": state.index.label_counts(),
        "per_magnification": state.index.magnification_counts(),
        "layout_id": state.index.layout_id.hex(),
    }


class ServiceHandler(BaseHTTPRequestHandler):
    server_version = "fedsearch/" + __version__

    @property
    def state(self) -> ServiceState:
        return self.server.state

    def log_message(self, format, *args):  # quiet by default; tests run many requests
        pass

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_file(self, path: Path) -> None:
        content_type = mimetypes.guess_type(str(path))[0] or "application/octet-stream"
        data = path.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        if self.path == "/healthz":
            if not self.state.ready:
                self._send_json(503, {"error": "model and index still loading"})
            else:
                self._send_json(200, {"version": __version__,
                                      "layout_id": self.state.index.layout_id.hex()})
            return
        if not self.state.ready:
            self._send_json(503, {"error": "service not ready"})
            return
        if self.path == "/index/stats":
            self._send_json(200, index_stats(self.state))
            return
        if self.path.startswith("/thumb/"):
            entry_id = self.path[len("/thumb/") :]
            target = self.state.id_to_path.get(entry_id)
            if target is None or not target.is_file():
                self._send_json(404, {"error": f"no thumbnail for {entry_id!r}"})
                return
            self._send_file(target)
            return
        self._serve_static()

    def _serve_static(self):
        root = self.state.ui_root
        if root is None:
            self._send_json(404, {"error": "not found"})
            return
        relative = self.path.lstrip("/") or "index.html"
        target = (root / relative.split("?")[0]).resolve()
        if not target.is_relative_to(root) or not target.is_file():
            self._send_json(404, {"error": "not found"})
            return
        self._send_file(target)

    def do_POST(self):
        if self.path != "/query":
            self._send_json(404, {"error": "not found"})
            return
        if not self.state.ready:
            self._send_json(503, {"error": "service not ready"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            fields = _parse_multipart(self.headers.get("Content-Type", ""), self.rfile.read(length))
            payload = run_query(self.state, fields)
        except ConfigError as exc:
            self._send_json(400, {"error": str(exc)})
        except FeatureIndexError as exc:
            self._send_json(422, {"error": str(exc)})
        except Exception:
            incident = uuid.uuid4().hex
            self._send_json(500, {"error": f"internal error (incident {incident})"})
        else:
            self._send_json(200, payload)


def make_server(state: ServiceState, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), ServiceHandler)
    server.state = state
    return server


def serve(model_path, index_path, host="127.0.0.1", port=8080, data_root=None, ui_root=None) -> None:
    state = load_state(model_path, index_path, data_root=data_root, ui_root=ui_root)
    server = make_server(state, host, port)
    try:
        server.serve_forever()
    finally:
        server.server_close()
