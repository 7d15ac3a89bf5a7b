"""HTTP prediction service for suspect-model checkpoints.

Protocol::

    GET  /health   -> {"status": "ok", "classes": M}
    POST /predict  {"inputs": [image, ...]} -> {"labels": [int, ...]}

Each image is a nested (C, H, W) float list or a flat row-major list.
Errors: malformed JSON 400, wrong tensor shape 422, batch too large 413.
"""
from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .transfer import SuspectModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ServeConfig:
    checkpoint: str = ""
    host: str = "127.0.0.1"
    port: int = 8000
    max_batch: int = 1024
    include_probs: bool = False
    # when set, inputs with pixels outside [0, 1] get this label instead of a prediction
    out_of_range_label: Optional[int] = None

    def __post_init__(self):
        if self.max_batch < 1:
            raise ConfigurationError("max_batch must be >= 1")


class _BadRequest(Exception):
    def __init__(self, status, message):
        super().__init__(message)
        self.status = status


class PredictionServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, model: SuspectModel, config: ServeConfig):
        self.model = model
        self.config = config
        # torch modules are not guaranteed re-entrant; inference is serialized
        self.lock = threading.Lock()
        super().__init__((config.host, config.port), _Handler)

    @property
    def url(self):
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def parse_inputs(self, body: bytes) -> np.ndarray:
        try:
            payload = json.loads(body)
        except (ValueError, UnicodeDecodeError) as exc:
            raise _BadRequest(400, f"malformed JSON: {exc}")
        if not isinstance(payload, dict) or "inputs" not in payload:
            raise _BadRequest(400, 'body must be an object with an "inputs" field')
        inputs = payload["inputs"]
        if not isinstance(inputs, list):
            raise _BadRequest(400, '"inputs" must be a list')
        if len(inputs) > self.config.max_batch:
            raise _BadRequest(413, f"batch of {len(inputs)} exceeds limit {self.config.max_batch}")
        shape = self.model.encoder.input_shape
        try:
            arr = np.asarray(inputs, dtype=np.float32)
        except (ValueError, TypeError):
            raise _BadRequest(422, "inputs are not a rectangular numeric array")
        if len(inputs) == 0:
            return np.empty((0,) + shape, np.float32)
        if arr.ndim == 2 and arr.shape[1] == int(np.prod(shape)):
            arr = arr.reshape((len(arr),) + shape)
        if arr.shape[1:] != shape:
            raise _BadRequest(422, f"expected inputs of shape (N, {', '.join(map(str, shape))}), got {arr.shape}")
        return arr

    def predict(self, images: np.ndarray) -> dict:
        if len(images) == 0:
            return {"labels": []}
        with self.lock:
            logits = self.model.logits(images)
        labels = np.argmax(logits, axis=1)
        if self.config.out_of_range_label is not None:
            bad = ((images < 0) | (images > 1)).reshape(len(images), -1).any(axis=1)
            labels = np.where(bad, self.config.out_of_range_label, labels)
        reply = {"labels": labels.astype(int).tolist()}
        if self.config.include_probs:
            z = logits - logits.max(axis=1, keepdims=True)
            p = np.exp(z)
            reply["probs"] = (p / p.sum(axis=1, keepdims=True)).tolist()
        return reply


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: PredictionServer

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, status, obj):
        body = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/health":
            self._send(200, {"status": "ok", "classes": self.server.model.n_classes})
        else:
            self._send(404, {"error": f"no route {self.path}"})

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length)
        if self.path != "/predict":
            self._send(404, {"error": f"no route {self.path}"})
            return
        try:
            images = self.server.parse_inputs(body)
            self._send(200, self.server.predict(images))
        except _BadRequest as exc:
            self._send(exc.status, {"error": str(exc)})


def make_server(config: ServeConfig, model: Optional[SuspectModel] = None) -> PredictionServer:
    """Bind a server without starting it. Port 0 picks a free port."""
    if model is None:
        model = SuspectModel.load(config.checkpoint)
    return PredictionServer(model, config)


def serve(config: ServeConfig, model: Optional[SuspectModel] = None, background=True) -> PredictionServer:
    """Start serving. With ``background`` the loop runs in a daemon thread
    and the server is returned; call ``shutdown()`` then ``server_close()``."""
    server = make_server(config, model)
    log.info("serving %s on %s", config.checkpoint or "in-memory model", server.url)
    if background:
        threading.Thread(target=server.serve_forever, daemon=True).start()
        return server
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return server
