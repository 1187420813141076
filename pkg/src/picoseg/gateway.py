"""HTTP gateway for interactive prompting: load a frame, segment box prompts
against it, and surface model metadata to the browser UI.

Endpoints
---------

* ``POST /frames``   raw image bytes -> {frame_id, width, height}
* ``POST /segment``  {frame_id, bbox: [x,y,w,h]} -> {mask, rect, latency_ms, model}
* ``GET /model``     {params, macs, size_bytes, quantized}
* ``GET /healthz``   {"ok": true}
* ``GET /``          the static UI bundle, when one was supplied

Masks come back as the same uncompressed column-major RLE the dataset codec
uses, so the browser decodes them with one shared convention. Prompts are
rate limited per session, first-wins: inside any 150 ms window exactly the
first prompt is accepted and the rest answer 429 with the remaining wait.
Sessions are named by the ``X-Session`` request header; clients that never
set it share the ``"default"`` session.

The request/response shape here is a deliberate simplification of an
asynchronous on-sensor pipeline; each prompt is answered synchronously.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .cocoio import encode_rle
from .engine import FloatRunner, Int8Runner, model_report, segment
from .imgio import ImageFormatError, decode_image
from .net import NetSpec, load_weights
from .quantize import import_int8
from .roi import BBox, PromptConfig, RoiError
from .tensorkit import Tensor

log = logging.getLogger("picoseg.gateway")

WINDOW_MS = 150.0


class GatewayError(Exception):
    """Carries the HTTP status and machine-readable class for one failure."""

    def __init__(self, status: int, error_class: str, message: str,
                 retry_after_ms: float | None = None):
        super().__init__(message)
        self.status = status
        self.error_class = error_class
        self.retry_after_ms = retry_after_ms

    def body(self) -> dict:
        error = {"class": self.error_class, "message": str(self)}
        if self.retry_after_ms is not None:
            error["retry_after_ms"] = self.retry_after_ms
        return {"error": error}


@dataclass
class Session:
    """Per-client state: one active frame and the last accepted prompt time."""

    sid: str
    frame: Tensor | None = None
    frame_id: int | None = None
    last_accept_ms: float | None = None


class SegmentService:
    """Transport-independent core; the HTTP handler is a thin shell over it.

    `clock` returns monotonic milliseconds and exists so tests can drive the
    rate limiter deterministically. The loaded weights are never written to;
    prompt handling only reads them.
    """

    def __init__(self, runner, *, clock=None,
                 prompt: PromptConfig = PromptConfig(),
                 window_ms: float = WINDOW_MS):
        self.runner = runner
        self.prompt = prompt
        self.window_ms = float(window_ms)
        self.clock = clock if clock is not None else \
            (lambda: time.monotonic() * 1000.0)
        self._sessions: dict[str, Session] = {}
        self._frame_ids = itertools.count(1)
        self._lock = threading.Lock()

    def _session(self, sid: str) -> Session:
        # caller holds the lock
        if sid not in self._sessions:
            self._sessions[sid] = Session(sid=sid)
        return self._sessions[sid]

    def put_frame(self, sid: str, data: bytes) -> dict:
        if not data:
            raise GatewayError(400, "empty", "zero-byte frame upload")
        try:
            frame = decode_image(data)
        except ImageFormatError as exc:
            raise GatewayError(415, "unsupported_media", str(exc)) from exc
        with self._lock:
            session = self._session(sid)
            session.frame = frame          # replaces any previous frame
            session.frame_id = next(self._frame_ids)
            frame_id = session.frame_id
        return {"frame_id": frame_id, "width": frame.w, "height": frame.h}

    def _parse_box(self, bbox) -> BBox:
        if (not isinstance(bbox, (list, tuple)) or len(bbox) != 4
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                           for v in bbox)):
            raise GatewayError(400, "bad_request",
                               "bbox must be [x, y, w, h] numbers")
        try:
            return BBox(x=float(bbox[0]), y=float(bbox[1]),
                        w=float(bbox[2]), h=float(bbox[3]))
        except RoiError as exc:
            raise GatewayError(400, "roi", str(exc)) from exc

    def segment_prompt(self, sid: str, payload: dict) -> dict:
        if not isinstance(payload, dict) or "frame_id" not in payload \
                or "bbox" not in payload:
            raise GatewayError(400, "bad_request",
                               "body must carry frame_id and bbox")
        box = self._parse_box(payload["bbox"])
        with self._lock:
            session = self._session(sid)
            if session.frame is None or session.frame_id != payload["frame_id"]:
                raise GatewayError(404, "unknown_frame",
                                   f"no active frame {payload['frame_id']!r}")
            frame = session.frame
            now = self.clock()
            if session.last_accept_ms is not None:
                elapsed = now - session.last_accept_ms
                if elapsed < self.window_ms:
                    raise GatewayError(
                        429, "rate_limited",
                        "prompt arrived inside the rate-limit window",
                        retry_after_ms=self.window_ms - elapsed)
            session.last_accept_ms = now
        try:
            result = segment(frame, box, self.runner, cfg=self.prompt)
        except RoiError as exc:
            raise GatewayError(400, "roi", str(exc)) from exc
        size, counts = encode_rle(result.mask)
        return {
            "mask": {"size": list(size), "counts": list(counts)},
            "rect": {"x1": result.rect.x1, "y1": result.rect.y1,
                     "x2": result.rect.x2, "y2": result.rect.y2,
                     "src_w": result.rect.src_w, "src_h": result.rect.src_h},
            "latency_ms": result.latency_ms,
            "model": "int8" if self.runner.quantized else "fp32",
        }

    def model_info(self) -> dict:
        return model_report(self.runner.spec, self.runner.quantized)


# ---------------------------------------------------------------- http shell

_MIME = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".mjs": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".map": "application/json",
    ".svg": "image/svg+xml",
    ".png": "image/png",
    ".ico": "image/x-icon",
}

_FALLBACK_PAGE = (b"<!doctype html><title>picoseg</title>"
                  b"<p>UI bundle not found; build the frontend and pass --dist.")


class _Handler(BaseHTTPRequestHandler):
    server_version = "picoseg-gateway"
    protocol_version = "HTTP/1.1"

    # quiet by default; route access logs through the package logger
    def log_message(self, fmt, *args):
        log.info("%s " + fmt, self.address_string(), *args)

    @property
    def service(self) -> SegmentService:
        return self.server.service

    def _sid(self) -> str:
        return self.headers.get("X-Session", "default")

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length > 0 else b""

    def _send(self, status: int, payload: bytes, content_type: str,
              extra: dict | None = None):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(payload)))
        for name, value in (extra or {}).items():
            self.send_header(name, value)
        self.end_headers()
        self.wfile.write(payload)

    def _json(self, status: int, obj: dict, extra: dict | None = None):
        self._send(status, json.dumps(obj).encode("utf-8"),
                   "application/json", extra)

    def _fail(self, exc: GatewayError):
        extra = {}
        if exc.retry_after_ms is not None:
            extra["Retry-After"] = str(max(1, round(exc.retry_after_ms / 1000)))
        self._json(exc.status, exc.body(), extra)

    def do_GET(self):
        if self.path == "/healthz":
            self._json(200, {"ok": True})
        elif self.path == "/model":
            self._json(200, self.service.model_info())
        else:
            self._static(self.path)

    def do_POST(self):
        try:
            if self.path == "/frames":
                self._json(200, self.service.put_frame(self._sid(), self._body()))
            elif self.path == "/segment":
                raw = self._body()
                try:
                    payload = json.loads(raw.decode("utf-8")) if raw else None
                except (ValueError, UnicodeDecodeError):
                    raise GatewayError(400, "bad_request",
                                       "body is not valid JSON") from None
                self._json(200, self.service.segment_prompt(self._sid(), payload))
            else:
                raise GatewayError(404, "not_found", f"no such endpoint {self.path}")
        except GatewayError as exc:
            self._fail(exc)

    def _static(self, path: str):
        root: Path | None = self.server.static_root
        if root is None:
            self._send(200 if path == "/" else 404, _FALLBACK_PAGE,
                       "text/html; charset=utf-8")
            return
        name = path.split("?", 1)[0].lstrip("/") or "index.html"
        target = (root / name).resolve()
        # refuse anything that escapes the bundle directory
        if not target.is_relative_to(root.resolve()) or not target.is_file():
            self._json(404, {"error": {"class": "not_found",
                                       "message": f"no such file {path}"}})
            return
        mime = _MIME.get(target.suffix, "application/octet-stream")
        self._send(200, target.read_bytes(), mime)


class GatewayServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, service: SegmentService,
                 static_root: Path | None = None):
        super().__init__(address, _Handler)
        self.service = service
        self.static_root = static_root


def make_server(service: SegmentService, listen: str = "127.0.0.1:0",
                static_root=None) -> GatewayServer:
    host, _, port = listen.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"--listen wants host:port, got {listen!r}")
    root = Path(static_root) if static_root is not None else None
    return GatewayServer((host, int(port)), service, static_root=root)


def _default_static_root() -> Path | None:
    # the built frontend, when this checkout has one
    root = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    return root if root.is_dir() else None


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="picoseg-serve",
        description="Serve the interactive segmentation gateway.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--listen", default="127.0.0.1:8756",
                        help="host:port to bind")
    parser.add_argument("--weights", default=None,
                        help="float32 weight file (PSW1)")
    parser.add_argument("--quant", default=None,
                        help="int8 model file (PSQ1); overrides --weights")
    parser.add_argument("--seed", type=int, default=42,
                        help="seed for freshly initialized weights when no "
                             "model file was given")
    parser.add_argument("--size", type=int, default=96,
                        help="network input size")
    parser.add_argument("--dist", default=None,
                        help="static UI bundle directory (defaults to "
                             "frontend/dist when present)")
    args = parser.parse_args(argv)

    spec = NetSpec(input_size=args.size)
    if args.quant is not None:
        qstore, qparams = import_int8(args.quant, spec)
        runner = Int8Runner(qstore, qparams)
    elif args.weights is not None:
        runner = FloatRunner(load_weights(args.weights, spec))
    else:
        from .net import build
        log.warning("no model file given; serving seed-%d weights", args.seed)
        runner = FloatRunner(build(spec, seed=args.seed))

    static_root = Path(args.dist) if args.dist else _default_static_root()
    server = make_server(SegmentService(runner), args.listen, static_root)
    host, port = server.server_address[:2]
    print(f"picoseg gateway on http://{host}:{port}/ "
          f"({'int8' if runner.quantized else 'fp32'})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    import sys
    sys.exit(main())
