"""Black-box encoder access.

Everything downstream of pre-training talks to encoders only through
:class:`BlackBoxEncoder.embed_batch`, so locally trained checkpoints and a
remote HTTP service are interchangeable.

Wire protocol (remote): ``POST <url>`` with JSON body
``{"images": [<base64 PNG>, ...]}``; the response is JSON
``{"features": [[float, ...], ...], "dim": d}``. An optional bearer token is
sent as ``Authorization: Bearer <token>``.
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import requests
import torch
from PIL import Image

from .contrastive.training import EncoderCheckpoint

log = logging.getLogger(__name__)


class EncoderError(RuntimeError):
    pass


class TransportError(EncoderError):
    pass


class ProtocolError(EncoderError):
    pass


class DimensionMismatchError(EncoderError):
    pass


def _as_batch(images):
    if isinstance(images, np.ndarray):
        if images.ndim == 3:
            images = images[None]
        return images
    if len(images) == 0:
        return np.zeros((0, 0, 0, 3), dtype=np.float32)
    return np.stack([np.asarray(im, dtype=np.float32) for im in images])


class BlackBoxEncoder:
    """Maps a batch of HxWx3 images in [0, 1] to a batch of d-vectors."""

    dim: int
    resolution: int | None = None

    def digest(self) -> str:
        raise NotImplementedError

    def _query(self, batch: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def embed_batch(self, images) -> np.ndarray:
        batch = _as_batch(images)
        if len(batch) == 0:
            return np.zeros((0, self.dim or 0), dtype=np.float32)
        if self.resolution is not None and batch.shape[1:3] != (self.resolution, self.resolution):
            raise DimensionMismatchError(
                f"encoder expects {self.resolution}x{self.resolution} images, got "
                f"{batch.shape[1]}x{batch.shape[2]}")
        feats = np.asarray(self._query(batch), dtype=np.float32)
        if feats.shape != (len(batch), self.dim):
            raise DimensionMismatchError(
                f"expected features of shape {(len(batch), self.dim)}, got {feats.shape}")
        return feats


def embed_batch(enc: BlackBoxEncoder, images) -> np.ndarray:
    return enc.embed_batch(images)


class LocalEncoder(BlackBoxEncoder):
    """Runs an in-process torch module in evaluation mode."""

    def __init__(self, model, dim, resolution=32, batch_size=512, name="local"):
        self.model = model.eval()
        self.dim = int(dim)
        self.resolution = resolution
        self.batch_size = batch_size
        self.name = name
        self._lock = threading.Lock()

    def digest(self):
        h = hashlib.sha256(self.name.encode())
        for k, v in self.model.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]

    @torch.no_grad()
    def _query(self, batch):
        out = []
        # eval-mode forward is read-only, but torch modules are not documented thread-safe
        with self._lock:
            for b in range(0, len(batch), self.batch_size):
                x = torch.from_numpy(np.ascontiguousarray(
                    batch[b:b + self.batch_size].transpose(0, 3, 1, 2), dtype=np.float32))
                out.append(self.model(x).numpy())
        return np.concatenate(out)


def load_local(path, resolution=32) -> LocalEncoder:
    """Black-box view of a checkpoint written by the contrastive trainer."""
    ckpt = EncoderCheckpoint.load(path)
    return from_checkpoint(ckpt, resolution, name=f"{ckpt.config_digest}@{ckpt.epoch}")


def from_checkpoint(ckpt: EncoderCheckpoint, resolution=32, name=None) -> LocalEncoder:
    return LocalEncoder(ckpt.build(), ckpt.dim, resolution,
                        name=name or f"{ckpt.config_digest}@{ckpt.epoch}")


# ---------------------------------------------------------------------------
# remote

def encode_png(image: np.ndarray) -> str:
    """Base64 PNG of an image; pixels are quantized to 8 bits."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(blob: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(blob))) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


class RemoteEncoder(BlackBoxEncoder):
    """Client for an encoder served over the JSON/PNG wire protocol."""

    def __init__(self, url, token=None, dim=None, resolution=None, chunk_size=64,
                 retries=3, backoff=0.25, timeout=30.0):
        self.url = url
        self.token = token
        self.dim = dim
        self.resolution = resolution
        self.chunk_size = chunk_size
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self._session = requests.Session()
        self._lock = threading.Lock()

    def digest(self):
        return hashlib.sha256(self.url.encode()).hexdigest()[:16]

    def _post(self, payload):
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last = None
        with self._lock:
            for attempt in range(self.retries + 1):
                if attempt:
                    time.sleep(self.backoff * 2 ** (attempt - 1))
                try:
                    resp = self._session.post(self.url, data=payload, headers=headers,
                                              timeout=self.timeout)
                except (requests.ConnectionError, requests.Timeout) as exc:
                    last = exc
                    continue
                if resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                    continue
                if resp.status_code != 200:
                    raise TransportError(f"{self.url} answered HTTP {resp.status_code}"
                                         f"{_error_detail(resp)}")
                return resp
        raise TransportError(f"{self.url} unreachable after {self.retries} retries: {last}")

    def _query_chunk(self, chunk):
        payload = json.dumps({"images": [encode_png(im) for im in chunk]})
        resp = self._post(payload)
        try:
            body = resp.json()
            feats = np.asarray(body["features"], dtype=np.float32)
            dim = int(body["dim"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed response from {self.url}: {exc}") from exc
        if feats.ndim != 2 or len(feats) != len(chunk):
            raise ProtocolError(
                f"sent {len(chunk)} images but received {len(feats) if feats.ndim else 0} vectors")
        if feats.shape[1] != dim:
            raise ProtocolError(f"declared dim {dim} but vectors have length {feats.shape[1]}")
        if self.dim is None:
            self.dim = dim
        elif dim != self.dim:
            raise ProtocolError(f"expected dim {self.dim}, server declared {dim}")
        return feats

    def _query(self, batch):
        return np.concatenate([self._query_chunk(batch[b:b + self.chunk_size])
                               for b in range(0, len(batch), self.chunk_size)])


def _error_detail(resp):
    try:
        return f": {resp.json()['error']}"
    except (ValueError, KeyError, TypeError):
        return ""


def connect_remote(url, token=None, **kwargs) -> RemoteEncoder:
    return RemoteEncoder(url, token=token, **kwargs)


# ---------------------------------------------------------------------------
# bundled server, used by tests and for exposing a local checkpoint

class EncoderServer:
    """Serve a :class:`BlackBoxEncoder` over the wire protocol on localhost.

    ``mangle`` optionally rewrites the response body dict before it is sent,
    which is how tests simulate misbehaving servers.
    """

    def __init__(self, encoder, host="127.0.0.1", port=0, token=None, mangle=None):
        self.encoder = encoder
        self.token = token
        self.mangle = mangle
        self.requests_served = 0
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                if server.token and self.headers.get("Authorization") != f"Bearer {server.token}":
                    self._send(401, {"error": "unauthorized"})
                    return
                length = int(self.headers.get("Content-Length", 0))
                try:
                    body = json.loads(self.rfile.read(length))
                    images = np.stack([decode_png(b) for b in body["images"]])
                except Exception as exc:
                    self._send(400, {"error": str(exc)})
                    return
                try:
                    feats = server.encoder.embed_batch(images)
                except EncoderError as exc:
                    self._send(400, {"error": str(exc)})
                    return
                out = {"features": feats.tolist(), "dim": int(feats.shape[1])}
                if server.mangle is not None:
                    out = server.mangle(out)
                server.requests_served += 1
                self._send(200, out)

            def _send(self, code, obj):
                blob = json.dumps(obj).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(blob)))
                self.end_headers()
                self.wfile.write(blob)

        self.httpd = ThreadingHTTPServer((host, port), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self):
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}/embed"

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
