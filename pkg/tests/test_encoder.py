import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
import torch

from encodermi.contrastive import build_encoder
from encodermi.contrastive.training import ContrastiveConfig, EncoderCheckpoint
from encodermi.encoder import (
    DimensionMismatchError,
    EncoderServer,
    LocalEncoder,
    ProtocolError,
    RemoteEncoder,
    TransportError,
    decode_png,
    encode_png,
    load_local,
)

from .conftest import mean_color_encoder


def _quantized(rng, n, size=8):
    # exact 8-bit values survive the PNG hop unchanged
    return rng.integers(0, 256, size=(n, size, size, 3)).astype(np.float32) / 255.0


def test_empty_batch_gives_empty_output():
    enc = mean_color_encoder(5)
    out = enc.embed_batch(np.zeros((0, 8, 8, 3), np.float32))
    assert out.shape == (0, 5)
    assert enc.calls == 0
    assert enc.embed_batch([]).shape == (0, 5)


def test_views_in_vectors_out_deterministic(rng):
    torch.manual_seed(0)
    enc = LocalEncoder(build_encoder("small-vgg", 12, 4), 12, resolution=16)
    views = rng.random((10, 16, 16, 3), dtype=np.float32)
    a, b = enc.embed_batch(views), enc.embed_batch(views)
    assert a.shape == (10, 12)
    np.testing.assert_array_equal(a, b)
    # batching does not change results
    enc.batch_size = 3
    np.testing.assert_allclose(enc.embed_batch(views), a, atol=1e-6)
    # a single image is accepted as a batch of one
    assert enc.embed_batch(views[0]).shape == (1, 12)


def test_resolution_mismatch_rejected(rng):
    enc = LocalEncoder(build_encoder("small-vgg", 12, 4), 12, resolution=16)
    with pytest.raises(DimensionMismatchError):
        enc.embed_batch(rng.random((2, 8, 8, 3), dtype=np.float32))


def test_load_local_reports_stored_dimension(tmp_path):
    cfg = ContrastiveConfig(arch="small-resnet", dim=20, width=4)
    torch.manual_seed(0)
    model = build_encoder(cfg.arch, cfg.dim, cfg.width)
    EncoderCheckpoint(epoch=3, arch=cfg.arch, dim=cfg.dim, width=cfg.width,
                      state_dict=model.state_dict(), config_digest=cfg.digest()).save(
        tmp_path / "e.pt")
    enc = load_local(tmp_path / "e.pt")
    assert enc.dim == 20
    assert enc.embed_batch(np.full((2, 32, 32, 3), 0.5, np.float32)).shape == (2, 20)


def test_png_roundtrip_is_exact_for_8bit(rng):
    img = _quantized(rng, 1)[0]
    np.testing.assert_array_equal(decode_png(encode_png(img)), img)


def test_remote_returns_server_vectors_verbatim(rng):
    local = mean_color_encoder(4)
    imgs = _quantized(rng, 7)
    with EncoderServer(local) as srv:
        remote = RemoteEncoder(srv.url, chunk_size=3)
        got = remote.embed_batch(imgs)
        assert srv.requests_served == 3
    assert remote.dim == 4
    np.testing.assert_allclose(got, local.embed_batch(imgs), atol=1e-5)


def test_local_and_remote_agree_on_a_checkpoint(rng):
    torch.manual_seed(1)
    local = LocalEncoder(build_encoder("small-resnet", 16, 4), 16, resolution=8)
    imgs = _quantized(rng, 5)
    with EncoderServer(local) as srv:
        np.testing.assert_allclose(RemoteEncoder(srv.url).embed_batch(imgs),
                                   local.embed_batch(imgs), atol=1e-5)


def test_wrong_vector_count_is_protocol_error(rng):
    def drop_one(body):
        body["features"] = body["features"][:-1]
        return body

    with EncoderServer(mean_color_encoder(4), mangle=drop_one) as srv:
        with pytest.raises(ProtocolError, match="received"):
            RemoteEncoder(srv.url).embed_batch(_quantized(rng, 3))


def test_declared_dim_disagreement(rng):
    def lie(body):
        body["dim"] = 99
        return body

    with EncoderServer(mean_color_encoder(4), mangle=lie) as srv:
        with pytest.raises(ProtocolError):
            RemoteEncoder(srv.url).embed_batch(_quantized(rng, 2))
    with EncoderServer(mean_color_encoder(4)) as srv:
        with pytest.raises(ProtocolError):
            RemoteEncoder(srv.url, dim=8).embed_batch(_quantized(rng, 2))


def test_bearer_token(rng):
    with EncoderServer(mean_color_encoder(4), token="s3cret") as srv:
        assert RemoteEncoder(srv.url, token="s3cret").embed_batch(_quantized(rng, 1)).shape == (1, 4)
        with pytest.raises(TransportError, match="401"):
            RemoteEncoder(srv.url, token="wrong").embed_batch(_quantized(rng, 1))


class _Failing(BaseHTTPRequestHandler):
    hits = 0

    def log_message(self, *a):
        pass

    def do_POST(self):
        type(self).hits += 1
        self.rfile.read(int(self.headers.get("Content-Length", 0)))
        self.send_response(503)
        self.send_header("Content-Length", "0")
        self.end_headers()


def test_unavailable_server_retries_then_fails(rng):
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), _Failing)
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    try:
        url = f"http://127.0.0.1:{httpd.server_address[1]}/embed"
        with pytest.raises(TransportError, match="after 3 retries"):
            RemoteEncoder(url, retries=3, backoff=0.0).embed_batch(_quantized(rng, 1))
        assert _Failing.hits == 4
    finally:
        httpd.shutdown()
        httpd.server_close()


def test_unreachable_host(rng):
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), _Failing)
    port = httpd.server_address[1]
    httpd.server_close()  # nothing listens on this port any more
    with pytest.raises(TransportError, match="after 2 retries"):
        RemoteEncoder(f"http://127.0.0.1:{port}/", retries=2, backoff=0.0,
                      timeout=2).embed_batch(_quantized(rng, 1))


def test_server_reports_encoder_errors_without_retries(rng):
    enc = mean_color_encoder(4)
    enc.resolution = 8
    with EncoderServer(enc) as srv:
        with pytest.raises(TransportError, match="HTTP 400: encoder expects 8x8"):
            RemoteEncoder(srv.url, retries=3, backoff=5.0).embed_batch(_quantized(rng, 1, 16))
