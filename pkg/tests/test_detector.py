import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snaplabel.detector import (BOX_REGION, MASK_REGION, ClassLookupTable,
                                DegradedProvider, Detection, DetectionRequest,
                                FileProvider, HttpProvider, OracleProvider,
                                build_clt, detection_to_wire, parse_detection,
                                parse_detection_payload, parse_request,
                                query_detector, request_to_wire, rle_decode,
                                rle_encode)
from snaplabel.errors import DomainError, ProtocolError, TransportError
from snaplabel.projection import build_mask2pixel_all
from snaplabel.render import render
from snaplabel.scene_io import InstanceMask, MaskSet

from conftest import rand_camera, rand_cloud, rand_masks


# ---------------------------------------------------------------------------
# RLE

@given(bits=st.lists(st.booleans(), min_size=1, max_size=64), width=st.integers(1, 8))
@settings(max_examples=150, deadline=None)
def test_rle_round_trip(bits, width):
    height = (len(bits) + width - 1) // width
    flat = np.zeros(width * height, dtype=bool)
    flat[:len(bits)] = bits
    pixels = np.flatnonzero(flat)
    rle = rle_encode(pixels, width, height)
    assert sum(rle["counts"]) == width * height
    back = rle_decode(rle, width, height)
    np.testing.assert_array_equal(back, pixels)


def test_rle_is_row_major():
    # single foreground pixel at (u=1, v=0) in a 3x2 image -> one leading zero
    rle = rle_encode(np.array([1]), 3, 2)
    assert rle == {"size": [2, 3], "counts": [1, 1, 4]}


def test_rle_rejects_bad_counts():
    with pytest.raises(ProtocolError):
        rle_decode({"size": [2, 2], "counts": [1, 1]}, 2, 2)
    with pytest.raises(ProtocolError):
        rle_decode({"size": [2, 2], "counts": [1, -1, 4]}, 2, 2)
    with pytest.raises(ProtocolError):
        rle_decode({"size": [3, 2], "counts": [2, 2]}, 2, 2)


# ---------------------------------------------------------------------------
# serialization round trips

def test_detection_round_trip_mask():
    det = Detection("chair", 0.75, 3, MASK_REGION,
                    pixels=np.array([0, 5, 6, 7]), width=4, height=4)
    wire = detection_to_wire(det)
    back = parse_detection(wire, 4, 4, 3)
    assert back.label == det.label and back.confidence == det.confidence
    assert back.region_kind == MASK_REGION
    np.testing.assert_array_equal(back.pixels, det.pixels)


def test_detection_round_trip_box():
    det = Detection("table", 0.5, 1, BOX_REGION, box=(1, 2, 3, 3), width=8, height=8)
    back = parse_detection(detection_to_wire(det), 8, 8, 1)
    assert back.box == (1, 2, 3, 3)
    assert back.region_kind == BOX_REGION


def test_request_round_trip():
    req = DetectionRequest(vocabulary=["a", "b"], view_id=7,
                           image_bytes=b"\x89PNGfake", crop=(1, 2, 10, 12))
    back = parse_request(request_to_wire(req))
    assert back.vocabulary == req.vocabulary
    assert back.view_id == req.view_id
    assert back.image_bytes == req.image_bytes
    assert back.crop == req.crop


def test_detection_invariants():
    with pytest.raises(ProtocolError):
        Detection("x", 1.5, 0, BOX_REGION, box=(0, 0, 1, 1), width=4, height=4)
    with pytest.raises(ProtocolError):
        Detection("x", 0.5, 0, BOX_REGION, box=(0, 0, 4, 1), width=4, height=4)
    with pytest.raises(ProtocolError):
        Detection("x", 0.5, 0, MASK_REGION, pixels=np.array([], dtype=np.int64),
                  width=4, height=4)
    with pytest.raises(ProtocolError):
        Detection("", 0.5, 0, BOX_REGION, box=(0, 0, 1, 1), width=4, height=4)


def test_empty_vocabulary_rejected():
    with pytest.raises(DomainError):
        DetectionRequest(vocabulary=[], view_id=0)


# ---------------------------------------------------------------------------
# oracle provider

def _scene_with_maps(rng):
    cloud = rand_cloud(rng, 200)
    masks = rand_masks(rng, 200, 3)
    cams = [rand_camera(rng, cloud, width=24, height=24) for _ in range(2)]
    views = [render(cloud, c, 1, (0, 0, 0), view_id=i) for i, c in enumerate(cams)]
    maps = build_mask2pixel_all(cloud, masks, views)
    return cloud, masks, views, maps


def test_oracle_returns_exact_footprints(rng):
    cloud, masks, views, maps = _scene_with_maps(rng)
    provider = OracleProvider(maps, ["chair", "table", "sofa"])
    dets = provider.query([DetectionRequest(vocabulary=["chair"], view_id=0)])
    nonempty = [k for k, pix in enumerate(maps[0].pixels) if len(pix)]
    assert len(dets) == len(nonempty)
    for det, k in zip(dets, nonempty):
        assert det.confidence == 1.0
        assert det.label == ["chair", "table", "sofa"][k]
        np.testing.assert_array_equal(det.pixels, maps[0].pixels[k])


def test_oracle_crop_clips_regions(rng):
    cloud, masks, views, maps = _scene_with_maps(rng)
    provider = OracleProvider(maps, ["a", "b", "c"])
    crop = (0, 0, 11, 11)
    dets = provider.query([DetectionRequest(vocabulary=["a"], view_id=0, crop=crop)])
    for det in dets:
        us, vs = det.pixels % 24, det.pixels // 24
        assert us.max() <= 11 and vs.max() <= 11


# ---------------------------------------------------------------------------
# file provider

def test_file_provider_equals_direct_parse(tmp_path, rng):
    cloud, masks, views, maps = _scene_with_maps(rng)
    oracle = OracleProvider(maps, ["a", "b", "c"])
    payloads = {}
    for vid in (0, 1):
        dets = oracle.query([DetectionRequest(vocabulary=["a"], view_id=vid)])
        payloads[vid] = {"detections": [detection_to_wire(d) for d in dets]}
        with open(tmp_path / f"view_{vid}.json", "w") as fh:
            json.dump(payloads[vid], fh)
    provider = FileProvider(tmp_path, 24, 24)
    got = provider.query([DetectionRequest(vocabulary=["a"], view_id=v) for v in (0, 1)])
    want = [parse_detection(d, 24, 24, vid)
            for vid in (0, 1) for d in payloads[vid]["detections"]]
    assert len(got) == len(want)
    for g, w in zip(got, want):
        assert g.label == w.label and g.view_id == w.view_id
        np.testing.assert_array_equal(g.pixels, w.pixels)


def test_file_provider_missing_view_is_transport_error(tmp_path):
    provider = FileProvider(tmp_path, 8, 8)
    with pytest.raises(TransportError):
        provider.query([DetectionRequest(vocabulary=["a"], view_id=5)])


def test_file_provider_missing_dir():
    with pytest.raises(TransportError):
        FileProvider("/nonexistent/path", 8, 8)


# ---------------------------------------------------------------------------
# CLT

def _det(label, conf, vid):
    return Detection(label, conf, vid, BOX_REGION, box=(0, 0, 1, 1), width=8, height=8)


def test_clt_empty_is_valid():
    clt = build_clt([], ["chair"])
    assert len(clt) == 0
    assert clt.get(3) == []


def test_clt_groups_by_view():
    dets = [_det("a", 0.9, 0), _det("b", 0.8, 1), _det("c", 0.7, 0)]
    clt = build_clt(dets, ["a", "b", "c"])
    assert len(clt.get(0)) == 2
    assert len(clt.get(1)) == 1


def test_clt_sorted_by_confidence_within_view():
    dets = [_det("low", 0.2, 0), _det("high", 0.9, 0), _det("mid", 0.5, 0)]
    clt = build_clt(dets, [])
    assert [d.label for d in clt.get(0)] == ["high", "mid", "low"]


def test_clt_permutation_invariant(rng):
    dets = [_det(f"l{i}", float(rng.random()), int(rng.integers(0, 3))) for i in range(20)]
    clt_a = build_clt(dets, [])
    perm = [dets[i] for i in rng.permutation(20)]
    clt_b = build_clt(perm, [])
    assert sorted(clt_a.by_view) == sorted(clt_b.by_view)
    for vid in clt_a.by_view:
        assert [d.label for d in clt_a.get(vid)] == [d.label for d in clt_b.get(vid)]


def test_clt_unknown_view_rejected():
    with pytest.raises(ProtocolError):
        build_clt([_det("a", 0.5, 7)], [], valid_views=[0, 1, 2])


# ---------------------------------------------------------------------------
# HTTP provider

class _Handler(BaseHTTPRequestHandler):
    response_payload = None
    raw_response = None

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        self.server.received.append(body)
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        if self.raw_response is not None:
            self.wfile.write(self.raw_response)
        else:
            self.wfile.write(json.dumps(self.response_payload).encode())

    def log_message(self, *args):
        pass


@pytest.fixture
def http_server():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    server.received = []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()


def test_http_provider_round_trip(http_server):
    det = Detection("chair", 0.9, 0, BOX_REGION, box=(1, 1, 4, 4), width=16, height=16)
    _Handler.response_payload = {"detections": [detection_to_wire(det)]}
    _Handler.raw_response = None
    endpoint = f"http://127.0.0.1:{http_server.server_address[1]}/detect"
    provider = HttpProvider(endpoint, 16, 16)
    got = provider.query([DetectionRequest(vocabulary=["chair"], view_id=0,
                                           image_bytes=b"png")])
    assert len(got) == 1 and got[0].label == "chair"
    assert http_server.received[0]["vocabulary"] == ["chair"]
    assert "image_b64" in http_server.received[0]


def test_http_provider_unreachable_is_transport_error():
    provider = HttpProvider("http://127.0.0.1:1/detect", 8, 8, timeout=0.2)
    with pytest.raises(TransportError):
        provider.query([DetectionRequest(vocabulary=["x"], view_id=0)])


def test_http_provider_malformed_is_protocol_error(http_server):
    _Handler.response_payload = None
    _Handler.raw_response = b'{"detections": [{"label": "x"}]}'
    endpoint = f"http://127.0.0.1:{http_server.server_address[1]}/detect"
    provider = HttpProvider(endpoint, 8, 8)
    with pytest.raises(ProtocolError, match="confidence"):
        provider.query([DetectionRequest(vocabulary=["x"], view_id=0)])
    _Handler.raw_response = None


def test_query_detector_retries_then_raises():
    class Flaky:
        name = "flaky"

        def __init__(self):
            self.calls = 0

        def query(self, reqs):
            self.calls += 1
            raise TransportError("down")

    provider = Flaky()
    with pytest.raises(TransportError):
        query_detector(provider, [DetectionRequest(vocabulary=["x"], view_id=0)],
                       retries=2, backoff=0.0)
    assert provider.calls == 3


def test_degraded_provider_is_deterministic(rng):
    cloud, masks, views, maps = _scene_with_maps(rng)
    vocab = ["a", "b", "c"]
    reqs = [DetectionRequest(vocabulary=vocab, view_id=v) for v in (0, 1)]
    a = DegradedProvider(OracleProvider(maps, vocab), vocab, seed=3).query(reqs)
    b = DegradedProvider(OracleProvider(maps, vocab), vocab, seed=3).query(reqs)
    assert [(d.label, d.view_id) for d in a] == [(d.label, d.view_id) for d in b]
    full = OracleProvider(maps, vocab).query(reqs)
    assert len(a) <= len(full)


def test_parse_payload_rejects_non_list():
    with pytest.raises(ProtocolError, match="payload"):
        parse_detection_payload({"detections": "nope"}, 8, 8, 0)
