import json
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from sslwm.corpora import Corpus
from sslwm.errors import ArityError, CapacityError, ConfigurationError, DataError, ProtocolError, TransportError
from sslwm.verify import (
    HttpEndpoint,
    LocalEndpoint,
    OutlierReport,
    QueryPlan,
    Transcript,
    build_query_sets,
    mad_outlier_index,
    predict_labels,
    set_entropy,
    verify_ownership,
)
from sslwm.wm_core import generate_pattern

PATTERN = generate_pattern("owner", b"key")


# -- entropy -----------------------------------------------------------------

def test_entropy_examples():
    assert set_entropy(np.repeat(np.arange(10), 10), 10).entropy == pytest.approx(math.log2(10), abs=1e-9)
    assert set_entropy([4] * 17, 10).entropy == 0.0
    rec = set_entropy([0] * 8 + [1] * 2, 2, "s")
    assert rec.entropy == pytest.approx(0.721928, abs=1e-6)
    assert rec.label_histogram == [8, 2] and rec.set_id == "s"


def test_entropy_bounds_and_errors():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m = int(rng.integers(1, 12))
        labels = rng.integers(0, m, size=int(rng.integers(1, 60)))
        rec = set_entropy(labels, m)
        assert 0.0 <= rec.entropy <= math.log2(m) + 1e-12
        assert sum(rec.label_histogram) == len(labels)
    with pytest.raises(ArityError):
        set_entropy([], 3)
    with pytest.raises(DataError):
        set_entropy([0, 3], 3)


# -- MAD outlier index -------------------------------------------------------

def _median_oracle(values):
    s = sorted(values)
    n = len(s)
    return s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2


def _mad_oracle(clean, wm, k=1.4826):
    h = list(clean) + [wm]
    med = _median_oracle(h)
    mad = _median_oracle([abs(v - med) for v in h])
    return mad, (med - wm) / (k * mad)


def test_mad_worked_example():
    mad, index = mad_outlier_index([3.2, 3.3, 3.1, 3.25], 0.4)
    assert mad == pytest.approx(0.1, abs=1e-12)
    assert index == pytest.approx(2.8 / (1.4826 * 0.1), abs=1e-12)
    assert index == pytest.approx(18.886, abs=1e-3)


def test_mad_matches_bruteforce_oracle():
    rng = np.random.default_rng(7)
    sizes = set()
    for _ in range(1000):
        n = int(rng.integers(2, 50))  # H_all holds n + 1 values: 3..50
        clean = rng.uniform(0, 3.4, size=n).tolist()
        wm = float(rng.uniform(0, 3.4))
        mad, index = mad_outlier_index(clean, wm)
        omad, oindex = _mad_oracle(clean, wm)
        assert mad == pytest.approx(omad, abs=1e-12)
        assert index == pytest.approx(oindex, abs=1e-12, rel=1e-12)
        sizes.add((n + 1) % 2)
    assert sizes == {0, 1}


def test_mad_permutation_invariance():
    rng = np.random.default_rng(8)
    for _ in range(100):
        clean = rng.uniform(0, 3, size=int(rng.integers(2, 20)))
        wm = float(rng.uniform(0, 3))
        ref = mad_outlier_index(clean, wm)
        assert mad_outlier_index(rng.permutation(clean), wm) == ref


def test_mad_degenerate_cases():
    assert mad_outlier_index([1.0, 1.0, 1.0], 1.0) == (0.0, 0.0)
    mad, index = mad_outlier_index([2.0, 2.0, 2.0, 2.0], 0.5)
    assert mad == 0.0 and index == math.inf
    assert mad_outlier_index([2.0, 2.0, 2.0], 3.0)[1] == -math.inf
    # wm equal to the median gives 0 with nonzero MAD too
    assert mad_outlier_index([1.0, 3.0], 2.0)[1] == 0.0
    with pytest.raises(ArityError):
        mad_outlier_index([1.0], 0.0)
    with pytest.raises(ConfigurationError):
        mad_outlier_index([1.0, 2.0], 0.0, k=0)


# -- endpoints and protocol ------------------------------------------------------

class ConstantModel:
    n_classes = 4

    def predict(self, images):
        return np.full(len(images), 2)


class RandomLabelModel:
    def __init__(self, n_classes, seed):
        self.n_classes = n_classes
        self.rng = np.random.default_rng(seed)

    def predict(self, images):
        return self.rng.integers(0, self.n_classes, size=len(images))


class PatchModel:
    """Predicts class 0 whenever the bottom-right corner matches the pattern, else the true class."""

    def __init__(self, pool):
        self.n_classes = int(pool.n_classes)
        self.lookup = {pool.images[i].tobytes(): int(pool.labels[i]) for i in range(len(pool))}

    def predict(self, images):
        out = []
        for img in images:
            if np.array_equal(img[:, 24:, 24:], PATTERN.patch):
                out.append(0)
            else:
                out.append(self.lookup[img.tobytes()])
        return np.asarray(out)


def _pool(n_classes=4, per_class=400, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), per_class)
    images = rng.uniform(size=(len(labels), 3, 32, 32)).astype(np.float32)
    return Corpus("pool", images, labels, n_classes)


def test_predict_labels_basic():
    ep = LocalEndpoint(ConstantModel())
    assert (predict_labels(ep, np.zeros((5, 3, 32, 32), np.float32)) == 2).all()
    assert predict_labels(ep, []).tolist() == []


def test_predict_labels_rejects_out_of_range():
    class Bad(ConstantModel):
        def predict(self, images):
            return np.full(len(images), 9)

    with pytest.raises(ProtocolError):
        predict_labels(LocalEndpoint(Bad()), np.zeros((2, 3, 32, 32), np.float32))


def test_query_sets_disjoint_and_overlapping():
    plan = QueryPlan(4, PATTERN, n_clean_sets=10, samples_per_class=30, seed=1)
    sets, mode = build_query_sets(_pool(per_class=400), plan)
    assert mode == "disjoint" and len(sets) == 11
    flat = np.concatenate(sets)
    assert len(np.unique(flat)) == len(flat) == 11 * 120
    sets, mode = build_query_sets(_pool(per_class=100), plan)
    assert mode == "overlapping"
    assert all(len(np.unique(s)) == len(s) == 120 for s in sets)
    with pytest.raises(CapacityError):
        build_query_sets(_pool(per_class=20), plan)


def test_verify_claims_patch_model_and_not_identity():
    pool = _pool()
    plan = QueryPlan(4, PATTERN, seed=3)
    report = verify_ownership(LocalEndpoint(PatchModel(pool)), pool, plan)
    assert report.wm_entropy == 0.0 and report.claimed
    assert report.n_queries == 11 * 120 and len(report.records) == 11

    class Oracle:
        n_classes = 4
        lookup = {pool.images[i, :, :24].tobytes(): int(pool.labels[i]) for i in range(len(pool))}

        def predict(self, images):
            # keyed on rows the pattern never touches
            return np.asarray([self.lookup[img[:, :24].tobytes()] for img in images])

    # an honest model labels the stamped set like any other class-balanced set
    honest = verify_ownership(LocalEndpoint(Oracle()), pool, plan)
    assert not honest.claimed


def test_verify_is_reproducible_and_report_roundtrips(tmp_path):
    pool = _pool()
    plan = QueryPlan(4, PATTERN, seed=4)
    a = verify_ownership(LocalEndpoint(PatchModel(pool)), pool, plan)
    b = verify_ownership(LocalEndpoint(PatchModel(pool)), pool, plan)
    assert a.to_dict() == b.to_dict()
    a.save(tmp_path / "r.json")
    back = OutlierReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
    assert back.to_dict() == a.to_dict()


def test_verify_class_count_mismatch():
    with pytest.raises(ProtocolError):
        verify_ownership(LocalEndpoint(ConstantModel()), _pool(n_classes=5), QueryPlan(5, PATTERN))


def test_constant_model_is_degenerate_not_claimed():
    report = verify_ownership(LocalEndpoint(ConstantModel()), _pool(), QueryPlan(4, PATTERN))
    assert report.mad == 0.0 and report.outlier_index == 0.0
    assert not report.claimed and not report.degenerate


def _random_label_rate(n_seeds, n_classes=10):
    pool = _pool(n_classes=n_classes, per_class=330)
    hits = 0
    for seed in range(n_seeds):
        report = verify_ownership(LocalEndpoint(RandomLabelModel(n_classes, 1000 + seed)), pool,
                                  QueryPlan(n_classes, PATTERN, seed=seed))
        hits += report.outlier_index >= 3
    return hits / n_seeds


@pytest.mark.xfail(strict=True, reason="random-label endpoints exceed index 3 in about 3% of runs")
def test_random_labels_stay_below_threshold_99_percent():
    assert 1 - _random_label_rate(100) >= 0.99


def test_random_labels_false_claim_rate_is_small():
    # the null rate of the MAD rule with eleven sets sits near 3%
    assert _random_label_rate(100) <= 0.08


# -- HTTP endpoint -------------------------------------------------------------------

class _Scripted(BaseHTTPRequestHandler):
    """Replies from a queue of (status, body) pairs, then echoes label 1."""

    script = []
    hits = 0

    def _reply(self, status, body):
        data = body.encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        self._reply(200, json.dumps({"status": "ok", "classes": 3}))

    def do_POST(self):
        n = json.loads(self.rfile.read(int(self.headers["Content-Length"])))["inputs"]
        type(self).hits += 1
        if type(self).script:
            status, body = type(self).script.pop(0)
            return self._reply(status, body)
        self._reply(200, json.dumps({"labels": [1] * len(n)}))

    def log_message(self, *args):
        pass


@pytest.fixture
def scripted():
    handler = type("H", (_Scripted,), {"script": [], "hits": 0})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    yield handler, f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    server.server_close()


def test_http_retries_then_succeeds(scripted):
    handler, url = scripted
    handler.script = [(503, "{}"), (500, "{}")]
    ep = HttpEndpoint(url, retries=3, backoff=0.0)
    assert ep.n_classes == 3
    assert predict_labels(ep, np.zeros((4, 3, 32, 32), np.float32)).tolist() == [1] * 4
    assert handler.hits == 3


def test_http_gives_up_with_retry_count(scripted):
    handler, url = scripted
    handler.script = [(503, "{}")] * 10
    ep = HttpEndpoint(url, retries=2, backoff=0.0)
    with pytest.raises(TransportError) as err:
        ep.query(np.zeros((1, 3, 32, 32), np.float32))
    assert err.value.retries == 2 and handler.hits == 3


def test_http_unreachable():
    with pytest.raises(TransportError):
        HttpEndpoint("http://127.0.0.1:9", n_classes=3, retries=1, backoff=0.0, timeout=1).query(
            np.zeros((1, 3, 32, 32), np.float32))


@pytest.mark.parametrize("body", ['{"labels": [1]}', "not json", '{"other": 1}',
                                  '{"labels": [1, 1], "probs": [[0.5, 0.5], [0.5, 0.5]]}'])
def test_http_protocol_errors(scripted, body):
    handler, url = scripted
    handler.script = [(200, body)]
    transcript = Transcript()
    ep = HttpEndpoint(url, backoff=0.0)
    with pytest.raises(ProtocolError) as err:
        predict_labels(ep, np.zeros((2, 3, 32, 32), np.float32), transcript)
    assert err.value.transcript is transcript


def test_http_chunking_and_concurrency(scripted):
    handler, url = scripted
    ep = HttpEndpoint(url, max_batch=3, max_in_flight=2, backoff=0.0)
    assert ep.query(np.zeros((10, 3, 32, 32), np.float32)).tolist() == [1] * 10
    assert handler.hits == 4


def test_transcript_records_each_batch(tmp_path):
    t = Transcript()
    ep = LocalEndpoint(ConstantModel())
    predict_labels(ep, np.zeros((3, 3, 32, 32), np.float32), t)
    predict_labels(ep, np.ones((2, 3, 32, 32), np.float32), t)
    assert [e["n"] for e in t.entries] == [3, 2]
    assert t.entries[0]["labels"] == [2, 2, 2]
    before = t.digest()
    t.save(tmp_path / "t.json")
    assert json.loads((tmp_path / "t.json").read_text()) == t.entries
    assert t.digest() == before
