import json

import numpy as np
import pytest
import requests

from sslwm.corpora import synthetic_corpus, split_corpus
from sslwm.errors import ConfigurationError
from sslwm.nets import EncoderHandle
from sslwm.service import ServeConfig, serve
from sslwm.transfer import HeadConfig, train_downstream
from sslwm.verify import HttpEndpoint, LocalEndpoint, predict_labels

SMALL = dict(channels=(8, 8, 16, 16), embed_dim=16)


@pytest.fixture(scope="module")
def model():
    task = split_corpus(synthetic_corpus("blobs", 100, seed=0, corpus_id="blobs"), 0.5, seed=0)
    m, _ = train_downstream(EncoderHandle.create(0, **SMALL), task, HeadConfig(epochs=2))
    return m


@pytest.fixture
def server(model):
    srv = serve(ServeConfig(port=0, max_batch=64, include_probs=True), model)
    yield srv
    srv.shutdown()
    srv.server_close()


def _post(srv, payload, raw=None):
    data = raw if raw is not None else json.dumps(payload)
    return requests.post(srv.url + "/predict", data=data, headers={"Content-Type": "application/json"}, timeout=10)


def test_health(server, model):
    r = requests.get(server.url + "/health", timeout=5)
    assert r.status_code == 200 and r.json() == {"status": "ok", "classes": model.n_classes}
    assert requests.get(server.url + "/nope", timeout=5).status_code == 404


def test_predict_nested_and_flat(server, model):
    x = np.random.default_rng(0).uniform(size=(5, 3, 32, 32)).astype(np.float32)
    nested = _post(server, {"inputs": x.tolist()}).json()
    flat = _post(server, {"inputs": x.reshape(5, -1).tolist()}).json()
    assert nested["labels"] == flat["labels"] == model.predict(x).tolist()
    probs = np.asarray(nested["probs"])
    assert probs.shape == (5, model.n_classes)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-6)
    assert _post(server, {"inputs": []}).json() == {"labels": []}


@pytest.mark.parametrize("raw,status", [
    ("{not json", 400),
    ('{"x": 1}', 400),
    ('[1, 2]', 400),
    ('{"inputs": 5}', 400),
    ('{"inputs": [[1, 2, 3]]}', 422),
    ('{"inputs": [[1, 2], [3]]}', 422),
    ('{"inputs": [["a"]]}', 422),
])
def test_bad_requests(server, raw, status):
    r = _post(server, None, raw=raw)
    assert r.status_code == status and "error" in r.json()


def test_batch_limit(server):
    r = _post(server, {"inputs": np.zeros((65, 3 * 32 * 32)).tolist()})
    assert r.status_code == 413


def test_out_of_range_label(model):
    srv = serve(ServeConfig(port=0, out_of_range_label=0), model)
    try:
        x = np.full((2, 3, 32, 32), 0.5, np.float32)
        x[1, 0, 0, 0] = 2.0
        labels = _post(srv, {"inputs": x.tolist()}).json()["labels"]
        assert labels[1] == 0 and labels[0] == int(model.predict(x[:1])[0])
    finally:
        srv.shutdown()
        srv.server_close()


def test_http_and_local_parity(server, model):
    x = np.random.default_rng(1).uniform(size=(1000, 3, 32, 32)).astype(np.float32)
    remote = predict_labels(HttpEndpoint(server.url, max_batch=64, max_in_flight=4), x)
    local = predict_labels(LocalEndpoint(model), x)
    np.testing.assert_array_equal(remote, local)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ServeConfig(max_batch=0)
