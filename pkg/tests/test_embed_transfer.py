import numpy as np
import pytest
import torch

from sslwm.corpora import Corpus, DownstreamCorpus, synthetic_corpus, split_corpus
from sslwm.embed import EmbedConfig, embed_watermark
from sslwm.errors import ConfigurationError, DataError, DimensionError, IntegrityError, TrainingFailure
from sslwm.nets import EncoderHandle, load_encoder, save_encoder, state_digest
from sslwm.shadow import ShadowSpec, build_shadow
from sslwm.transfer import HeadConfig, SuspectModel, evaluate_accuracy, head_descriptor, train_downstream
from sslwm.wm_core import generate_pattern

SMALL = dict(channels=(8, 8, 16, 16), embed_dim=16)


@pytest.fixture(scope="module")
def data():
    pre = synthetic_corpus("objects", 96, seed=0, corpus_id="pre")
    shadow = build_shadow(ShadowSpec("pre", 0.25), {"pre": pre})
    return pre, shadow, generate_pattern("owner", b"key")


def _cfg(**kw):
    base = dict(epochs=2, utility_batch=32, wm_batch=16, seed=3)
    return EmbedConfig(**{**base, **kw})


def test_config_validation():
    with pytest.raises(ConfigurationError):
        EmbedConfig(lambda_wm=-1)
    with pytest.raises(ConfigurationError):
        EmbedConfig(temperature=0)
    with pytest.raises(ConfigurationError):
        EmbedConfig(wm_batch=1)
    with pytest.raises(ConfigurationError):
        EmbedConfig(utility_kind="diffusion")
    with pytest.raises(ConfigurationError):
        EmbedConfig(optimizer="lbfgs")


@pytest.mark.parametrize("kind", ["contrastive-ssl", "generative-ssl"])
def test_embed_is_reproducible_and_leaves_input_untouched(data, kind):
    pre, shadow, pattern = data
    enc = EncoderHandle.create(0, **SMALL)
    before = state_digest({"e": enc.module})
    a, log_a = embed_watermark(enc, pre, shadow, pattern, _cfg(utility_kind=kind))
    b, log_b = embed_watermark(enc, pre, shadow, pattern, _cfg(utility_kind=kind))
    assert state_digest({"e": enc.module}) == before
    assert [e["total"] for e in log_a["epochs"]] == pytest.approx([e["total"] for e in log_b["epochs"]], abs=1e-6)
    assert state_digest({"e": a.module}) == state_digest({"e": b.module})
    assert len(log_a["epochs"]) == 2 and set(log_a["epochs"][0]) == {"epoch", "utility", "wm", "total"}
    assert a.meta["epoch"] == 2 and a.meta["pattern_provenance"] == pattern.provenance


def test_lambda_zero_logs_wm_but_ignores_it(data):
    pre, shadow, pattern = data
    enc = EncoderHandle.create(0, **SMALL)
    plain, log = embed_watermark(enc, pre, shadow, pattern, _cfg(lambda_wm=0.0))
    assert all(e["total"] == e["utility"] for e in log["epochs"])
    assert all(np.isfinite(e["wm"]) for e in log["epochs"])
    # a different pattern changes nothing when lambda is zero
    other, _ = embed_watermark(enc, pre, shadow, generate_pattern("x", b"y"), _cfg(lambda_wm=0.0))
    assert state_digest({"e": plain.module}) == state_digest({"e": other.module})
    assert plain.meta["pattern_provenance"] is None


def test_divergence_raises_training_failure(data):
    pre, shadow, pattern = data
    enc = EncoderHandle.create(0, **SMALL)
    with torch.no_grad():
        for p in enc.module.parameters():
            p.fill_(float("nan"))
    with pytest.raises(TrainingFailure) as err:
        embed_watermark(enc, pre, shadow, pattern, _cfg())
    assert err.value.epoch == 0


def test_encoder_checkpoint_roundtrip_and_integrity(tmp_path):
    enc = EncoderHandle.create(4, **SMALL)
    digest = save_encoder(enc, tmp_path / "ckpt")
    back = load_encoder(tmp_path / "ckpt")
    assert state_digest({"encoder": back.module}) == digest
    x = np.random.default_rng(0).uniform(size=(3, 3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(enc.embed(x), back.embed(x))
    blob = next((tmp_path / "ckpt" / "tensors").glob("*.bin"))
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_encoder(tmp_path / "ckpt")


def test_embed_rejects_wrong_input_shape():
    enc = EncoderHandle.create(0, **SMALL)
    with pytest.raises(DimensionError):
        enc.embed(np.zeros((2, 3, 16, 16), np.float32))


@pytest.fixture(scope="module")
def task():
    return split_corpus(synthetic_corpus("blobs", 150, seed=5, corpus_id="blobs"), 0.4, seed=5)


def test_train_downstream_freezes_encoder_and_beats_chance(task):
    enc = EncoderHandle.create(1, **SMALL)
    before = state_digest({"e": enc.module})
    model, metrics = train_downstream(enc, task, HeadConfig(epochs=30, seed=0))
    assert state_digest({"e": model.encoder.module}) == before
    assert metrics["train_accuracy"] > 1.0 / task.n_classes
    assert 0.0 <= metrics["test_accuracy"] <= 1.0
    again, _ = train_downstream(enc, task, HeadConfig(epochs=30, seed=0))
    np.testing.assert_array_equal(model.predict(task.test.images), again.predict(task.test.images))


def test_suspect_model_roundtrip(tmp_path, task):
    model, _ = train_downstream(EncoderHandle.create(1, **SMALL), task, HeadConfig(epochs=2))
    model.save(tmp_path / "m")
    back = SuspectModel.load(tmp_path / "m")
    np.testing.assert_array_equal(model.logits(task.test.images), back.logits(task.test.images))
    assert back.n_classes == task.n_classes


def test_predict_breaks_ties_to_lowest_class(task):
    model, _ = train_downstream(EncoderHandle.create(1, **SMALL), task, HeadConfig(epochs=1))
    with torch.no_grad():
        for p in model.head.parameters():
            p.zero_()
    assert (model.predict(task.test.images[:5]) == 0).all()


def test_transfer_errors(task):
    enc = EncoderHandle.create(1, **SMALL)
    empty = Corpus("e", np.zeros((0, 3, 32, 32), np.float32), np.zeros(0, np.int64), 5)
    with pytest.raises(DataError):
        train_downstream(enc, DownstreamCorpus("e", empty, task.test))
    unlabeled = Corpus("u", task.train.images, None)
    with pytest.raises(DataError):
        train_downstream(enc, DownstreamCorpus("u", unlabeled, task.test))
    model, _ = train_downstream(enc, task, HeadConfig(epochs=1))
    with pytest.raises(DataError):
        evaluate_accuracy(model, empty)
    wrong = head_descriptor(99, 5)
    with pytest.raises(DimensionError):
        SuspectModel(enc, model.head, wrong)


def test_head_config_validation():
    with pytest.raises(ConfigurationError):
        HeadConfig(epochs=-1)
    with pytest.raises(ConfigurationError):
        HeadConfig(batch_size=0)
    with pytest.raises(ConfigurationError):
        HeadConfig(learning_rate=0.0)
    with pytest.raises(ConfigurationError):
        HeadConfig(hidden=1.5)


def test_lambda_schedule():
    from sslwm.embed import _ramp

    cfg = EmbedConfig(wm_delay_epochs=2, wm_warmup_epochs=4)
    assert [_ramp(t, cfg) for t in (0, 1.9, 2, 3, 4, 6, 9)] == [0.0, 0.0, 0.0, 0.25, 0.5, 1.0, 1.0]
    assert _ramp(0, EmbedConfig()) == 1.0
    with pytest.raises(ConfigurationError):
        EmbedConfig(wm_delay_epochs=-1)


@pytest.mark.parametrize("kind", ["contrastive-ssl", "generative-ssl"])
def test_delay_past_training_matches_lambda_zero(data, kind):
    pre, shadow, pattern = data
    enc = EncoderHandle.create(0, **SMALL)
    delayed, _ = embed_watermark(enc, pre, shadow, pattern, _cfg(utility_kind=kind, wm_delay_epochs=5, center_wm=True))
    plain, _ = embed_watermark(enc, pre, shadow, pattern, _cfg(utility_kind=kind, lambda_wm=0.0))
    assert state_digest({"e": delayed.module}) == state_digest({"e": plain.module})


def test_centering_changes_the_watermark_term(data):
    pre, shadow, pattern = data
    enc = EncoderHandle.create(0, **SMALL)
    _, raw = embed_watermark(enc, pre, shadow, pattern, _cfg(epochs=1))
    _, centered = embed_watermark(enc, pre, shadow, pattern, _cfg(epochs=1, center_wm=True))
    assert raw["epochs"][0]["wm"] != centered["epochs"][0]["wm"]

