import numpy as np
import pytest

from sslwm.corpora import Corpus, load_corpus, save_png_dir, save_raw, split_corpus, synthetic_corpus
from sslwm.errors import CapacityError, CorpusLookupError, ConfigurationError
from sslwm.shadow import ShadowDataset, ShadowSpec, build_shadow


def _corpus(cid, n, n_classes, seed=0, labeled=True):
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(n, 3, 8, 8)).astype(np.float32)
    labels = np.arange(n) % n_classes if labeled else None
    return Corpus(cid, images, labels, n_classes if labeled else 0)


@pytest.fixture
def sources():
    return {"P": _corpus("P", 200, 10), "A": _corpus("A", 80, 4, 1), "U": _corpus("U", 50, 0, 2, labeled=False)}


def test_auxiliary_quota_balanced_per_class(sources):
    ds = build_shadow(ShadowSpec("P", 0.0, (("A", 40),)), sources)
    assert len(ds) == 40
    assert np.bincount(ds.labels, minlength=4).tolist() == [10, 10, 10, 10]
    assert set(ds.domain_tags) == {"A"}


def test_empty_spec_gives_empty_dataset(sources):
    ds = build_shadow(ShadowSpec("P", 0.0), sources)
    assert len(ds) == 0


def test_primary_rate_half(sources):
    ds = build_shadow(ShadowSpec("P", 0.5), sources)
    assert len(ds) == 100
    assert np.bincount(ds.labels, minlength=10).tolist() == [10] * 10


def test_remainder_goes_to_lowest_classes(sources):
    ds = build_shadow(ShadowSpec("P", 0.0, (("A", 6),)), sources)
    assert np.bincount(ds.labels, minlength=4).tolist() == [2, 2, 1, 1]


def test_unlabeled_source_and_union_of_tags(sources):
    ds = build_shadow(ShadowSpec("P", 0.1, (("A", 8), ("U", 5))), sources)
    assert set(ds.domain_tags) == {"P", "A", "U"}
    assert (ds.labels[np.array(ds.domain_tags) == "U"] == -1).all()
    assert all(s.label is None for s in ds.samples if s.domain_tag == "U")


def test_rebuild_is_identical_including_order(sources):
    spec = ShadowSpec("P", 0.3, (("A", 12), ("U", 7)), seed=9)
    a, b = build_shadow(spec, sources), build_shadow(spec, sources)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.domain_tags == b.domain_tags
    c = build_shadow(ShadowSpec("P", 0.3, (("A", 12), ("U", 7)), seed=10), sources)
    assert not np.array_equal(a.source_index, c.source_index)


def test_errors(sources):
    with pytest.raises(CapacityError):
        build_shadow(ShadowSpec("P", 0.0, (("A", 81),)), sources)
    skewed = Corpus("A", np.zeros((80, 3, 8, 8), np.float32), [0] * 2 + [1] * 78, 2)
    with pytest.raises(CapacityError):
        build_shadow(ShadowSpec("P", 0.0, (("A", 10),)), {**sources, "A": skewed})
    with pytest.raises(CorpusLookupError):
        build_shadow(ShadowSpec("P", 0.0, (("Z", 1),)), sources)
    with pytest.raises(CorpusLookupError):
        build_shadow(ShadowSpec("missing", 0.1), sources)
    with pytest.raises(ConfigurationError):
        ShadowSpec("P", 1.5)
    with pytest.raises(ConfigurationError):
        ShadowSpec("P", 0.1, (("A", -1),))


def test_save_and_reload(tmp_path, sources):
    ds = build_shadow(ShadowSpec("P", 0.2, (("A", 8),), seed=3), sources)
    ds.save(tmp_path / "shadow.json")
    back = ShadowDataset.load(tmp_path / "shadow.json", sources)
    np.testing.assert_array_equal(back.images, ds.images)
    assert back.spec == ds.spec and back.domain_tags == ds.domain_tags


@pytest.mark.parametrize("kind,n_classes", [("objects", 10), ("signs", 8), ("textures", 4), ("blobs", 5)])
def test_synthetic_corpora_shape_and_balance(kind, n_classes):
    c = synthetic_corpus(kind, 4 * n_classes, seed=1)
    assert c.images.shape == (4 * n_classes, 3, 32, 32)
    assert c.images.min() >= 0.0 and c.images.max() <= 1.0
    assert np.bincount(c.labels).tolist() == [4] * n_classes
    np.testing.assert_array_equal(c.images, synthetic_corpus(kind, 4 * n_classes, seed=1).images)


def test_split_is_stratified():
    c = synthetic_corpus("blobs", 100, seed=0)
    d = split_corpus(c, 0.3, seed=0)
    assert len(d.train) + len(d.test) == 100
    assert np.bincount(d.test.labels).tolist() == [6] * 5


def test_raw_and_png_roundtrip(tmp_path):
    c = synthetic_corpus("textures", 8, seed=2, corpus_id="tex")
    save_raw(c, tmp_path / "tex")
    raw = load_corpus(tmp_path / "tex")
    np.testing.assert_array_equal(raw.images, c.images)
    assert raw.labels.tolist() == c.labels.tolist() and raw.corpus_id == "tex"
    save_png_dir(c, tmp_path / "png")
    png = load_corpus(tmp_path / "png")
    # 8-bit quantization
    np.testing.assert_allclose(png.images, c.images, atol=0.5 / 255 + 1e-6)
    assert png.labels.tolist() == c.labels.tolist()
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "nothing")
