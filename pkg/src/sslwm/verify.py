"""Black-box ownership verification.

The suspect model is only ever asked for labels. Clean query sets and one
watermarked set are built from the owner's labeled pool; the Shannon entropy
of each set's predicted-label histogram is computed, and the watermarked
set's entropy is tested against the clean ones with a MAD outlier index.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .corpora import Corpus
from .errors import ArityError, CapacityError, ConfigurationError, DataError, ProtocolError, TransportError
from .wm_core import Sample, WatermarkPattern, stamp_images

MAD_K = 1.4826
DEFAULT_THRESHOLD = 3.0


# --------------------------------------------------------------------------
# endpoints

def _as_images(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return np.asarray(samples, dtype=np.float32)
    samples = list(samples)
    if not samples:
        return np.empty((0, 3, 0, 0), np.float32)
    return np.stack([s.pixels if isinstance(s, Sample) else np.asarray(s, np.float32) for s in samples])


class Transcript:
    """Append-only audit log of every query batch: input hash and returned labels."""

    def __init__(self):
        self.entries = []

    def record(self, images: np.ndarray, labels):
        digest = hashlib.sha256(np.ascontiguousarray(images, dtype="<f4").tobytes()).hexdigest()
        self.entries.append({"inputs_sha256": digest, "n": int(len(images)), "labels": [int(l) for l in labels]})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.entries, sort_keys=True).encode()).hexdigest()

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.entries, f)


class LocalEndpoint:
    """In-process access to a model exposing ``predict(images)`` and ``n_classes``."""

    def __init__(self, model):
        self.model = model
        self.n_classes = model.n_classes

    def query(self, images: np.ndarray) -> np.ndarray:
        return np.asarray(self.model.predict(images), dtype=np.int64)


class HttpEndpoint:
    """Remote suspect model speaking the ``POST /predict`` JSON protocol."""

    def __init__(self, url, n_classes=None, timeout=30.0, retries=3, max_batch=256, max_in_flight=1, backoff=0.2):
        import requests

        self.url = url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.max_batch = max_batch
        self.max_in_flight = max(1, max_in_flight)
        self.backoff = backoff
        self._session = requests.Session()
        self.n_classes = n_classes if n_classes is not None else self.health()["classes"]

    def _request(self, method, path, **kw):
        import requests

        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._session.request(method, self.url + path, timeout=self.timeout, **kw)
            except requests.RequestException as exc:
                last = exc
            else:
                if resp.status_code < 500:
                    return resp
                last = f"HTTP {resp.status_code}"
            if attempt < self.retries:
                time.sleep(self.backoff * (2 ** attempt))
        raise TransportError(f"{method} {self.url}{path} failed: {last}", self.retries)

    def health(self) -> dict:
        resp = self._request("GET", "/health")
        try:
            return resp.json()
        except ValueError as exc:
            raise ProtocolError(f"malformed /health reply: {exc}") from None

    def _predict_chunk(self, images: np.ndarray) -> np.ndarray:
        body = json.dumps({"inputs": images.astype(np.float32).tolist()})
        resp = self._request("POST", "/predict", data=body, headers={"Content-Type": "application/json"})
        if resp.status_code != 200:
            raise ProtocolError(f"/predict returned {resp.status_code}: {resp.text[:200]}")
        try:
            reply = resp.json()
            labels = np.asarray(reply["labels"], dtype=np.int64)
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed /predict reply: {exc}") from None
        if labels.shape != (len(images),):
            raise ProtocolError(f"expected {len(images)} labels, got shape {labels.shape}")
        probs = reply.get("probs")
        if probs is not None and np.asarray(probs).shape[-1] != self.n_classes:
            raise ProtocolError(f"reply has {np.asarray(probs).shape[-1]} class scores, expected {self.n_classes}")
        return labels

    def query(self, images: np.ndarray) -> np.ndarray:
        chunks = [images[i:i + self.max_batch] for i in range(0, len(images), self.max_batch)]
        if self.max_in_flight == 1 or len(chunks) <= 1:
            parts = [self._predict_chunk(c) for c in chunks]
        else:
            with ThreadPoolExecutor(self.max_in_flight) as pool:
                parts = list(pool.map(self._predict_chunk, chunks))
        return np.concatenate(parts) if parts else np.empty(0, np.int64)


def predict_labels(endpoint, samples, transcript: Optional[Transcript] = None) -> np.ndarray:
    """Query ``endpoint`` and return the predicted class of each sample."""
    images = _as_images(samples)
    if len(images) == 0:
        return np.empty(0, np.int64)
    try:
        labels = endpoint.query(images)
    except (TransportError, ProtocolError) as exc:
        exc.transcript = transcript
        raise
    M = endpoint.n_classes
    if len(labels) and (labels.min() < 0 or labels.max() >= M):
        raise ProtocolError(f"endpoint returned labels outside [0, {M})", transcript)
    if transcript is not None:
        transcript.record(images, labels)
    return labels


# --------------------------------------------------------------------------
# statistics

@dataclass
class EntropyRecord:
    set_id: str
    label_histogram: list
    entropy: float


def set_entropy(labels, n_classes, set_id="") -> EntropyRecord:
    """Shannon entropy (bits) of the empirical label distribution of one query set."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ArityError("entropy of an empty query set is undefined")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(f"labels outside [0, {n_classes})")
    hist = np.bincount(labels, minlength=n_classes)
    p = hist[hist > 0] / labels.size
    h = float(-(p * np.log2(p)).sum()) + 0.0  # no negative zero
    return EntropyRecord(set_id, hist.tolist(), max(h, 0.0))


def mad_outlier_index(clean_entropies, wm_entropy, k=MAD_K):
    """Return ``(mad, outlier_index)`` of ``wm_entropy`` among all entropies.

    When the MAD is zero the index is 0 if the watermark entropy equals the
    median and signed infinity otherwise; callers flag that case.
    """
    clean = np.asarray(clean_entropies, dtype=np.float64)
    if clean.size < 2:
        raise ArityError("need at least two clean entropies")
    if k <= 0:
        raise ConfigurationError("k must be positive")
    h_all = np.append(clean, wm_entropy)
    med = float(np.median(h_all))
    mad = float(np.median(np.abs(h_all - med)))
    num = med - float(wm_entropy)
    if mad == 0.0:
        return mad, 0.0 if num == 0.0 else math.copysign(math.inf, num)
    return mad, num / (k * mad)


# --------------------------------------------------------------------------
# protocol

@dataclass(frozen=True)
class QueryPlan:
    n_classes: int
    pattern: WatermarkPattern
    n_clean_sets: int = 10
    samples_per_class: int = 30
    seed: int = 0
    threshold: float = DEFAULT_THRESHOLD
    k: float = MAD_K

    def __post_init__(self):
        if self.n_clean_sets < 2:
            raise ConfigurationError("n_clean_sets must be >= 2")
        if self.samples_per_class < 1:
            raise ConfigurationError("samples_per_class must be >= 1")
        if self.k <= 0:
            raise ConfigurationError("k must be positive")


@dataclass
class OutlierReport:
    clean_entropies: list
    wm_entropy: float
    mad: float
    k: float
    outlier_index: float
    threshold: float
    verdict: str
    degenerate: bool
    sampling: str
    records: list = field(default_factory=list)
    transcript_sha256: str = ""
    n_queries: int = 0

    @property
    def claimed(self):
        return self.verdict == "claimed"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["records"] = [r if isinstance(r, EntropyRecord) else EntropyRecord(**r) for r in d.get("records", [])]
        return cls(**d)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)


def build_query_sets(pool: Corpus, plan: QueryPlan):
    """Draw ``n_clean_sets + 1`` class-balanced index sets from ``pool``.

    Sets are mutually disjoint when every class holds enough samples,
    otherwise each set is drawn independently (without replacement inside a
    set). The last set is the one that gets watermarked.
    """
    if pool.labels is None:
        raise DataError("verification pool must be labeled")
    n_sets = plan.n_clean_sets + 1
    spc = plan.samples_per_class
    rng = np.random.default_rng(plan.seed)
    by_class = [np.flatnonzero(pool.labels == c) for c in range(plan.n_classes)]
    short = [c for c, idx in enumerate(by_class) if len(idx) < spc]
    if short:
        raise CapacityError(f"pool has fewer than {spc} samples for classes {short}")
    disjoint = all(len(idx) >= n_sets * spc for idx in by_class)
    sets = [[] for _ in range(n_sets)]
    for idx in by_class:
        if disjoint:
            perm = rng.permutation(idx)
            for s in range(n_sets):
                sets[s].append(perm[s * spc:(s + 1) * spc])
        else:
            for s in range(n_sets):
                sets[s].append(rng.choice(idx, size=spc, replace=False))
    return [np.concatenate(s) for s in sets], "disjoint" if disjoint else "overlapping"


def verify_ownership(endpoint, pool: Corpus, plan: QueryPlan, transcript: Optional[Transcript] = None) -> OutlierReport:
    """Query clean and watermarked sets and decide ownership from the MAD index."""
    if endpoint.n_classes != plan.n_classes:
        raise ProtocolError(f"endpoint serves {endpoint.n_classes} classes, plan expects {plan.n_classes}")
    transcript = transcript if transcript is not None else Transcript()
    sets, sampling = build_query_sets(pool, plan)
    records = []
    for s, idx in enumerate(sets[:-1]):
        labels = predict_labels(endpoint, pool.images[idx], transcript)
        records.append(set_entropy(labels, plan.n_classes, f"clean-{s}"))
    wm_images = stamp_images(pool.images[sets[-1]], plan.pattern)
    wm_labels = predict_labels(endpoint, wm_images, transcript)
    wm_record = set_entropy(wm_labels, plan.n_classes, "watermarked")
    records.append(wm_record)

    clean = [r.entropy for r in records[:-1]]
    mad, index = mad_outlier_index(clean, wm_record.entropy, plan.k)
    return OutlierReport(
        clean_entropies=clean,
        wm_entropy=wm_record.entropy,
        mad=mad,
        k=plan.k,
        outlier_index=index,
        threshold=plan.threshold,
        verdict="claimed" if index > plan.threshold else "not-claimed",
        degenerate=mad == 0.0 and index != 0.0,
        sampling=sampling,
        records=records,
        transcript_sha256=transcript.digest(),
        n_queries=sum(e["n"] for e in transcript.entries),
    )
