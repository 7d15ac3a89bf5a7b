"""Multi-domain shadow dataset used only for embedding the watermark."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .corpora import Corpus
from .errors import CapacityError, ConfigurationError, CorpusLookupError
from .wm_core import Sample


@dataclass(frozen=True)
class ShadowSpec:
    primary_corpus: str
    sampling_rate: float = 0.3
    auxiliary_quotas: tuple = ()  # ((corpus_id, count), ...)
    per_class_balance: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.sampling_rate <= 1.0:
            raise ConfigurationError(f"sampling_rate must be in [0, 1], got {self.sampling_rate}")
        quotas = tuple((str(c), int(n)) for c, n in self.auxiliary_quotas)
        if any(n < 0 for _, n in quotas):
            raise ConfigurationError("auxiliary quotas must be >= 0")
        object.__setattr__(self, "auxiliary_quotas", quotas)

    def to_dict(self):
        d = asdict(self)
        d["auxiliary_quotas"] = [list(q) for q in self.auxiliary_quotas]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ShadowDataset:
    spec: ShadowSpec
    images: np.ndarray
    labels: np.ndarray  # -1 where the source is unlabeled
    domain_tags: list
    source_index: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.images)

    @property
    def samples(self):
        return [
            Sample(self.images[i], None if self.labels[i] < 0 else int(self.labels[i]), self.domain_tags[i])
            for i in range(len(self))
        ]

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "entries": [
                {"corpus": t, "index": int(i), "label": int(l)}
                for t, i, l in zip(self.domain_tags, self.source_index, self.labels)
            ],
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def from_dict(cls, d, sources: Mapping[str, Corpus]) -> "ShadowDataset":
        """Rebuild from a saved entry list by looking samples up in ``sources``."""
        entries = d["entries"]
        for name in {e["corpus"] for e in entries}:
            if name not in sources:
                raise CorpusLookupError(f"shadow references unknown corpus '{name}'")
        shape = next(iter(sources.values())).images.shape[1:] if sources else (3, 32, 32)
        images = np.stack([sources[e["corpus"]].images[e["index"]] for e in entries]) if entries else np.empty((0,) + shape, np.float32)
        return cls(
            ShadowSpec.from_dict(d["spec"]),
            images,
            np.array([e["label"] for e in entries], dtype=np.int64),
            [e["corpus"] for e in entries],
            np.array([e["index"] for e in entries], dtype=np.int64),
        )

    @classmethod
    def load(cls, path, sources: Mapping[str, Corpus]) -> "ShadowDataset":
        with open(path) as f:
            return cls.from_dict(json.load(f), sources)


def _quota_per_class(quota, n_classes):
    base, rem = divmod(quota, n_classes)
    # remainder goes to the lowest class indices
    return [base + (1 if c < rem else 0) for c in range(n_classes)]


def _draw(corpus: Corpus, quota, balance, rng):
    n = len(corpus)
    if quota > n:
        raise CapacityError(f"quota {quota} exceeds corpus '{corpus.corpus_id}' of size {n}")
    if quota == 0:
        return np.empty(0, dtype=np.int64)
    if not balance or corpus.labels is None:
        return rng.choice(n, size=quota, replace=False)
    chosen = []
    for c, k in enumerate(_quota_per_class(quota, corpus.n_classes)):
        pool = np.flatnonzero(corpus.labels == c)
        if k > len(pool):
            raise CapacityError(
                f"corpus '{corpus.corpus_id}' has {len(pool)} samples of class {c}, {k} requested"
            )
        chosen.append(rng.choice(pool, size=k, replace=False))
    return np.concatenate(chosen)


def build_shadow(spec: ShadowSpec, sources: Mapping[str, Corpus]) -> ShadowDataset:
    """Sample the shadow pool: a fraction of the primary corpus plus fixed
    per-corpus quotas, class-balanced when requested, fully determined by
    ``spec.seed``."""
    plan = []
    if spec.primary_corpus not in sources:
        raise CorpusLookupError(f"unknown corpus '{spec.primary_corpus}'")
    primary = sources[spec.primary_corpus]
    plan.append((spec.primary_corpus, math.floor(spec.sampling_rate * len(primary) + 1e-9)))
    for cid, quota in spec.auxiliary_quotas:
        if cid not in sources:
            raise CorpusLookupError(f"unknown corpus '{cid}'")
        plan.append((cid, quota))

    images, labels, tags, index = [], [], [], []
    for j, (cid, quota) in enumerate(plan):
        corpus = sources[cid]
        rng = np.random.default_rng([spec.seed, j])
        idx = _draw(corpus, quota, spec.per_class_balance, rng)
        if len(idx) == 0:
            continue
        images.append(corpus.images[idx])
        labels.append(corpus.labels[idx] if corpus.labels is not None else np.full(len(idx), -1))
        tags.extend([cid] * len(idx))
        index.append(idx)

    if not images:
        H, W = primary.images.shape[2:]
        return ShadowDataset(spec, np.empty((0, 3, H, W), np.float32), np.empty(0, np.int64), [], np.empty(0, np.int64))

    images = np.concatenate(images)
    labels = np.concatenate(labels).astype(np.int64)
    index = np.concatenate(index).astype(np.int64)
    order = np.random.default_rng([spec.seed, len(plan)]).permutation(len(images))
    return ShadowDataset(
        spec,
        images[order],
        labels[order],
        [tags[i] for i in order],
        index[order],
    )
