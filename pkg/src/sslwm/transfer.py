"""Downstream transfer: suspect models built on a frozen encoder."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import transfer_augment
from .corpora import Corpus, DownstreamCorpus
from .errors import ConfigurationError, DataError, DimensionError
from .nets import ClassifierHead, EncoderHandle, load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class HeadConfig:
    hidden: int = 0
    epochs: int = 20
    learning_rate: float = 0.01
    weight_decay: float = 0.0
    batch_size: int = 256
    augment_copies: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("hidden", "epochs", "batch_size", "augment_copies"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigurationError(f"{name} must be a non-negative integer")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.learning_rate > 0 or self.weight_decay < 0:
            raise ConfigurationError("learning_rate must be > 0 and weight_decay >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class SuspectModel:
    """The composite ``head(encoder(x))`` an adversary would deploy."""

    encoder: EncoderHandle
    head: ClassifierHead
    head_descriptor: dict
    task: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.head_descriptor["embed_dim"] != self.encoder.embed_dim:
            raise DimensionError(
                f"head expects {self.head_descriptor['embed_dim']}-d embeddings, encoder gives {self.encoder.embed_dim}"
            )

    @property
    def n_classes(self):
        return self.head.n_classes

    @property
    def module(self) -> nn.Module:
        """A view sharing parameters with the encoder and head."""
        return nn.Sequential(self.encoder.module, self.head)

    def named_sections(self):
        return {"encoder": self.encoder.module, "head": self.head}

    def copy(self) -> "SuspectModel":
        return SuspectModel(self.encoder.copy(), copy.deepcopy(self.head), dict(self.head_descriptor), dict(self.task))

    @torch.no_grad()
    def logits(self, images, batch_size=512) -> np.ndarray:
        self.encoder.module.eval()
        self.head.eval()
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1:] != self.encoder.input_shape:
            raise DimensionError(f"model expects (N, {self.encoder.input_shape}), got {images.shape}")
        out = []
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(images[i:i + batch_size])
            out.append(self.head(self.encoder.module(x)))
        if not out:
            return np.empty((0, self.n_classes), np.float32)
        return torch.cat(out).numpy()

    def predict(self, images) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. the lowest class index on ties
        return np.argmax(self.logits(images), axis=1)

    def save(self, directory):
        return save_checkpoint(
            directory,
            {
                "encoder": (self.encoder.architecture, self.encoder.module),
                "head": (self.head_descriptor, self.head),
            },
            {"encoder_meta": self.encoder.meta, "task": self.task},
        )

    @classmethod
    def load(cls, directory) -> "SuspectModel":
        sections, meta = load_checkpoint(directory)
        enc_desc, enc = sections["encoder"]
        head_desc, head = sections["head"]
        return cls(EncoderHandle(enc_desc, enc, meta.get("encoder_meta", {})), head, head_desc, meta.get("task", {}))


def head_descriptor(embed_dim, n_classes, hidden=0):
    return {"type": "classifier_head", "embed_dim": embed_dim, "n_classes": n_classes, "hidden": hidden}


def _check_labels(corpus: Corpus, n_classes):
    if corpus.labels is None:
        raise DataError(f"corpus '{corpus.corpus_id}' is unlabeled")
    if len(corpus.labels) and (corpus.labels.min() < 0 or corpus.labels.max() >= n_classes):
        raise DataError(f"labels of '{corpus.corpus_id}' fall outside [0, {n_classes})")


def train_downstream(encoder: EncoderHandle, corpus: DownstreamCorpus, config: HeadConfig = HeadConfig()):
    """Freeze ``encoder`` and fit a classifier head by cross-entropy.

    Returns ``(model, metrics)`` where metrics holds train/test accuracy.
    """
    if len(corpus.train) == 0:
        raise DataError("downstream training split is empty")
    M = corpus.n_classes
    _check_labels(corpus.train, M)
    _check_labels(corpus.test, M)

    torch.manual_seed(config.seed)
    desc = head_descriptor(encoder.embed_dim, M, config.hidden)
    head = ClassifierHead(encoder.embed_dim, M, config.hidden)
    # the encoder never receives gradients: embeddings of the train split and
    # of a fixed number of augmented copies are computed once, up front
    gen = torch.Generator().manual_seed(config.seed)
    views = [corpus.train.images]
    for _ in range(config.augment_copies):
        views.append(transfer_augment(torch.from_numpy(corpus.train.images), gen).numpy())
    feats = torch.from_numpy(np.concatenate([encoder.embed(v) for v in views]))
    labels = torch.from_numpy(np.tile(corpus.train.labels, len(views)))
    head.set_feature_stats(feats)
    opt = torch.optim.Adam(head.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    for _ in range(config.epochs):
        head.train()
        perm = torch.from_numpy(rng.permutation(len(feats)))
        for i in range(0, len(feats), config.batch_size):
            idx = perm[i:i + config.batch_size]
            loss = F.cross_entropy(head(feats[idx]), labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    head.eval()
    model = SuspectModel(encoder, head, desc, {"corpus": corpus.corpus_id, "n_classes": M})
    metrics = {
        "train_accuracy": evaluate_accuracy(model, corpus.train),
        "test_accuracy": evaluate_accuracy(model, corpus.test) if len(corpus.test) else None,
    }
    return model, metrics


def evaluate_accuracy(model, split: Corpus, labels=None) -> float:
    """Fraction of samples whose argmax logit equals the label.

    ``split`` is a labeled :class:`Corpus`, or an image array with ``labels``
    passed separately.
    """
    if isinstance(split, Corpus):
        images, labels = split.images, split.labels
    else:
        images = split
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DataError("cannot evaluate accuracy on an empty split")
    return float(np.mean(model.predict(images) == labels))
