"""Labeled image corpora: procedural toy generators and on-disk formats.

Two on-disk layouts are understood:

* a directory of PNG files with ``manifest.json`` listing
  ``[{"file": ..., "label": ..., "corpus": ...}, ...]``;
* a raw little-endian float32 tensor file ``<name>.f32`` with a JSON sidecar
  ``<name>.json`` holding ``{"shape": [N, 3, H, W], "dtype": "float32",
  "labels": [...]}``.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, DimensionError
from .wm_core import Sample


@dataclass
class Corpus:
    corpus_id: str
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: Optional[np.ndarray]  # (N,) int64, or None for unlabeled pools
    n_classes: int = 0

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DimensionError(f"corpus images must be (N, 3, H, W), got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise DataError("labels and images differ in length")
            if not self.n_classes:
                self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise DataError(f"labels out of range [0, {self.n_classes})")

    def __len__(self):
        return len(self.images)

    def subset(self, idx, corpus_id=None) -> "Corpus":
        idx = np.asarray(idx, dtype=np.int64)
        return Corpus(
            corpus_id or self.corpus_id,
            self.images[idx],
            None if self.labels is None else self.labels[idx],
            self.n_classes,
        )

    def samples(self):
        for i in range(len(self)):
            label = None if self.labels is None else int(self.labels[i])
            yield Sample(self.images[i], label, self.corpus_id)


@dataclass
class DownstreamCorpus:
    """Labeled train/test splits for one downstream task."""

    corpus_id: str
    train: Corpus
    test: Corpus

    @property
    def n_classes(self):
        return self.train.n_classes


# --------------------------------------------------------------------------
# procedural generators

def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    return yy, xx


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _shape_mask(kind, yy, xx, cy, cx, r, angle):
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == 0:  # disk
        return u * u + v * v <= r * r
    if kind == 1:  # square
        return (abs(u) <= 0.8 * r) & (abs(v) <= 0.8 * r)
    if kind == 2:  # triangle
        return (v <= 0.6 * r) & (v >= 1.7 * abs(u) - r)
    if kind == 3:  # ring
        d = u * u + v * v
        return (d <= r * r) & (d >= (0.55 * r) ** 2)
    if kind == 4:  # cross
        return ((abs(u) <= 0.3 * r) & (abs(v) <= r)) | ((abs(v) <= 0.3 * r) & (abs(u) <= r))
    if kind == 5:  # horizontal bar
        return (abs(u) <= 1.1 * r) & (abs(v) <= 0.35 * r)
    if kind == 6:  # diamond
        return abs(u) + abs(v) <= r
    if kind == 7:  # two dots
        return ((u - 0.5 * r) ** 2 + v * v <= (0.45 * r) ** 2) | ((u + 0.5 * r) ** 2 + v * v <= (0.45 * r) ** 2)
    if kind == 8:  # hollow square
        inner = (abs(u) <= 0.45 * r) & (abs(v) <= 0.45 * r)
        return (abs(u) <= 0.85 * r) & (abs(v) <= 0.85 * r) & ~inner
    if kind == 9:  # ellipse
        return (u / (1.2 * r)) ** 2 + (v / (0.55 * r)) ** 2 <= 1.0
    raise ValueError(kind)


def _clutter(img, rng, yy, xx, max_items=4):
    """Paint small background distractors (flat or speckled blobs and bars) anywhere in the frame."""
    size = img.shape[-1]
    for _ in range(rng.integers(1, max_items + 1)):
        h, w = rng.integers(3, 10, size=2)
        r0, c0 = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        if rng.uniform() < 0.5:
            fill = rng.uniform(0, 1, size=(3, 1, 1))
        else:
            fill = rng.uniform(0, 1, size=(3, h, w))
        if rng.uniform() < 0.5:
            img[:, r0:r0 + h, c0:c0 + w] = fill
        else:
            cy, cx = r0 + (h - 1) / 2, c0 + (w - 1) / 2
            m = (((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0)[r0:r0 + h, c0:c0 + w]
            patch = img[:, r0:r0 + h, c0:c0 + w]
            patch[:, m] = np.broadcast_to(fill, patch.shape)[:, m]
    return img


def make_objects(n, seed, size=32, n_classes=10):
    """Natural-image stand-in: a shape whose outline and hue family give the
    class, on a smooth cluttered background."""
    rng = np.random.default_rng(seed)
    yy, xx = _grid(size)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    for i in range(n):
        bg0 = rng.uniform(0.1, 0.9, size=3)
        bg1 = rng.uniform(0.1, 0.9, size=3)
        a = rng.uniform(0, 2 * math.pi)
        t = ((math.cos(a) * xx + math.sin(a) * yy) / size)[None]
        img = bg0[:, None, None] * (1 - t) + bg1[:, None, None] * t
        img = _clutter(img, rng, yy, xx)
        hue = (labels[i] / n_classes + rng.normal(0.0, 0.03)) % 1.0
        fg = np.array(_hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)))
        r = rng.uniform(6.0, 10.0)
        cy, cx = rng.uniform(r, size - r, size=2)
        m = _shape_mask(int(labels[i]) % 10, yy, xx, cy, cx, r, rng.uniform(-0.4, 0.4))
        img = np.where(m[None], fg[:, None, None], img)
        img = img + rng.normal(0.0, 0.04, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels


_SIGN_COLORS = [
    (0.85, 0.1, 0.1), (0.1, 0.25, 0.8), (0.95, 0.8, 0.1), (0.1, 0.6, 0.2),
    (0.95, 0.5, 0.05), (0.55, 0.1, 0.7), (0.1, 0.75, 0.8), (0.9, 0.9, 0.9),
]


SIGN_FADED_FRACTION = 0.12


def make_signs(n, seed, size=32, n_classes=8):
    """Road-sign stand-in: a centred board whose color (and shape/glyph) is the
    class, on a grey cluttered street-like background."""
    rng = np.random.default_rng(seed)
    yy, xx = _grid(size)
    boards = [0, 2, 1, 6]  # disk, triangle, square, diamond
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    for i in range(n):
        c = int(labels[i])
        grey = rng.uniform(0.3, 0.6)
        img = np.full((3, size, size), grey, dtype=np.float64)
        img += rng.normal(0.0, 0.05, size=(3, 1, 1))
        img = _clutter(img, rng, yy, xx)
        r = rng.uniform(7.5, 10.0)
        cy, cx = size / 2 + rng.normal(0, 1.0, size=2)
        board = _shape_mask(boards[c % 4], yy, xx, cy, cx, r, 0.0)
        color = np.array(_SIGN_COLORS[c % len(_SIGN_COLORS)]) * rng.uniform(0.7, 1.0)
        sign = np.where(board[None], color[:, None, None], img)
        glyph = _shape_mask(5 if c < 4 else 4, yy, xx, cy, cx, 0.45 * r, 0.0)
        sign = np.where((board & glyph)[None], 0.05 if c == 7 else 0.95, sign)
        # a share of faded, barely visible signs keeps the task from being trivially separable
        alpha = rng.uniform(0.05, 0.25) if rng.uniform() < SIGN_FADED_FRACTION else 1.0
        img = alpha * sign + (1 - alpha) * img
        img = img * rng.uniform(0.6, 1.1) + rng.normal(0.0, 0.03, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels


def make_textures(n, seed, size=32, n_classes=4):
    """Oriented sinusoid gratings; the orientation bin is the class."""
    rng = np.random.default_rng(seed)
    yy, xx = _grid(size)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    for i in range(n):
        theta = (labels[i] + rng.uniform(-0.3, 0.3)) * math.pi / n_classes
        freq = rng.uniform(0.15, 0.5)
        phase = rng.uniform(0, 2 * math.pi)
        wave = 0.5 + 0.5 * np.sin(freq * (math.cos(theta) * xx + math.sin(theta) * yy) + phase)
        c0, c1 = rng.uniform(0, 1, size=3), rng.uniform(0, 1, size=3)
        img = c0[:, None, None] * wave[None] + c1[:, None, None] * (1 - wave[None])
        images[i] = np.clip(img + rng.normal(0, 0.03, size=img.shape), 0.0, 1.0)
    return images, labels


def make_blobs(n, seed, size=32, n_classes=5):
    """Soft Gaussian blobs; the blob count (1..n_classes) is the class."""
    rng = np.random.default_rng(seed)
    yy, xx = _grid(size)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    for i in range(n):
        img = np.tile(rng.uniform(0, 0.4, size=(3, 1, 1)), (1, size, size))
        for _ in range(int(labels[i]) + 1):
            cy, cx = rng.uniform(4, size - 4, size=2)
            s = rng.uniform(2.0, 4.0)
            g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
            img = img + rng.uniform(0.3, 1.0, size=(3, 1, 1)) * g[None]
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels


GENERATORS = {
    "objects": (make_objects, 10),
    "signs": (make_signs, 8),
    "textures": (make_textures, 4),
    "blobs": (make_blobs, 5),
}


def synthetic_corpus(kind, n, seed, corpus_id=None) -> Corpus:
    try:
        fn, n_classes = GENERATORS[kind]
    except KeyError:
        raise DataError(f"unknown synthetic corpus kind {kind!r}; known: {sorted(GENERATORS)}") from None
    images, labels = fn(n, seed)
    return Corpus(corpus_id or kind, images, labels, n_classes)


def split_corpus(corpus: Corpus, test_fraction, seed) -> DownstreamCorpus:
    """Stratified train/test split."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(corpus.n_classes):
        idx = np.flatnonzero(corpus.labels == c)
        rng.shuffle(idx)
        k = int(round(len(idx) * test_fraction))
        test_idx.append(idx[:k])
        train_idx.append(idx[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return DownstreamCorpus(corpus.corpus_id, corpus.subset(train_idx), corpus.subset(test_idx))


# --------------------------------------------------------------------------
# disk formats

def save_raw(corpus: Corpus, path):
    """Write ``<path>.f32`` and the ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    corpus.images.astype("<f4").tofile(path.with_suffix(".f32"))
    header = {
        "shape": list(corpus.images.shape),
        "dtype": "float32",
        "labels": None if corpus.labels is None else corpus.labels.tolist(),
        "corpus": corpus.corpus_id,
        "n_classes": corpus.n_classes,
    }
    with open(path.with_suffix(".json"), "w") as f:
        json.dump(header, f)


def load_raw(path, corpus_id=None) -> Corpus:
    path = Path(path)
    with open(path.with_suffix(".json")) as f:
        header = json.load(f)
    if header.get("dtype", "float32") != "float32":
        raise DataError(f"unsupported dtype {header['dtype']!r}")
    shape = tuple(header["shape"])
    data = np.fromfile(path.with_suffix(".f32"), dtype="<f4")
    if data.size != math.prod(shape):
        raise DimensionError(f"{path}: {data.size} floats but header says {shape}")
    return Corpus(
        corpus_id or header.get("corpus") or path.stem,
        data.reshape(shape),
        header.get("labels"),
        header.get("n_classes", 0),
    )


def save_png_dir(corpus: Corpus, directory):
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, img in enumerate(corpus.images):
        name = f"{i:06d}.png"
        arr = np.round(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(directory / name)
        label = None if corpus.labels is None else int(corpus.labels[i])
        manifest.append({"file": name, "label": label, "corpus": corpus.corpus_id})
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f)


def load_png_dir(directory, corpus_id=None) -> Corpus:
    from PIL import Image

    directory = Path(directory)
    with open(directory / "manifest.json") as f:
        manifest = json.load(f)
    if not manifest:
        raise DataError(f"{directory}: empty manifest")
    images = []
    for entry in manifest:
        with Image.open(directory / entry["file"]) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        images.append(arr.transpose(2, 0, 1))
    labels = [e.get("label") for e in manifest]
    labels = None if any(l is None for l in labels) else labels
    return Corpus(corpus_id or manifest[0].get("corpus") or directory.name, np.stack(images), labels)


def load_corpus(path, corpus_id=None) -> Corpus:
    """Load either on-disk layout, chosen by what exists at ``path``."""
    path = Path(path)
    if path.is_dir():
        return load_png_dir(path, corpus_id)
    if path.with_suffix(".json").exists() and path.with_suffix(".f32").exists():
        return load_raw(path, corpus_id)
    raise FileNotFoundError(f"no corpus at {os.fspath(path)}")
