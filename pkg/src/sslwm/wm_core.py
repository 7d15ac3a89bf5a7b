"""Watermark patterns, stamping and vector similarity."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, DimensionError

DEFAULT_HOST_SHAPE = (32, 32)
DEFAULT_PATCH_SHAPE = (8, 8)


@dataclass(frozen=True, eq=False)
class WatermarkPattern:
    """A hash-derived pixel patch with its binary mask and placement.

    ``patch`` has shape ``(3, h, w)`` with values in [0, 1]; ``mask`` has shape
    ``(h, w)``; ``anchor`` is the (row, col) of the patch's top-left corner.
    """

    patch: np.ndarray
    mask: np.ndarray
    anchor: tuple
    provenance: str

    def __post_init__(self):
        patch = np.asarray(self.patch, dtype=np.float32)
        mask = np.asarray(self.mask, dtype=np.uint8)
        if patch.ndim != 3 or patch.shape[0] != 3:
            raise DimensionError(f"patch must be (3, h, w), got {patch.shape}")
        if mask.shape != patch.shape[1:]:
            raise DimensionError(f"mask shape {mask.shape} != patch shape {patch.shape[1:]}")
        if patch.min() < 0.0 or patch.max() > 1.0:
            raise ConfigurationError("patch values must lie in [0, 1]")
        if not np.isin(mask, (0, 1)).all():
            raise ConfigurationError("mask entries must be 0 or 1")
        patch.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "patch", patch)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "anchor", (int(self.anchor[0]), int(self.anchor[1])))

    @property
    def shape(self):
        return self.mask.shape

    def __eq__(self, other):
        if not isinstance(other, WatermarkPattern):
            return NotImplemented
        return (
            self.anchor == other.anchor
            and self.provenance == other.provenance
            and np.array_equal(self.patch, other.patch)
            and np.array_equal(self.mask, other.mask)
        )

    def footprint(self, host_shape) -> np.ndarray:
        """Binary (H, W) mask of the pixels this pattern overwrites in a host image."""
        self.check_fits(host_shape)
        out = np.zeros(tuple(host_shape), dtype=np.uint8)
        r, c = self.anchor
        h, w = self.shape
        out[r:r + h, c:c + w] = self.mask
        return out

    def check_fits(self, host_shape):
        r, c = self.anchor
        h, w = self.shape
        H, W = host_shape
        if r < 0 or c < 0 or r + h > H or c + w > W:
            raise DimensionError(
                f"pattern {h}x{w} at {self.anchor} does not fit a {H}x{W} image"
            )

    def to_dict(self) -> dict:
        return {
            "patch": self.patch.reshape(-1).astype(float).tolist(),
            "mask": self.mask.reshape(-1).astype(int).tolist(),
            "shape": list(self.shape),
            "anchor": list(self.anchor),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WatermarkPattern":
        h, w = d["shape"]
        return cls(
            patch=np.asarray(d["patch"], dtype=np.float32).reshape(3, h, w),
            mask=np.asarray(d["mask"], dtype=np.uint8).reshape(h, w),
            anchor=tuple(d["anchor"]),
            provenance=d["provenance"],
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "WatermarkPattern":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class Sample:
    pixels: np.ndarray
    label: Optional[int] = None
    domain_tag: str = ""
    is_watermarked: bool = field(default=False, compare=False)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[0] != 3:
            raise DimensionError(f"sample pixels must be (3, H, W), got {px.shape}")
        object.__setattr__(self, "pixels", px)


def _expand_digest(seed: bytes, n: int) -> bytes:
    out = bytearray()
    counter = 0
    while len(out) < n:
        out += hashlib.sha256(seed + counter.to_bytes(4, "big")).digest()
        counter += 1
    return bytes(out[:n])


def generate_pattern(
    information: str,
    key: bytes,
    patch_shape=DEFAULT_PATCH_SHAPE,
    anchor=None,
    host_shape=DEFAULT_HOST_SHAPE,
) -> WatermarkPattern:
    """Derive the trigger patch from the owner's identity and secret key.

    The seed is ``sha256(information || 0x00 || key)``; it is expanded in
    counter mode to ``3*h*w`` bytes, each mapped to ``byte / 255``. When no
    anchor is given the patch sits in the bottom-right corner of the host.
    """
    if isinstance(key, str):
        key = key.encode()
    if not key:
        raise ConfigurationError("watermark key must be non-empty")
    h, w = (int(v) for v in patch_shape)
    if h <= 0 or w <= 0:
        raise ConfigurationError(f"patch shape must be positive, got {patch_shape}")
    H, W = host_shape
    if h > H or w > W:
        raise DimensionError(f"patch {h}x{w} larger than host image {H}x{W}")
    if anchor is None:
        anchor = (H - h, W - w)

    seed = hashlib.sha256(information.encode("utf-8") + b"\x00" + key).digest()
    raw = np.frombuffer(_expand_digest(seed, 3 * h * w), dtype=np.uint8)
    patch = (raw.astype(np.float32) / 255.0).reshape(3, h, w)
    pattern = WatermarkPattern(
        patch=patch,
        mask=np.ones((h, w), dtype=np.uint8),
        anchor=tuple(anchor),
        provenance=seed.hex(),
    )
    pattern.check_fits(host_shape)
    return pattern


def stamp_images(images: np.ndarray, pattern: WatermarkPattern) -> np.ndarray:
    """Stamp a batch of ``(N, 3, H, W)`` images; returns a new array."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError(f"expected (N, 3, H, W) images, got {images.shape}")
    pattern.check_fits(images.shape[2:])
    out = images.copy()
    r, c = pattern.anchor
    h, w = pattern.shape
    region = out[:, :, r:r + h, c:c + w]
    m = pattern.mask.astype(bool)
    region[:, :, m] = pattern.patch[:, m]
    return out


def stamp(sample: Sample, pattern: WatermarkPattern) -> Sample:
    px = stamp_images(sample.pixels[None], pattern)[0]
    return replace(sample, pixels=px, is_watermarked=True)


def cosine_similarity(u: Sequence[float], v: Sequence[float]) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))
