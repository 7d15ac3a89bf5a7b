"""Toy encoder/decoder/head networks and the checkpoint directory format.

A checkpoint is a directory::

    architecture.json        {"sections": {name: descriptor}, "meta": {...}}
    tensors/<name>.bin       raw little-endian float32, one per named tensor
    manifest.json            {"tensors": {name: {"shape", "file", "sha256"}},
                              "content_hash": ...}
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import DimensionError, IntegrityError

DEFAULT_CHANNELS = (32, 64, 128, 128)


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1),
        nn.GroupNorm(min(8, cout), cout),
        nn.ReLU(inplace=True),
    )


class ConvEncoder(nn.Module):
    def __init__(self, channels=DEFAULT_CHANNELS, embed_dim=128, in_channels=3):
        super().__init__()
        layers, cin = [], in_channels
        for c in channels:
            layers.append(_block(cin, c))
            cin = c
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(cin, embed_dim)

    def forward(self, x):
        return self.head(self.pool(self.features(x)).flatten(1))


class ConvDecoder(nn.Module):
    """Maps an embedding back to a (3, 32, 32) image for the reconstruction loss."""

    def __init__(self, embed_dim=128, width=64, image_size=32):
        super().__init__()
        self.width = width
        self.start = image_size // 8
        self.fc = nn.Linear(embed_dim, width * self.start * self.start)
        self.up = nn.Sequential(
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(width, width // 2, 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(width // 2, 3, 4, stride=2, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, z):
        h = self.fc(z).view(-1, self.width, self.start, self.start)
        return self.up(h)


class ClassifierHead(nn.Module):
    """Linear (or one-hidden-layer) classifier over standardized embeddings.

    The per-feature mean and scale are fixed buffers set from the training
    embeddings before fitting; they are not trained.
    """

    def __init__(self, embed_dim, n_classes, hidden=0):
        super().__init__()
        self.register_buffer("feature_mean", torch.zeros(embed_dim))
        self.register_buffer("feature_scale", torch.ones(embed_dim))
        if hidden:
            self.net = nn.Sequential(nn.Linear(embed_dim, hidden), nn.ReLU(), nn.Linear(hidden, n_classes))
        else:
            self.net = nn.Sequential(nn.Linear(embed_dim, n_classes))
        self.n_classes = n_classes

    @property
    def last_linear(self) -> nn.Linear:
        return self.net[-1]

    @torch.no_grad()
    def set_feature_stats(self, feats: torch.Tensor, eps=1e-6):
        self.feature_mean.copy_(feats.mean(0))
        self.feature_scale.copy_(feats.std(0) + eps)

    def forward(self, z):
        return self.net((z - self.feature_mean) / self.feature_scale)


def build_module(desc: dict) -> nn.Module:
    kind = desc["type"]
    if kind == "conv_encoder":
        return ConvEncoder(tuple(desc["channels"]), desc["embed_dim"], desc["input_shape"][0])
    if kind == "conv_decoder":
        return ConvDecoder(desc["embed_dim"], desc["width"], desc["image_size"])
    if kind == "classifier_head":
        return ClassifierHead(desc["embed_dim"], desc["n_classes"], desc.get("hidden", 0))
    raise ValueError(f"unknown module type {kind!r}")


def encoder_descriptor(channels=DEFAULT_CHANNELS, embed_dim=128, input_shape=(3, 32, 32)):
    return {
        "type": "conv_encoder",
        "channels": list(channels),
        "embed_dim": embed_dim,
        "input_shape": list(input_shape),
    }


@dataclass
class EncoderHandle:
    """The protected encoder plus its training metadata."""

    architecture: dict
    module: nn.Module
    meta: dict = field(default_factory=lambda: {"epoch": 0, "seed": None, "loss_history": []})

    @classmethod
    def create(cls, seed, **arch):
        desc = encoder_descriptor(**arch)
        torch.manual_seed(seed)
        module = build_module(desc)
        return cls(desc, module, {"epoch": 0, "seed": seed, "loss_history": []})

    @property
    def embed_dim(self):
        return self.architecture["embed_dim"]

    @property
    def input_shape(self):
        return tuple(self.architecture["input_shape"])

    def copy(self) -> "EncoderHandle":
        return EncoderHandle(copy.deepcopy(self.architecture), copy.deepcopy(self.module), copy.deepcopy(self.meta))

    @torch.no_grad()
    def embed(self, images, batch_size=512) -> np.ndarray:
        self.module.eval()
        images = np.asarray(images, dtype=np.float32)
        if images.shape[1:] != self.input_shape:
            raise DimensionError(f"encoder expects {self.input_shape}, got {images.shape[1:]}")
        out = [self.module(torch.from_numpy(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
        if not out:
            return np.empty((0, self.embed_dim), np.float32)
        return torch.cat(out).numpy()


# --------------------------------------------------------------------------
# checkpoints

def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().numpy().astype("<f4").tobytes()


def state_digest(sections: dict) -> str:
    """Content hash over every named float tensor of the given modules."""
    h = hashlib.sha256()
    for sname in sorted(sections):
        sd = sections[sname].state_dict()
        for name in sorted(sd):
            h.update(f"{sname}.{name}".encode())
            h.update(_tensor_bytes(sd[name]))
    return h.hexdigest()


def save_checkpoint(directory, sections: dict, meta=None):
    """``sections`` maps a section name to ``(descriptor, module)``."""
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = {}
    for sname, (_, module) in sections.items():
        for name, t in module.state_dict().items():
            full = f"{sname}.{name}"
            blob = _tensor_bytes(t)
            fname = f"tensors/{full}.bin"
            (directory / fname).write_bytes(blob)
            tensors[full] = {"shape": list(t.shape), "file": fname, "sha256": hashlib.sha256(blob).hexdigest()}
    arch = {"sections": {s: d for s, (d, _) in sections.items()}, "meta": meta or {}}
    with open(directory / "architecture.json", "w") as f:
        json.dump(arch, f, indent=1, sort_keys=True)
    manifest = {
        "tensors": tensors,
        "content_hash": state_digest({s: m for s, (_, m) in sections.items()}),
    }
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest["content_hash"]


def load_checkpoint(directory, verify=True):
    """Returns ``({section: (descriptor, module)}, meta)``."""
    directory = Path(directory)
    with open(directory / "architecture.json") as f:
        arch = json.load(f)
    with open(directory / "manifest.json") as f:
        manifest = json.load(f)
    out = {}
    for sname, desc in arch["sections"].items():
        module = build_module(desc)
        sd = module.state_dict()
        new = {}
        for name, ref in sd.items():
            entry = manifest["tensors"].get(f"{sname}.{name}")
            if entry is None:
                raise IntegrityError(f"{directory}: tensor {sname}.{name} missing from manifest")
            blob = (directory / entry["file"]).read_bytes()
            if verify and hashlib.sha256(blob).hexdigest() != entry["sha256"]:
                raise IntegrityError(f"{directory}: hash mismatch for {entry['file']}")
            arr = np.frombuffer(blob, dtype="<f4").reshape(entry["shape"])
            if tuple(arr.shape) != tuple(ref.shape):
                raise DimensionError(f"{sname}.{name}: stored {arr.shape}, expected {tuple(ref.shape)}")
            new[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
        module.load_state_dict(new)
        module.eval()
        out[sname] = (desc, module)
    return out, arch.get("meta", {})


def save_encoder(handle: EncoderHandle, directory):
    return save_checkpoint(directory, {"encoder": (handle.architecture, handle.module)}, handle.meta)


def load_encoder(directory) -> EncoderHandle:
    sections, meta = load_checkpoint(directory)
    desc, module = sections["encoder"]
    return EncoderHandle(desc, module, meta)
