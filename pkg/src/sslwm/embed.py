"""Watermark embedding: SSL pre-training with the added watermark term."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .augment import random_cell_mask, simclr_augment
from .corpora import Corpus
from .errors import ConfigurationError, TrainingFailure
from .losses import (
    nt_xent,
    reconstruction_loss,
    total_loss,
    wm_loss_contrastive,
    wm_loss_variance,
)
from .nets import ConvDecoder, EncoderHandle
from .shadow import ShadowDataset
from .wm_core import WatermarkPattern, stamp_images

WM_LOSSES = {"variance": wm_loss_variance, "contrastive": wm_loss_contrastive}
UTILITY_KINDS = ("contrastive-ssl", "generative-ssl")


@dataclass(frozen=True)
class EmbedConfig:
    lambda_wm: float = 1.0
    wm_loss_kind: str = "contrastive"
    utility_kind: str = "contrastive-ssl"
    optimizer: str = "sgd"
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    utility_batch: int = 128
    wm_batch: int = 64
    epochs: int = 30
    temperature: float = 0.5
    # measure watermark embeddings from the clean batch's mean embedding
    center_wm: bool = False
    # lambda_wm is 0 for the first wm_delay_epochs, then ramps linearly to
    # its full value over wm_warmup_epochs
    wm_delay_epochs: int = 0
    wm_warmup_epochs: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lambda_wm < 0:
            raise ConfigurationError("lambda_wm must be >= 0")
        if self.wm_loss_kind not in WM_LOSSES:
            raise ConfigurationError(f"wm_loss_kind must be one of {sorted(WM_LOSSES)}")
        if self.utility_kind not in UTILITY_KINDS:
            raise ConfigurationError(f"utility_kind must be one of {UTILITY_KINDS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError("optimizer must be 'sgd' or 'adam'")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")
        if self.utility_batch < 2 or self.wm_batch < 2:
            raise ConfigurationError("batch sizes must be >= 2 for pairwise losses")
        if self.wm_delay_epochs < 0 or self.wm_warmup_epochs < 0:
            raise ConfigurationError("wm_delay_epochs and wm_warmup_epochs must be >= 0")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ConfigurationError("epochs must be >= 0 and learning_rate > 0")

    def to_dict(self):
        return asdict(self)


def _ramp(t, config):
    t = t - config.wm_delay_epochs
    if t < 0:
        return 0.0
    return 1.0 if t >= config.wm_warmup_epochs else t / config.wm_warmup_epochs


def _cycle_batches(n, batch, rng):
    """Endless stream of index batches over a reshuffled permutation."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch + 1, batch):
            yield perm[i:i + batch]
        if n < batch:
            yield perm


def embed_watermark(
    encoder: EncoderHandle,
    train_corpus: Corpus,
    shadow: ShadowDataset,
    pattern: WatermarkPattern,
    config: EmbedConfig,
    log_fn=None,
):
    """Train a copy of ``encoder`` on ``utility + lambda_wm * wm``.

    Each step takes one utility batch from ``train_corpus`` and one shadow
    batch stamped with ``pattern`` for the watermark term. Returns the new
    handle and a per-epoch log; the input handle is left untouched.
    """
    if len(train_corpus) == 0 or len(shadow) < 2:
        raise ConfigurationError("training corpus must be non-empty and the shadow set hold >= 2 samples")
    handle = encoder.copy()
    net = handle.module
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    decoder = None
    params = list(net.parameters())
    if config.utility_kind == "generative-ssl":
        decoder = ConvDecoder(handle.embed_dim, image_size=handle.input_shape[-1])
        params += list(decoder.parameters())
    if config.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    else:
        opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay)

    ub = min(config.utility_batch, len(train_corpus))
    steps_per_epoch = max(1, len(train_corpus) // ub)
    total_steps = max(1, steps_per_epoch * config.epochs)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total_steps) / total_steps)))

    wm_fn = WM_LOSSES[config.wm_loss_kind]
    train_images = torch.from_numpy(train_corpus.images)
    shadow_stream = _cycle_batches(len(shadow), min(config.wm_batch, len(shadow)), rng)

    log = []
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        net.train()
        if decoder is not None:
            decoder.train()
        perm = rng.permutation(len(train_corpus))
        sums = {"utility": 0.0, "wm": 0.0, "total": 0.0}
        for step in range(steps_per_epoch):
            x = train_images[perm[step * ub:(step + 1) * ub]]
            wm_idx = next(shadow_stream)
            x_wm = torch.from_numpy(stamp_images(shadow.images[wm_idx], pattern))

            if decoder is None:
                v1, v2 = simclr_augment(x, gen), simclr_augment(x, gen)
                z = net(torch.cat([v1, v2, x_wm]))
                z1, z2, z_wm = z[:len(x)], z[len(x):2 * len(x)], z[2 * len(x):]
                z_x = z1
                utility = nt_xent(z1, z2, config.temperature)
            else:
                # masked reconstruction: the clean image is the target
                z = net(torch.cat([random_cell_mask(x, gen), x_wm]))
                z_x, z_wm = z[:len(x)], z[len(x):]
                utility = reconstruction_loss(decoder(z_x), x)
            if config.center_wm:
                # a shared offset would satisfy the cosine term for every input alike
                z_wm = z_wm - z_x.detach().mean(0, keepdim=True)
            wm = wm_fn(z_wm)
            if not (torch.isfinite(utility) and torch.isfinite(wm)):
                raise TrainingFailure("non-finite loss", epoch)
            lam = config.lambda_wm * _ramp(epoch + step / steps_per_epoch, config)
            loss = total_loss(utility, wm, lam)

            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            u, w = float(utility.detach()), float(wm.detach())
            sums["utility"] += u
            sums["wm"] += w
            sums["total"] += u + lam * w

        entry = {"epoch": epoch + 1, **{k: v / steps_per_epoch for k, v in sums.items()}}
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)

    net.eval()
    handle.meta = {
        "epoch": encoder.meta.get("epoch", 0) + config.epochs,
        "seed": config.seed,
        "loss_history": list(encoder.meta.get("loss_history", [])) + log,
        "embed_config": config.to_dict(),
        "pattern_provenance": pattern.provenance if config.lambda_wm > 0 else None,
    }
    return handle, {"epochs": log, "train_seconds": time.perf_counter() - t0}
