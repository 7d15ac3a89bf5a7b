"""Watermark losses, SSL utility losses and their combination.

All functions take torch tensors (or array-likes, which are converted) and
return differentiable scalar tensors.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .errors import ArityError, DegenerateInputError, DimensionError


def _as_matrix(embeddings) -> torch.Tensor:
    z = embeddings if torch.is_tensor(embeddings) else torch.as_tensor(embeddings, dtype=torch.float64)
    if z.ndim != 2:
        raise DimensionError(f"expected a (batch, dim) matrix, got shape {tuple(z.shape)}")
    if z.shape[0] < 2:
        raise ArityError(f"need at least 2 embeddings, got {z.shape[0]}")
    return z


def wm_loss_variance(embeddings) -> torch.Tensor:
    """Sum of squared distances of the watermarked embeddings to their batch mean."""
    z = _as_matrix(embeddings)
    return (z - z.mean(dim=0, keepdim=True)).pow(2).sum()


def wm_loss_contrastive(embeddings) -> torch.Tensor:
    """Negative mean pairwise cosine similarity over all unordered pairs."""
    z = _as_matrix(embeddings)
    norms = z.norm(dim=1)
    if bool((norms == 0).any()):
        raise DegenerateInputError("zero-norm embedding in watermark batch")
    u = z / norms[:, None]
    n = z.shape[0]
    # sum_{i<j} <u_i,u_j> = (|sum u|^2 - sum |u_i|^2) / 2
    s = u.sum(dim=0)
    pair_sum = (s @ s - (u * u).sum()) / 2
    return -pair_sum / (n * (n - 1) / 2)


def total_loss(utility, wm, lambda_wm):
    """Utility loss plus the weighted watermark loss."""
    terms = [("utility", utility), ("lambda_wm", lambda_wm)]
    if lambda_wm != 0:
        terms.append(("wm", wm))
    for name, v in terms:
        finite = bool(torch.isfinite(v).all()) if torch.is_tensor(v) else math.isfinite(v)
        if not finite:
            raise DegenerateInputError(f"non-finite {name} term")
    if lambda_wm == 0:
        # the watermark term never reaches the backward pass
        return utility
    return utility + lambda_wm * wm


def nt_xent(z1, z2, temperature=0.5) -> torch.Tensor:
    """Normalized-temperature cross-entropy over two views of a batch.

    For each of the 2N views the positive is the other view of the same
    sample and the negatives are the remaining 2N-2 views.
    """
    if z1.shape != z2.shape:
        raise DimensionError(f"view shapes differ: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    n = z1.shape[0]
    if n < 2:
        raise ArityError(f"contrastive loss needs batch size >= 2, got {n}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = F.normalize(torch.cat([z1, z2]), dim=1)
    logits = z @ z.T / temperature
    eye = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(eye, float("-inf"))
    target = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(z.device)
    return F.cross_entropy(logits, target)


def reconstruction_loss(recon, target) -> torch.Tensor:
    if recon.shape != target.shape:
        raise DimensionError(f"reconstruction shape {tuple(recon.shape)} != input {tuple(target.shape)}")
    return F.mse_loss(recon, target)


def utility_loss_contrastive(batch, encoder, temperature=0.5, augment=None, generator=None):
    """SimCLR-style utility loss: encode two random augmentations of ``batch``."""
    from .augment import simclr_augment

    if batch.shape[0] < 2:
        raise ArityError(f"contrastive utility loss needs batch size >= 2, got {batch.shape[0]}")
    augment = augment or simclr_augment
    v1 = augment(batch, generator)
    v2 = augment(batch, generator)
    z = encoder(torch.cat([v1, v2]))
    z1, z2 = z.chunk(2)
    return nt_xent(z1, z2, temperature)


def utility_loss_generative(batch, encoder, decoder, corrupt=None, generator=None):
    """Autoencoding utility loss: MSE between ``decoder(encoder(x))`` and ``x``.

    With ``corrupt`` the encoder sees ``corrupt(x, generator)`` while the
    target stays the clean batch (masked reconstruction).
    """
    inputs = batch if corrupt is None else corrupt(batch, generator)
    return reconstruction_loss(decoder(encoder(inputs)), batch)
