"""Per-sample stochastic image augmentations.

Every sample in a batch gets its own crop, flip, color jitter and random
erasure; all draws come from the supplied ``torch.Generator`` so a seeded
run is reproducible.
"""
import math

import torch
import torch.nn.functional as F


def _uniform(n, lo, hi, g):
    return lo + (hi - lo) * torch.rand(n, generator=g)


def random_resized_crop(x, g, scale=(0.35, 1.0), ratio=(3 / 4, 4 / 3), flip_p=0.5):
    n = x.shape[0]
    area = _uniform(n, *scale, g)
    logr = _uniform(n, math.log(ratio[0]), math.log(ratio[1]), g)
    r = torch.exp(logr)
    sx = torch.sqrt(area * r).clamp(max=1.0)
    sy = torch.sqrt(area / r).clamp(max=1.0)
    tx = (2 * torch.rand(n, generator=g) - 1) * (1 - sx)
    ty = (2 * torch.rand(n, generator=g) - 1) * (1 - sy)
    flip = torch.where(torch.rand(n, generator=g) < flip_p, -1.0, 1.0)
    theta = torch.zeros(n, 2, 3)
    theta[:, 0, 0] = sx * flip
    theta[:, 0, 2] = tx
    theta[:, 1, 1] = sy
    theta[:, 1, 2] = ty
    grid = F.affine_grid(theta.to(x.dtype), list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)


def color_jitter(x, g, strength=0.4, p=0.8, gray_p=0.2):
    n = x.shape[0]
    apply = (torch.rand(n, generator=g) < p).to(x.dtype)[:, None, None, None]
    b = _uniform(n, 1 - strength, 1 + strength, g)[:, None, None, None]
    c = _uniform(n, 1 - strength, 1 + strength, g)[:, None, None, None]
    s = _uniform(n, 1 - strength, 1 + strength, g)[:, None, None, None]
    y = x * b
    mean = y.mean(dim=(1, 2, 3), keepdim=True)
    y = (y - mean) * c + mean
    gray = (0.299 * y[:, 0:1] + 0.587 * y[:, 1:2] + 0.114 * y[:, 2:3])
    y = (y - gray) * s + gray
    y = apply * y + (1 - apply) * x
    to_gray = (torch.rand(n, generator=g) < gray_p).to(x.dtype)[:, None, None, None]
    gray = (0.299 * y[:, 0:1] + 0.587 * y[:, 1:2] + 0.114 * y[:, 2:3]).expand_as(y)
    return (to_gray * gray + (1 - to_gray) * y).clamp(0.0, 1.0)


def random_erase(x, g, p=0.9, size=(4, 16)):
    """Overwrite one random rectangle per sample (with probability ``p``) by
    flat color or per-pixel noise."""
    n, _, H, W = x.shape
    apply = torch.rand(n, generator=g) < p
    h = torch.randint(size[0], size[1] + 1, (n,), generator=g)
    w = torch.randint(size[0], size[1] + 1, (n,), generator=g)
    r0 = (torch.rand(n, generator=g) * (H - h + 1)).long()
    c0 = (torch.rand(n, generator=g) * (W - w + 1)).long()
    rows = torch.arange(H)[None, :]
    cols = torch.arange(W)[None, :]
    in_r = (rows >= r0[:, None]) & (rows < (r0 + h)[:, None])
    in_c = (cols >= c0[:, None]) & (cols < (c0 + w)[:, None])
    mask = (in_r[:, :, None] & in_c[:, None, :] & apply[:, None, None])[:, None]
    flat = torch.rand(n, 3, 1, 1, generator=g).expand_as(x)
    noise = torch.rand(x.shape, generator=g)
    use_noise = (torch.rand(n, generator=g) < 0.5)[:, None, None, None]
    fill = torch.where(use_noise, noise, flat).to(x.dtype)
    return torch.where(mask, fill, x)


def random_cell_mask(x, g, cell=8, ratio=0.25):
    """Replace a random ``ratio`` of the ``cell`` x ``cell`` grid cells of every
    sample with flat color or noise (masked-autoencoder style corruption)."""
    n, c, H, W = x.shape
    gh, gw = H // cell, W // cell
    k = max(1, int(round(ratio * gh * gw)))
    scores = torch.rand(n, gh * gw, generator=g)
    chosen = torch.zeros(n, gh * gw, dtype=torch.bool)
    chosen.scatter_(1, scores.argsort(dim=1)[:, :k], True)
    mask = chosen.view(n, 1, gh, 1, gw, 1).expand(n, 1, gh, cell, gw, cell).reshape(n, 1, gh * cell, gw * cell)
    mask = F.pad(mask, (0, W - gw * cell, 0, H - gh * cell))
    flat = torch.rand(n, c, 1, 1, generator=g).expand_as(x)
    noise = torch.rand(x.shape, generator=g)
    use_noise = (torch.rand(n, generator=g) < 0.5)[:, None, None, None]
    fill = torch.where(use_noise, noise, flat).to(x.dtype)
    return torch.where(mask, fill, x)


def simclr_augment(x, g=None):
    return random_erase(color_jitter(random_resized_crop(x, g), g), g)


def transfer_augment(x, g=None):
    """Milder policy for supervised head training: crop/flip and erasing, no color change."""
    return random_erase(random_resized_crop(x, g, scale=(0.6, 1.0)), g)
