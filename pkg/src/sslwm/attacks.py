"""Watermark-removal attacks an adversary might run on a stolen model."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .corpora import DownstreamCorpus, split_corpus
from .errors import CapacityError, ConfigurationError
from .transfer import SuspectModel, evaluate_accuracy

SCOPES = ("head-only", "all-layers")
PRUNE_SCOPES = ("whole-model", "encoder-only")


@dataclass(frozen=True)
class FinetuneConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 5e-4
    momentum: float = 0.9
    train_fraction_of_test: float = 0.3
    epochs: int = 20
    batch_size: int = 64
    # "head-only", "all-layers", or a tuple of parameter-name prefixes such
    # as ("encoder.features.3", "head.")
    scope: Union[str, tuple] = "all-layers"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction_of_test < 1.0:
            raise ConfigurationError("train_fraction_of_test must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if isinstance(self.scope, list):
            object.__setattr__(self, "scope", tuple(self.scope))
        if isinstance(self.scope, str) and self.scope not in SCOPES:
            raise ConfigurationError(f"scope must be one of {SCOPES} or a tuple of parameter prefixes")

    def to_dict(self):
        d = asdict(self)
        if isinstance(d["scope"], tuple):
            d["scope"] = list(d["scope"])
        return d


@dataclass(frozen=True)
class PruneConfig:
    rate: float = 0.0
    scope: str = "whole-model"

    def __post_init__(self):
        if not (0.0 <= self.rate <= 1.0) or math.isnan(self.rate):
            raise ConfigurationError("prune rate must lie in [0, 1]")
        if self.scope not in PRUNE_SCOPES:
            raise ConfigurationError(f"scope must be one of {PRUNE_SCOPES}")

    def to_dict(self):
        return asdict(self)


def _named_parameters(model: SuspectModel):
    for sname, module in model.named_sections().items():
        for name, p in module.named_parameters():
            yield f"{sname}.{name}", p


def _in_finetune_scope(name, scope):
    if scope == "all-layers":
        return True
    if scope == "head-only":
        return name.startswith("head.")
    return any(name.startswith(prefix) for prefix in scope)


def finetune(model: SuspectModel, corpus: DownstreamCorpus, config: FinetuneConfig = FinetuneConfig()):
    """Fine-tune a copy of ``model`` on a seeded 30% slice of the test split.

    Accuracy is traced on the remaining 70% after every epoch (entry 0 is the
    pre-attack accuracy). Returns ``(new_model, trace)``.
    """
    attack_split = split_corpus(corpus.test, 1.0 - config.train_fraction_of_test, config.seed)
    train, held_out = attack_split.train, attack_split.test
    if len(train) == 0:
        raise CapacityError("attack training split is empty")
    attacked = model.copy()
    params = [p for name, p in _named_parameters(attacked) if _in_finetune_scope(name, config.scope)]
    for name, p in _named_parameters(attacked):
        p.requires_grad_(_in_finetune_scope(name, config.scope))
    if not params:
        raise ConfigurationError(f"fine-tuning scope {config.scope!r} selects no parameters")

    trace = [{"epoch": 0, "accuracy": evaluate_accuracy(attacked, held_out) if len(held_out) else None}]
    if config.epochs == 0:
        return attacked, trace
    torch.manual_seed(config.seed)
    opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    images = torch.from_numpy(train.images)
    labels = torch.from_numpy(train.labels)
    net = attacked.module
    for epoch in range(config.epochs):
        net.train()
        perm = torch.from_numpy(rng.permutation(len(train)))
        for i in range(0, len(train), config.batch_size):
            idx = perm[i:i + config.batch_size]
            loss = F.cross_entropy(net(images[idx]), labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        net.eval()
        trace.append({"epoch": epoch + 1, "accuracy": evaluate_accuracy(attacked, held_out) if len(held_out) else None})
    for _, p in _named_parameters(attacked):
        p.requires_grad_(True)
    return attacked, trace


def _is_prunable(name, p):
    # conv and linear weights; biases and GroupNorm affine parameters are 1-d
    return p.dim() >= 2


def prunable_parameters(model: SuspectModel, scope="whole-model"):
    """In-scope weight tensors as ``[(name, param)]`` sorted by name."""
    out = [
        (name, p)
        for name, p in _named_parameters(model)
        if _is_prunable(name, p) and (scope == "whole-model" or name.startswith("encoder."))
    ]
    return sorted(out, key=lambda t: t[0])


def prune(model: SuspectModel, config: PruneConfig) -> SuspectModel:
    """Global magnitude pruning: zero the smallest ``rate`` fraction of in-scope weights.

    Magnitudes are ranked jointly across all in-scope tensors; equal
    magnitudes are ordered by (tensor name, flat index).
    """
    pruned = model.copy()
    tensors = prunable_parameters(pruned, config.scope)
    if not tensors:
        return pruned
    flat = [p.detach().reshape(-1).numpy() for _, p in tensors]
    mags = np.abs(np.concatenate(flat))
    n_zero = int(math.floor(config.rate * mags.size + 1e-9))
    if n_zero == 0:
        return pruned
    # stable sort over name-ordered concatenation realizes the tie-break rule
    order = np.argsort(mags, kind="stable")
    kill = np.zeros(mags.size, dtype=bool)
    kill[order[:n_zero]] = True
    offset = 0
    with torch.no_grad():
        for (_, p), f in zip(tensors, flat):
            m = kill[offset:offset + f.size].reshape(tuple(p.shape))
            p[torch.from_numpy(m)] = 0.0
            offset += f.size
    return pruned


@dataclass
class SweepRow:
    attack: str
    param: object
    accuracy: float
    outlier_index: float
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {"attack": self.attack, "param": self.param, "accuracy": self.accuracy,
                "outlier_index": self.outlier_index, **self.extra}


def robustness_sweep(
    model: SuspectModel,
    corpus: DownstreamCorpus,
    verifier,
    prune_rates: Sequence[float] = (0.0, 0.3, 0.6, 0.9),
    prune_scope="whole-model",
    finetune_config: FinetuneConfig = FinetuneConfig(),
    finetune_epochs: Sequence[int] = (20,),
):
    """Run fine-tuning and pruning attacks and verify each result.

    ``verifier(model)`` must return an object with ``outlier_index``.
    Returns a list of :class:`SweepRow`.
    """
    rows = []
    for epochs in finetune_epochs:
        cfg = FinetuneConfig(**{**finetune_config.to_dict(), "epochs": epochs})
        attacked, trace = finetune(model, corpus, cfg)
        rows.append(SweepRow("finetune", epochs, trace[-1]["accuracy"], float(verifier(attacked).outlier_index),
                             {"scope": cfg.to_dict()["scope"]}))
    for rate in prune_rates:
        attacked = prune(model, PruneConfig(rate, prune_scope))
        rows.append(SweepRow("prune", rate, evaluate_accuracy(attacked, corpus.test),
                             float(verifier(attacked).outlier_index), {"scope": prune_scope}))
    return rows


def save_sweep(rows, path):
    with open(path, "w") as f:
        json.dump([r.to_dict() if isinstance(r, SweepRow) else r for r in rows], f, indent=1)
