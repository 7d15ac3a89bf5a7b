"""Experiment configuration: one JSON document, strictly validated.

All randomness flows from ``master_seed``. A stage-specific seed is the first
four bytes (big-endian) of ``sha256(f"{master_seed}:{stage}")``.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import fields
from pathlib import Path

from ..attacks import FinetuneConfig, PRUNE_SCOPES, PruneConfig
from ..detect import LofConfig
from ..embed import EmbedConfig
from ..errors import ConfigurationError
from ..service import ServeConfig
from ..shadow import ShadowSpec
from ..transfer import HeadConfig
from ..verify import QueryPlan

SCHEMA_VERSION = 1
CORPUS_KINDS = ("objects", "signs", "textures", "blobs")
PRIMARY_CORPUS = "pretrain"


def derive_seed(master_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def _names(cls, exclude=()):
    return {f.name for f in fields(cls)} - set(exclude)


DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "name": "experiment",
    "master_seed": 0,
    "output_dir": None,
    "corpora": {
        "pretrain": {"kind": "objects", "n": 4000},
        "auxiliary": {},
        "tasks": {},
    },
    "pattern": {"information": "owner", "key": "secret", "patch_shape": [8, 8], "anchor": None},
    "shadow": {"sampling_rate": 0.3, "auxiliary_quotas": [], "per_class_balance": True},
    "encoder": {"channels": [32, 64, 128, 128], "embed_dim": 128},
    "embed": {},
    "variants": {"clean": 0.0, "watermarked": 1.0},
    "head": {},
    "verify": {},
    "attack": {
        "variants": ["watermarked"],
        "finetune": {},
        "finetune_epochs": [20],
        "prune_rates": [0.0, 0.3, 0.6, 0.9],
        "prune_scope": "whole-model",
    },
    "detect": {"variants": ["watermarked"], "n_samples": 200, "n_neighbors": 20, "threshold": 1.5},
    "serve": {},
}

# allowed keys per section; None means free-form mapping checked elsewhere
_SECTION_KEYS = {
    "corpora": {"pretrain", "auxiliary", "tasks"},
    "pattern": {"information", "key", "patch_shape", "anchor"},
    "shadow": {"sampling_rate", "auxiliary_quotas", "per_class_balance"},
    "encoder": {"channels", "embed_dim"},
    "embed": _names(EmbedConfig, ("seed", "lambda_wm")),
    "variants": None,
    "head": _names(HeadConfig, ("seed",)),
    "verify": _names(QueryPlan, ("seed", "pattern", "n_classes")),
    "attack": {"variants", "finetune", "finetune_epochs", "prune_rates", "prune_scope"},
    "detect": {"variants", "n_samples", "n_neighbors", "threshold"},
    "serve": _names(ServeConfig, ("checkpoint",)),
}
_CORPUS_KEYS = {"kind", "n", "path", "test_fraction"}


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("variants",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigurationError(f"{where} must be an object")
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _check_corpus(spec, where, labeled_split=False):
    _check_keys(spec, _CORPUS_KEYS, where)
    if ("path" in spec) == ("kind" in spec):
        raise ConfigurationError(f"{where} needs exactly one of 'kind' or 'path'")
    if "kind" in spec:
        if spec["kind"] not in CORPUS_KINDS:
            raise ConfigurationError(f"{where}.kind must be one of {CORPUS_KINDS}")
        if not isinstance(spec.get("n"), int) or spec["n"] < 1:
            raise ConfigurationError(f"{where}.n must be a positive integer")
    if labeled_split and not 0.0 < spec.get("test_fraction", 0.5) < 1.0:
        raise ConfigurationError(f"{where}.test_fraction must lie in (0, 1)")


class ExperimentConfig:
    """Validated view over the raw JSON document."""

    def __init__(self, raw: dict, base_dir=None):
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        if not isinstance(raw, dict):
            raise ConfigurationError("config must be a JSON object")
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {version!r}, expected {SCHEMA_VERSION}")
        _check_keys(raw, DEFAULTS.keys(), "config")
        self.raw = _merge(DEFAULTS, raw)
        try:
            self._validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"invalid config value: {exc}") from None

    # -- construction -------------------------------------------------------
    @classmethod
    def load(cls, path, seed=None, output_dir=None) -> "ExperimentConfig":
        with open(path) as f:
            try:
                raw = json.load(f)
            except ValueError as exc:
                raise ConfigurationError(f"{path}: invalid JSON: {exc}") from None
        if seed is not None:
            raw["master_seed"] = int(seed)
        if output_dir is not None:
            raw["output_dir"] = str(output_dir)
        return cls(raw, Path(path).resolve().parent)

    def to_dict(self):
        return copy.deepcopy(self.raw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def _validate(self):
        r = self.raw
        for section, allowed in _SECTION_KEYS.items():
            if allowed is not None:
                _check_keys(r[section], allowed, section)
        if not isinstance(r["master_seed"], int) or r["master_seed"] < 0:
            raise ConfigurationError("master_seed must be a non-negative integer")
        _check_corpus(r["corpora"]["pretrain"], "corpora.pretrain")
        for name, spec in r["corpora"]["auxiliary"].items():
            if name == PRIMARY_CORPUS:
                raise ConfigurationError(f"auxiliary corpus may not be named '{PRIMARY_CORPUS}'")
            _check_corpus(spec, f"corpora.auxiliary.{name}")
        if not r["corpora"]["tasks"]:
            raise ConfigurationError("corpora.tasks must name at least one downstream task")
        for name, spec in r["corpora"]["tasks"].items():
            _check_corpus(spec, f"corpora.tasks.{name}", labeled_split=True)
        for c, _ in r["shadow"]["auxiliary_quotas"]:
            if c not in r["corpora"]["auxiliary"]:
                raise ConfigurationError(f"shadow quota names unknown auxiliary corpus '{c}'")
        variants = r["variants"]
        if not variants or not all(isinstance(v, (int, float)) and v >= 0 for v in variants.values()):
            raise ConfigurationError("variants must map names to lambda_wm >= 0")
        for v in r["attack"]["variants"] + r["detect"]["variants"]:
            if v not in variants:
                raise ConfigurationError(f"unknown variant '{v}'")
        if r["attack"]["prune_scope"] not in PRUNE_SCOPES:
            raise ConfigurationError(f"attack.prune_scope must be one of {PRUNE_SCOPES}")
        # build every sub-config once so invalid values fail before any run
        self.embed_config("watermarked" if "watermarked" in variants else next(iter(variants)))
        self.head_config("x")
        self.finetune_config("x")
        for rate in r["attack"]["prune_rates"]:
            PruneConfig(rate, r["attack"]["prune_scope"])
        self.lof_config("x")
        self.shadow_spec()
        ServeConfig(**r["serve"])
        QueryPlan(2, None, **r["verify"])

    # -- accessors ----------------------------------------------------------
    @property
    def name(self):
        return self.raw["name"]

    @property
    def master_seed(self):
        return self.raw["master_seed"]

    def seed(self, stage):
        return derive_seed(self.master_seed, stage)

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"] or Path("runs") / self.name)

    @property
    def tasks(self):
        return list(self.raw["corpora"]["tasks"])

    @property
    def variants(self):
        return dict(self.raw["variants"])

    def embed_config(self, variant) -> EmbedConfig:
        return EmbedConfig(**self.raw["embed"], lambda_wm=float(self.raw["variants"][variant]), seed=self.seed("embed"))

    def head_config(self, task) -> HeadConfig:
        return HeadConfig(**self.raw["head"], seed=self.seed(f"head:{task}"))

    def finetune_config(self, task) -> FinetuneConfig:
        return FinetuneConfig(**self.raw["attack"]["finetune"], seed=self.seed(f"finetune:{task}"))

    def lof_config(self, task) -> LofConfig:
        d = self.raw["detect"]
        return LofConfig(d["n_neighbors"], d["threshold"], self.seed(f"detect:{task}"))

    def shadow_spec(self) -> ShadowSpec:
        s = self.raw["shadow"]
        return ShadowSpec(PRIMARY_CORPUS, s["sampling_rate"], tuple(map(tuple, s["auxiliary_quotas"])),
                          s["per_class_balance"], self.seed("shadow"))

    def query_plan(self, task, n_classes, pattern) -> QueryPlan:
        return QueryPlan(n_classes, pattern, **self.raw["verify"], seed=self.seed(f"verify:{task}"))

    def serve_config(self, checkpoint, **overrides) -> ServeConfig:
        return ServeConfig(**{**self.raw["serve"], **overrides}, checkpoint=str(checkpoint))

