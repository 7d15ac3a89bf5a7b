"""Stage-by-stage experiment pipeline.

Layout of a run directory::

    run_config.json
    pattern/   pattern.json
    shadow/    shadow.json
    embed/     <variant>/encoder/ (checkpoint), <variant>/log.json
    transfer/  <variant>/<task>/model/ (checkpoint), metrics.json
    verify/    <variant>/<task>/report.json, transcript.json, timing.json
    attack/    <variant>/<task>/sweep.json
    detect/    <variant>/<task>/detection.json

Every stage directory also holds ``stage.json``: the hashes of its inputs
(upstream ``stage.json`` files and the config) and of every file it wrote,
plus the wall-clock duration.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Optional

import numpy as np

from ..attacks import robustness_sweep, save_sweep
from ..corpora import DownstreamCorpus, load_corpus, split_corpus, synthetic_corpus
from ..detect import detection_report, save_detection
from ..embed import embed_watermark
from ..errors import DataError, DependencyError, IntegrityError
from ..nets import EncoderHandle, load_encoder, save_encoder
from ..shadow import ShadowDataset, build_shadow
from ..transfer import SuspectModel, train_downstream
from ..verify import HttpEndpoint, LocalEndpoint, Transcript, verify_ownership
from ..wm_core import WatermarkPattern, generate_pattern, stamp_images
from .config import PRIMARY_CORPUS, ExperimentConfig

log = logging.getLogger(__name__)

STAGES = ("pattern", "shadow", "embed", "transfer", "verify", "attack", "detect")
UPSTREAM = {
    "pattern": (),
    "shadow": (),
    "embed": ("pattern", "shadow"),
    "transfer": ("embed",),
    "verify": ("pattern", "transfer"),
    "attack": ("pattern", "transfer"),
    "detect": ("pattern", "transfer"),
}
TIMING_SUFFIX = "_seconds"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)


def _load(path):
    with open(path) as f:
        return json.load(f)


class Run:
    """One experiment: a config bound to its output directory."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.root = Path(config.output_dir)
        self._corpora = {}

    # -- data ---------------------------------------------------------------
    def _corpus(self, name, spec):
        if name not in self._corpora:
            if "path" in spec:
                path = Path(spec["path"])
                if not path.is_absolute():
                    path = self.config.base_dir / path
                corpus = load_corpus(path, name)
            else:
                corpus = synthetic_corpus(spec["kind"], spec["n"], self.config.seed(f"corpus:{name}"), name)
            self._corpora[name] = corpus
        return self._corpora[name]

    def pretrain_corpus(self):
        return self._corpus(PRIMARY_CORPUS, self.config.raw["corpora"]["pretrain"])

    def shadow_sources(self):
        sources = {PRIMARY_CORPUS: self.pretrain_corpus()}
        for name, spec in self.config.raw["corpora"]["auxiliary"].items():
            sources[name] = self._corpus(name, spec)
        return sources

    def task(self, name) -> DownstreamCorpus:
        spec = self.config.raw["corpora"]["tasks"][name]
        key = f"task:{name}"
        if key not in self._corpora:
            corpus = self._corpus(name, spec)
            self._corpora[key] = split_corpus(corpus, spec.get("test_fraction", 0.5), self.config.seed(f"split:{name}"))
        return self._corpora[key]

    # -- bookkeeping --------------------------------------------------------
    def stage_dir(self, stage) -> Path:
        return self.root / stage

    def require(self, stage, *parts) -> Path:
        """Path of an upstream artifact, or a DependencyError naming the stage."""
        manifest = self.stage_dir(stage) / "stage.json"
        path = self.stage_dir(stage).joinpath(*parts)
        if not manifest.exists():
            raise DependencyError(stage, str(manifest))
        if not path.exists():
            raise DependencyError(stage, str(path))
        return path

    def _begin(self, stage):
        for up in UPSTREAM[stage]:
            self.require(up)
        self.root.mkdir(parents=True, exist_ok=True)
        _dump(self.config.to_dict(), self.root / "run_config.json")
        self.stage_dir(stage).mkdir(parents=True, exist_ok=True)
        log.info("stage %s: start", stage)
        return time.perf_counter()

    def _finish(self, stage, t0):
        d = self.stage_dir(stage)
        outputs = {
            str(p.relative_to(d)): file_sha256(p)
            for p in sorted(d.rglob("*"))
            if p.is_file() and p.name != "stage.json"
        }
        inputs = {"config": self.config.digest()}
        for up in UPSTREAM[stage]:
            inputs[up] = file_sha256(self.stage_dir(up) / "stage.json")
        manifest = {
            "stage": stage,
            "inputs": inputs,
            "outputs": outputs,
            "master_seed": self.config.master_seed,
            "wall" + TIMING_SUFFIX: time.perf_counter() - t0,
        }
        _dump(manifest, d / "stage.json")
        log.info("stage %s: done in %.1fs", stage, manifest["wall" + TIMING_SUFFIX])
        return manifest

    def pattern(self) -> WatermarkPattern:
        return WatermarkPattern.load(self.require("pattern", "pattern.json"))

    def _select(self, names, wanted):
        if wanted is None:
            return list(names)
        missing = [w for w in wanted if w not in names]
        if missing:
            raise DataError(f"unknown name(s) {missing}; configured: {list(names)}")
        return [n for n in names if n in wanted]

    def model(self, variant, task) -> SuspectModel:
        return SuspectModel.load(self.require("transfer", variant, task, "model"))

    # -- stages -------------------------------------------------------------
    def run_pattern(self):
        t0 = self._begin("pattern")
        p = self.config.raw["pattern"]
        host = (32, 32)  # the toy encoder's input size
        pattern = generate_pattern(p["information"], p["key"].encode(), tuple(p["patch_shape"]),
                                   None if p["anchor"] is None else tuple(p["anchor"]), host)
        pattern.save(self.stage_dir("pattern") / "pattern.json")
        return self._finish("pattern", t0)

    def run_shadow(self):
        t0 = self._begin("shadow")
        shadow = build_shadow(self.config.shadow_spec(), self.shadow_sources())
        shadow.save(self.stage_dir("shadow") / "shadow.json")
        return self._finish("shadow", t0)

    def run_embed(self, variants=None):
        t0 = self._begin("embed")
        pattern = self.pattern()
        shadow = ShadowDataset.load(self.require("shadow", "shadow.json"), self.shadow_sources())
        enc = self.config.raw["encoder"]
        for variant in self._select(self.config.variants, variants):
            init = EncoderHandle.create(self.config.seed("encoder-init"), channels=tuple(enc["channels"]),
                                        embed_dim=enc["embed_dim"])
            cfg = self.config.embed_config(variant)
            handle, info = embed_watermark(init, self.pretrain_corpus(), shadow, pattern, cfg,
                                           log_fn=lambda e, v=variant: log.info("embed %s %s", v, e))
            out = self.stage_dir("embed") / variant
            save_encoder(handle, out / "encoder")
            _dump({"epochs": info["epochs"], "train" + TIMING_SUFFIX: info["train_seconds"],
                   "config": cfg.to_dict()}, out / "log.json")
        return self._finish("embed", t0)

    def run_transfer(self, variants=None, tasks=None):
        t0 = self._begin("transfer")
        for variant in self._select(self.config.variants, variants):
            encoder = load_encoder(self.require("embed", variant, "encoder"))
            for task in self._select(self.config.tasks, tasks):
                start = time.perf_counter()
                model, metrics = train_downstream(encoder, self.task(task), self.config.head_config(task))
                out = self.stage_dir("transfer") / variant / task
                model.save(out / "model")
                metrics["head" + TIMING_SUFFIX] = time.perf_counter() - start
                _dump(metrics, out / "metrics.json")
        return self._finish("transfer", t0)

    def run_verify(self, variants=None, tasks=None, endpoint_url: Optional[str] = None):
        t0 = self._begin("verify")
        pattern = self.pattern()
        for variant in self._select(self.config.variants, variants):
            for task in self._select(self.config.tasks, tasks):
                corpus = self.task(task)
                if endpoint_url:
                    endpoint = HttpEndpoint(endpoint_url)
                else:
                    endpoint = LocalEndpoint(self.model(variant, task))
                plan = self.config.query_plan(task, corpus.n_classes, pattern)
                transcript = Transcript()
                start = time.perf_counter()
                report = verify_ownership(endpoint, corpus.test, plan, transcript)
                elapsed = time.perf_counter() - start
                out = self.stage_dir("verify") / variant / task
                out.mkdir(parents=True, exist_ok=True)
                report.save(out / "report.json")
                transcript.save(out / "transcript.json")
                _dump({"extraction" + TIMING_SUFFIX: elapsed, "endpoint": endpoint_url or "local"}, out / "timing.json")
        return self._finish("verify", t0)

    def run_attack(self, variants=None, tasks=None):
        t0 = self._begin("attack")
        pattern = self.pattern()
        a = self.config.raw["attack"]
        for variant in self._select(a["variants"], variants):
            for task in self._select(self.config.tasks, tasks):
                corpus = self.task(task)
                plan = self.config.query_plan(task, corpus.n_classes, pattern)
                rows = robustness_sweep(
                    self.model(variant, task), corpus,
                    lambda m: verify_ownership(LocalEndpoint(m), corpus.test, plan),
                    prune_rates=a["prune_rates"], prune_scope=a["prune_scope"],
                    finetune_config=self.config.finetune_config(task), finetune_epochs=a["finetune_epochs"],
                )
                out = self.stage_dir("attack") / variant / task
                out.mkdir(parents=True, exist_ok=True)
                save_sweep(rows, out / "sweep.json")
        return self._finish("attack", t0)

    def run_detect(self, variants=None, tasks=None):
        t0 = self._begin("detect")
        pattern = self.pattern()
        d = self.config.raw["detect"]
        for variant in self._select(d["variants"], variants):
            for task in self._select(self.config.tasks, tasks):
                test = self.task(task).test
                lof = self.config.lof_config(task)
                rng = np.random.default_rng(lof.seed)
                n = min(d["n_samples"], len(test) // 2)
                perm = rng.permutation(len(test))
                clean_idx, wm_idx = perm[:n], perm[n:2 * n]
                report = detection_report(self.model(variant, task), test.images[clean_idx],
                                          stamp_images(test.images[wm_idx], pattern), lof,
                                          clean_labels=test.labels[clean_idx])
                out = self.stage_dir("detect") / variant / task
                out.mkdir(parents=True, exist_ok=True)
                save_detection(report, out / "detection.json")
        return self._finish("detect", t0)

    def run_stage(self, stage, **kw):
        fn = getattr(self, f"run_{stage}")
        if stage in ("pattern", "shadow"):
            return fn()
        if stage == "embed":
            return fn(kw.get("variants"))
        if stage == "verify":
            return fn(kw.get("variants"), kw.get("tasks"), kw.get("endpoint_url"))
        return fn(kw.get("variants"), kw.get("tasks"))


def run_all(config: ExperimentConfig, until: Optional[str] = None) -> dict:
    """Run every stage in order (stopping after ``until``) then aggregate."""
    if until is not None and until not in STAGES:
        raise DataError(f"unknown stage '{until}'; stages are {STAGES}")
    run = Run(config)
    for stage in STAGES:
        run.run_stage(stage)
        if stage == until:
            break
    return build_report(run.root)


# --------------------------------------------------------------------------
# reporting

def check_integrity(run_root: Path):
    """Re-hash every file listed in the run's stage manifests."""
    run_root = Path(run_root)
    for stage in STAGES:
        manifest_path = run_root / stage / "stage.json"
        if not manifest_path.exists():
            continue
        manifest = _load(manifest_path)
        for rel, digest in manifest["outputs"].items():
            path = run_root / stage / rel
            if not path.exists():
                raise IntegrityError(f"{path} is listed in {manifest_path} but missing")
            if file_sha256(path) != digest:
                raise IntegrityError(f"{path} does not match the hash recorded in {manifest_path}")
        for up, digest in manifest["inputs"].items():
            if up != "config" and file_sha256(run_root / up / "stage.json") != digest:
                raise IntegrityError(f"stage '{stage}' was built from a different '{up}' stage")


def _run_rows(root: Path):
    cfg = _load(root / "run_config.json")
    name = cfg["name"]
    ssl = cfg["embed"].get("utility_kind", "contrastive-ssl")
    for stage in ("embed", "transfer", "verify"):
        if not (root / stage / "stage.json").exists():
            raise DependencyError(stage, str(root / stage / "stage.json"))
    rows, sweep, detection = [], [], []
    for variant, lam in cfg["variants"].items():
        embed_log = _load(root / "embed" / variant / "log.json")
        for task in cfg["corpora"]["tasks"]:
            metrics = _load(root / "transfer" / variant / task / "metrics.json")
            report = _load(root / "verify" / variant / task / "report.json")
            timing = _load(root / "verify" / variant / task / "timing.json")
            key = {"run": name, "ssl": ssl, "variant": variant, "task": task}
            rows.append({
                **key,
                "lambda_wm": lam,
                "test_accuracy": metrics["test_accuracy"],
                "outlier_index": report["outlier_index"],
                "verdict": report["verdict"],
                "degenerate": report["degenerate"],
                "train" + TIMING_SUFFIX: embed_log["train" + TIMING_SUFFIX],
                "extraction" + TIMING_SUFFIX: timing["extraction" + TIMING_SUFFIX],
            })
            sweep_path = root / "attack" / variant / task / "sweep.json"
            if sweep_path.exists():
                sweep += [{**key, **r} for r in _load(sweep_path)]
            det_path = root / "detect" / variant / task / "detection.json"
            if det_path.exists():
                det = _load(det_path)
                det.pop("lof", None)
                detection.append({**key, **det})
    return rows, sweep, detection


def _write_csv(rows, path):
    fields = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def build_report(out_dir, write=True) -> dict:
    """Aggregate every run under ``out_dir`` into report.json and CSV files."""
    out_dir = Path(out_dir)
    roots = sorted(p.parent for p in out_dir.rglob("run_config.json")) if out_dir.exists() else []
    if not roots:
        raise DataError(f"no runs found under {out_dir}")
    report = {"runs": [], "sweep": [], "detection": []}
    for root in roots:
        check_integrity(root)
        rows, sweep, detection = _run_rows(root)
        report["runs"] += rows
        report["sweep"] += sweep
        report["detection"] += detection
    if write:
        _dump(report, out_dir / "report.json")
        _write_csv(report["runs"], out_dir / "report.csv")
        if report["sweep"]:
            _write_csv(report["sweep"], out_dir / "sweep.csv")
        if report["detection"]:
            _write_csv(report["detection"], out_dir / "detection.csv")
    return report


def strip_timings(obj):
    """Copy of a report with every ``*_seconds`` field removed."""
    if isinstance(obj, dict):
        return {k: strip_timings(v) for k, v in obj.items() if not k.endswith(TIMING_SUFFIX)}
    if isinstance(obj, list):
        return [strip_timings(v) for v in obj]
    return obj


# --------------------------------------------------------------------------

def export_embeddings(encoder: EncoderHandle, samples, out) -> Path:
    """Write one JSON line per sample: domain tag, stamp flag, label, embedding."""
    samples = list(samples)
    if not samples:
        raise DataError("no samples to export")
    emb = encoder.embed(np.stack([s.pixels for s in samples]))
    out = Path(out)
    with open(out, "w") as f:
        for s, z in zip(samples, emb):
            row = {"domain_tag": s.domain_tag, "is_watermarked": bool(s.is_watermarked),
                   "label": s.label, "embedding": [float(v) for v in z]}
            f.write(json.dumps(row) + "\n")
    return out


__all__ = ["Run", "STAGES", "run_all", "build_report", "check_integrity", "strip_timings",
           "export_embeddings", "file_sha256"]
