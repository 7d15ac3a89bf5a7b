"""Experiment orchestration: config, staged pipeline, reporting and CLI."""
from .config import ExperimentConfig, derive_seed
from .pipeline import STAGES, Run, build_report, check_integrity, export_embeddings, run_all, strip_timings

__all__ = ["ExperimentConfig", "derive_seed", "STAGES", "Run", "build_report", "check_integrity",
           "export_embeddings", "run_all", "strip_timings"]
