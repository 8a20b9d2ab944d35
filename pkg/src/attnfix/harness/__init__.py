"""Experiment harness: configuration, metrics, pipeline stages and the CLI."""

from .config import RunConfig, preset
from .metrics import (MetricsReport, StrictCounts, bench_latency, eval_accuracy, eval_asr,
                      eval_detector_strict, eval_uf, pr_curve, strict_counts)
from .pipeline import Run


def run_ablation(cfg: RunConfig) -> MetricsReport:
    """Ablation rows for full, wo_det and wo_rec on an already built run."""
    return Run(cfg).ablate()


def cli_main(argv=None) -> int:
    from .cli import main
    return main(argv)


__all__ = [
    "MetricsReport", "Run", "RunConfig", "StrictCounts", "bench_latency", "cli_main",
    "eval_accuracy", "eval_asr", "eval_detector_strict", "eval_uf", "pr_curve", "preset",
    "run_ablation", "strict_counts",
]
