"""Alignment-quality metrics and fitting-throughput benchmarking.

Errors are mean point distances normalized by the inter-ocular distance of
the ground truth (reported x100 in formatted output, matching the scale used
in the face-alignment literature). Throughput measures the fit call only:
image decoding and model loading stay outside the clock.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .cascade import CascadeModel, fit
from .errors import EmptyErrors, ZeroIOD
from .pdm import synthesize

__all__ = [
    "EvalReport",
    "normalized_error",
    "ced_curve",
    "evaluate_model",
    "benchmark_fit",
    "format_error_table",
    "format_ced_table",
    "format_timing_summary",
    "DEFAULT_CED_THRESHOLDS",
    "LEFT_EYE_68",
    "RIGHT_EYE_68",
]

# Outer eye-corner indices of the 68-point markup (0-based).
LEFT_EYE_68 = 36
RIGHT_EYE_68 = 45

DEFAULT_CED_THRESHOLDS = tuple(np.round(np.linspace(0.0, 0.10, 21), 6))


@dataclass
class EvalReport:
    """Accuracy and/or timing results over a sample set."""

    per_sample_errors: list | None = None
    mean_error: float | None = None
    ced: list | None = None
    fps: float | None = None
    per_fit_seconds: list | None = None
    per_stage_mean_errors: list | None = None
    sample_ids: list | None = None


def normalized_error(
    pred: np.ndarray,
    gt: np.ndarray,
    left_eye_index: int = LEFT_EYE_68,
    right_eye_index: int = RIGHT_EYE_68,
) -> float:
    """Mean point distance over the ground-truth inter-ocular distance.

    Raises:
        ZeroIOD: the two reference landmarks coincide.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    n = gt.shape[0]
    if left_eye_index == right_eye_index or not (0 <= left_eye_index < n and 0 <= right_eye_index < n):
        raise ValueError("eye indices must be distinct and in range")
    iod = float(np.linalg.norm(gt[left_eye_index] - gt[right_eye_index]))
    if iod <= 0.0:
        raise ZeroIOD("inter-ocular reference points coincide")
    return float(np.mean(np.linalg.norm(pred - gt, axis=1))) / iod


def ced_curve(errors, thresholds) -> list[tuple[float, float]]:
    """Cumulative error distribution: fraction of errors <= each threshold."""
    errors = np.asarray(list(errors), dtype=float)
    if errors.size == 0:
        raise EmptyErrors("cannot build a distribution from zero errors")
    thresholds = list(thresholds)
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    return [(float(t), float(np.mean(errors <= t))) for t in thresholds]


def evaluate_model(
    model: CascadeModel,
    samples,
    left_eye_index: int = LEFT_EYE_68,
    right_eye_index: int = RIGHT_EYE_68,
    thresholds=DEFAULT_CED_THRESHOLDS,
    constrain: bool | None = None,
    per_stage: bool = False,
) -> EvalReport:
    """Fit every sample and collect normalized errors and the CED."""
    errors, ids = [], []
    stage_sums = None
    for sample in samples:
        result = fit(model, sample.image, sample.bbox, trace=per_stage, constrain=constrain)
        errors.append(
            normalized_error(result.shape, sample.gt_shape, left_eye_index, right_eye_index)
        )
        ids.append(sample.id)
        if per_stage:
            stage_errors = [
                normalized_error(s, sample.gt_shape, left_eye_index, right_eye_index)
                for s in result.per_stage_shapes
            ]
            if stage_sums is None:
                stage_sums = np.zeros(len(stage_errors))
            stage_sums += stage_errors

    return EvalReport(
        per_sample_errors=errors,
        mean_error=float(np.mean(errors)),
        ced=ced_curve(errors, thresholds),
        per_stage_mean_errors=None if stage_sums is None else list(stage_sums / len(errors)),
        sample_ids=ids,
    )


def benchmark_fit(model: CascadeModel, samples, warmup: int = 3, reps: int = 10) -> EvalReport:
    """Time repeated fit calls per sample with a monotonic clock.

    Runs ``warmup`` discarded fits first, then ``reps`` timed fits per
    sample. FPS is the reciprocal of the median per-fit latency.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    samples = list(samples)
    for sample in samples[: min(len(samples), max(warmup, 0))]:
        fit(model, sample.image, sample.bbox)

    timings = []
    for sample in samples:
        best = []
        for _ in range(reps):
            start = time.perf_counter()
            fit(model, sample.image, sample.bbox)
            best.append(time.perf_counter() - start)
        timings.append(statistics.median(best))

    median = statistics.median(timings)
    return EvalReport(fps=1.0 / median, per_fit_seconds=timings)


def format_error_table(report: EvalReport) -> str:
    """Machine-readable per-sample table; errors shown x100."""
    lines = ["sample\terror_x100"]
    ids = report.sample_ids or [str(i) for i in range(len(report.per_sample_errors))]
    for sid, err in zip(ids, report.per_sample_errors):
        lines.append(f"{sid}\t{100.0 * err:.6f}")
    lines.append(f"mean\t{100.0 * report.mean_error:.6f}")
    return "\n".join(lines)


def format_ced_table(report: EvalReport) -> str:
    lines = ["threshold\tfraction"]
    lines.extend(f"{t:.6f}\t{frac:.6f}" for t, frac in report.ced)
    return "\n".join(lines)


def format_timing_summary(report: EvalReport) -> str:
    """Timing block; every line is '#'-prefixed so stable output can filter it."""
    mean = statistics.mean(report.per_fit_seconds)
    median = statistics.median(report.per_fit_seconds)
    return "\n".join(
        [
            f"# per_fit_median_ms {1000.0 * median:.3f}",
            f"# per_fit_mean_ms {1000.0 * mean:.3f}",
            f"# fps {report.fps:.1f}",
        ]
    )
