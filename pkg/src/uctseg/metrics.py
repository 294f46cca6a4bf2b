"""Per-class F1 (Dice) counting, error maps, and split summaries.

All metrics run on hard label maps. F1 is computed from per-class
TP/FP/FN counts; reports can be pooled across images by summing counts
(micro-average), which is the headline number in the CLI reports, with
per-image rows emitted alongside.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import imagedata
from .errors import DataError


@dataclass(frozen=True)
class DiceReport:
    """Per-class confusion counts and F1 for one image (or a pooled set)."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    f1: np.ndarray
    total_pixels: int

    @property
    def correct_pixels(self) -> int:
        return int(self.tp.sum())


def _f1_from_counts(tp: np.ndarray, fp: np.ndarray, fn: np.ndarray) -> np.ndarray:
    denom = 2 * tp + fp + fn
    f1 = np.ones(len(tp), dtype=np.float64)  # absent from both pred and truth -> 1.0
    present = denom > 0
    f1[present] = 2.0 * tp[present] / denom[present]
    return f1


def dice(predicted: np.ndarray, truth: np.ndarray) -> DiceReport:
    """Per-class F1 = 2TP / (2TP + FP + FN); classes absent from both score 1.0."""
    if predicted.shape != truth.shape:
        raise DataError(
            f"predicted dims {predicted.shape} do not match truth dims {truth.shape}"
        )
    tp = np.zeros(imagedata.NUM_CLASSES, dtype=np.int64)
    fp = np.zeros(imagedata.NUM_CLASSES, dtype=np.int64)
    fn = np.zeros(imagedata.NUM_CLASSES, dtype=np.int64)
    for c in range(imagedata.NUM_CLASSES):
        pred_c = predicted == c
        truth_c = truth == c
        tp[c] = np.count_nonzero(pred_c & truth_c)
        fp[c] = np.count_nonzero(pred_c & ~truth_c)
        fn[c] = np.count_nonzero(~pred_c & truth_c)
    return DiceReport(tp=tp, fp=fp, fn=fn, f1=_f1_from_counts(tp, fp, fn), total_pixels=predicted.size)


def pool_reports(reports: list[DiceReport]) -> DiceReport:
    """Micro-average: sum confusion counts over images, then recompute F1."""
    if not reports:
        raise ValueError("cannot pool an empty report list")
    tp = np.sum([r.tp for r in reports], axis=0)
    fp = np.sum([r.fp for r in reports], axis=0)
    fn = np.sum([r.fn for r in reports], axis=0)
    return DiceReport(
        tp=tp,
        fp=fp,
        fn=fn,
        f1=_f1_from_counts(tp, fp, fn),
        total_pixels=sum(r.total_pixels for r in reports),
    )


def error_map(
    predicted: np.ndarray, truth: np.ndarray, source: np.ndarray
) -> tuple[np.ndarray, int]:
    """Grayscale source with misclassified pixels painted red; returns (rgb, count)."""
    if predicted.shape != truth.shape or source.shape != truth.shape:
        raise DataError(
            f"dims disagree: predicted {predicted.shape}, truth {truth.shape}, "
            f"source {source.shape}"
        )
    gray = np.clip(np.round(source * 255.0), 0, 255).astype(np.uint8)
    rgb = np.stack([gray, gray, gray], axis=-1)
    wrong = predicted != truth
    rgb[wrong] = (255, 0, 0)
    return rgb, int(np.count_nonzero(wrong))


@dataclass(frozen=True)
class SplitDistribution:
    """Mean and unbiased variance of per-class F1 over repeated runs."""

    mean: np.ndarray
    variance: np.ndarray
    run_count: int


def summarize_splits(reports: list[DiceReport]) -> SplitDistribution:
    if len(reports) < 2:
        raise ValueError(f"need at least 2 reports to summarize, got {len(reports)}")
    scores = np.stack([r.f1 for r in reports])  # (runs, classes)
    return SplitDistribution(
        mean=scores.mean(axis=0),
        variance=scores.var(axis=0, ddof=1),
        run_count=len(reports),
    )


def gaussian_density_table(dist: SplitDistribution, num_points: int = 256) -> np.ndarray:
    """Plot-ready table: column 0 is x over [0, 1], then one density column per class.

    Zero variance is floored (sigma 1e-6) so degenerate distributions still render.
    """
    x = np.linspace(0.0, 1.0, num_points)
    table = np.empty((num_points, 1 + imagedata.NUM_CLASSES))
    table[:, 0] = x
    sigma = np.sqrt(np.maximum(dist.variance, 0.0))
    sigma = np.maximum(sigma, 1e-6)
    for c in range(imagedata.NUM_CLASSES):
        z = (x - dist.mean[c]) / sigma[c]
        table[:, 1 + c] = np.exp(-0.5 * z**2) / (sigma[c] * np.sqrt(2.0 * np.pi))
    return table


def write_dice_csv(path, rows: list[tuple[str, DiceReport]]) -> None:
    """One CSV row per (image, class): id, class, TP, FP, FN, F1."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "class", "tp", "fp", "fn", "f1"])
        for image_id, report in rows:
            for c in range(imagedata.NUM_CLASSES):
                writer.writerow(
                    [
                        image_id,
                        imagedata.CLASS_NAMES[c],
                        int(report.tp[c]),
                        int(report.fp[c]),
                        int(report.fn[c]),
                        f"{report.f1[c]:.6f}",
                    ]
                )


def write_summary_json(path, pooled: DiceReport, per_image: list[tuple[str, DiceReport]]) -> None:
    summary = {
        "pooled": {
            imagedata.CLASS_NAMES[c]: {
                "tp": int(pooled.tp[c]),
                "fp": int(pooled.fp[c]),
                "fn": int(pooled.fn[c]),
                "f1": float(pooled.f1[c]),
            }
            for c in range(imagedata.NUM_CLASSES)
        },
        "per_image_f1": {
            image_id: {
                imagedata.CLASS_NAMES[c]: float(report.f1[c])
                for c in range(imagedata.NUM_CLASSES)
            }
            for image_id, report in per_image
        },
        "images": len(per_image),
        "total_pixels": int(pooled.total_pixels),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
