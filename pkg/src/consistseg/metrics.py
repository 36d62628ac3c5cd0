"""Evaluation machinery: hard IOU, mIOU, mean absolute contour distance,
and segmentation post-processing (largest component + hole filling).

mIOU averages per-class IOU over the structure classes only (background
excluded).  MACD is the symmetric mean of contour-to-contour Euclidean
distances with 4-connectivity boundaries and an exact distance
transform; it is undefined for empty masks and such cases are excluded
from aggregation with a logged count.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from statistics import mean

import numpy as np
from scipy import ndimage

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class MetricError(ValueError):
    pass


@dataclass
class MetricsRow:
    regime: str
    labeled_size: int
    seed: int
    per_class_iou: list[float]
    miou: float
    per_class_macd: list[float | None]


def hard_iou(pred_labels: np.ndarray, true_labels: np.ndarray, cls: int) -> float:
    """|intersection| / |union| for one class; 1.0 if both masks are
    empty, 0.0 if exactly one is."""
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    if pred_labels.shape != true_labels.shape:
        raise MetricError(f"shapes {pred_labels.shape} and {true_labels.shape} differ")
    p = pred_labels == cls
    t = true_labels == cls
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def miou(pred_labels: np.ndarray, true_labels: np.ndarray, n_classes: int) -> float:
    """Mean hard IOU over structure classes 1..n_classes-1."""
    return mean(hard_iou(pred_labels, true_labels, c) for c in range(1, n_classes))


def contour(mask: np.ndarray) -> np.ndarray:
    """Boundary pixels: mask pixels with a 4-neighbour outside the mask or
    lying on the image edge."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_FOUR_CONN, border_value=0)
    return mask & ~interior


def macd(pred_mask: np.ndarray, true_mask: np.ndarray, pixel_size: float = 1.0) -> float:
    """Symmetric mean absolute contour distance in pixel_size units."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    true_mask = np.asarray(true_mask, dtype=bool)
    if pred_mask.shape != true_mask.shape:
        raise MetricError(f"shapes {pred_mask.shape} and {true_mask.shape} differ")
    if not pred_mask.any() or not true_mask.any():
        raise MetricError("MACD is undefined for empty masks")
    cp = contour(pred_mask)
    ct = contour(true_mask)
    dist_to_ct = ndimage.distance_transform_edt(~ct)
    dist_to_cp = ndimage.distance_transform_edt(~cp)
    return float(0.5 * (dist_to_ct[cp].mean() + dist_to_cp[ct].mean()) * pixel_size)


def postprocess(pred_labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Largest-connected-component filtering plus hole filling.

    Per structure class, keep only the largest 4-connected component
    (ties break to the earliest label for determinism); then reassign
    every background region not connected to the image border to its
    most frequent neighbouring class.
    """
    out = np.asarray(pred_labels).copy()
    for cls in range(1, n_classes):
        m = out == cls
        lab, n = ndimage.label(m, structure=_FOUR_CONN)
        if n > 1:
            sizes = ndimage.sum_labels(np.ones_like(lab), lab, index=np.arange(1, n + 1))
            keep = 1 + int(np.argmax(sizes))
            out[m & (lab != keep)] = 0

    bg = out == 0
    lab, n = ndimage.label(bg, structure=_FOUR_CONN)
    border = np.zeros_like(bg)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    border_labels = set(np.unique(lab[border & bg]))
    for comp in range(1, n + 1):
        if comp in border_labels:
            continue
        hole = lab == comp
        ring = ndimage.binary_dilation(hole, structure=_FOUR_CONN) & ~hole
        neigh = out[ring]
        neigh = neigh[neigh != 0]
        if neigh.size == 0:
            continue
        counts = np.bincount(neigh)
        out[hole] = int(np.argmax(counts))
    return out


# -- aggregation -----------------------------------------------------------

def evaluate_prediction(pred_labels: np.ndarray, true_labels: np.ndarray,
                        n_classes: int, pixel_size: float = 1.0
                        ) -> tuple[list[float], list[float | None]]:
    """Per-structure-class IOU and MACD (None where undefined)."""
    ious = [hard_iou(pred_labels, true_labels, c) for c in range(1, n_classes)]
    macds: list[float | None] = []
    for c in range(1, n_classes):
        try:
            macds.append(macd(pred_labels == c, true_labels == c, pixel_size))
        except MetricError:
            macds.append(None)
    return ious, macds


REGIME_ORDER = ("baseline", "suptc", "semitc", "semitc_plus")


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["regime", "labeled_size", "seed", "class", "iou", "macd"])
        for row in rows:
            for ci, (iou, dist) in enumerate(zip(row.per_class_iou, row.per_class_macd)):
                writer.writerow([row.regime, row.labeled_size, row.seed, ci + 1,
                                 repr(iou), "" if dist is None else repr(dist)])


def results_table(rows: list[MetricsRow]):
    """Aggregate mean +/- std (over seeds) of mIOU per (regime, size) cell.

    Returns (cells, regimes, sizes) with cells[(regime, size)] =
    (mean, std, n); missing cells are simply absent.
    """
    if not rows:
        raise MetricError("no metric rows to aggregate")
    groups: dict[tuple[str, int], list[float]] = {}
    for row in rows:
        groups.setdefault((row.regime, row.labeled_size), []).append(row.miou)
    cells = {key: (float(np.mean(v)), float(np.std(v)), len(v)) for key, v in groups.items()}
    regimes = [r for r in REGIME_ORDER if any(k[0] == r for k in cells)]
    regimes += sorted({k[0] for k in cells} - set(regimes))
    sizes = sorted({k[1] for k in cells})
    return cells, regimes, sizes


def write_aggregate_csv(path, rows: list[MetricsRow]) -> list[str]:
    """Table-style CSV (regimes as rows, labeled sizes as columns).

    Returns warnings for cells that had no data."""
    cells, regimes, sizes = results_table(rows)
    warnings = []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["regime", *[f"labeled_{s}" for s in sizes]])
        for regime in regimes:
            out_row = [regime]
            for size in sizes:
                if (regime, size) in cells:
                    m, s, _ = cells[(regime, size)]
                    out_row.append(f"{m:.4f}+/-{s:.4f}")
                else:
                    out_row.append("")
                    warnings.append(f"missing cell: regime={regime} labeled_size={size}")
            writer.writerow(out_row)
    return warnings


def write_plot_data(path, rows: list[MetricsRow]) -> None:
    """Plot-friendly long CSV: regime, labeled_size, mean mIOU, std."""
    cells, regimes, sizes = results_table(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["regime", "labeled_size", "miou_mean", "miou_std", "n_seeds"])
        for regime in regimes:
            for size in sizes:
                if (regime, size) in cells:
                    m, s, n = cells[(regime, size)]
                    writer.writerow([regime, size, repr(m), repr(s), n])
