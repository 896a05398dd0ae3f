"""Spacing-aware overlap, volume, surface and centroid metrics.

Conventions:
  * Dice of two empty masks is 1.0; of exactly one empty mask, 0.0.
  * Surface and centroid distances are undefined (``None``) if either mask
    is empty, so they never bias classwise averages.
  * Boundary voxels are mask voxels with at least one 6-connected neighbour
    outside the mask; the volume border counts as outside.
  * VolDiff is signed, prediction minus reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError, DataError

METRIC_NAMES = ("dice", "voldiff_cc", "surfdist_mm", "centroiddist_mm")
TABLE_COLUMNS = ("Dice", "VolDiff (cc)", "SurfDist (mm)", "CentroidDist (mm)")
TSV_COLUMNS = ("Dice", "VolDiff_cc", "SurfDist_mm", "CentroidDist_mm")
_SIX = ndimage.generate_binary_structure(3, 1)


def _pair(pred, ref):
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    if pred.shape != ref.shape:
        raise ContractError(f"mask extents differ: {pred.shape} vs {ref.shape}")
    return pred, ref


def dice(pred_mask, ref_mask) -> float:
    pred, ref = _pair(pred_mask, ref_mask)
    total = int(pred.sum()) + int(ref.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, ref).sum()) / total


def vol_diff_cc(pred_mask, ref_mask, spacing) -> float:
    pred, ref = _pair(pred_mask, ref_mask)
    sz, sy, sx = (float(s) for s in spacing)
    return (int(pred.sum()) - int(ref.sum())) * (sz * sy * sx) / 1000.0


def boundary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    return mask & ~eroded


def _directed_mean(src: np.ndarray, dst: np.ndarray, spacing) -> float:
    # distance from every voxel to the nearest dst-boundary voxel center
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return float(dist[src].mean())


def surf_dist_mm(pred_mask, ref_mask, spacing) -> float | None:
    """Symmetric mean of the two directed boundary-to-boundary mean distances."""
    pred, ref = _pair(pred_mask, ref_mask)
    if not pred.any() or not ref.any():
        return None
    spacing = tuple(float(s) for s in spacing)
    bp, br = boundary(pred), boundary(ref)
    return (_directed_mean(bp, br, spacing) + _directed_mean(br, bp, spacing)) / 2.0


def centroid(mask: np.ndarray, spacing) -> np.ndarray:
    idx = np.argwhere(mask)
    return idx.sum(axis=0) / len(idx) * np.asarray(spacing, dtype=np.float64)


def centroid_dist_mm(pred_mask, ref_mask, spacing) -> float | None:
    pred, ref = _pair(pred_mask, ref_mask)
    if not pred.any() or not ref.any():
        return None
    d = centroid(pred, spacing) - centroid(ref, spacing)
    return float(np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]))


@dataclass
class ClassMetrics:
    dice: float | None = None
    voldiff_cc: float | None = None
    surfdist_mm: float | None = None
    centroiddist_mm: float | None = None

    def values(self) -> tuple:
        return tuple(getattr(self, n) for n in METRIC_NAMES)


@dataclass
class MetricsReport:
    per_class: dict[int, ClassMetrics] = field(default_factory=dict)
    average: ClassMetrics = field(default_factory=ClassMetrics)
    errors: dict[int, str] = field(default_factory=dict)


def _mean_defined(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_case(pred_labels, ref_labels, spacing, num_classes: int) -> MetricsReport:
    """All four metrics for every foreground class 1..num_classes-1."""
    pred = np.asarray(pred_labels)
    ref = np.asarray(ref_labels)
    if pred.shape != ref.shape:
        raise ContractError(f"prediction {pred.shape} and reference {ref.shape} extents differ")
    for name, arr in (("prediction", pred), ("reference", ref)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DataError(f"{name} labels outside [0, {num_classes})")
    report = MetricsReport()
    for c in range(1, num_classes):
        p, r = pred == c, ref == c
        try:
            report.per_class[c] = ClassMetrics(
                dice(p, r),
                vol_diff_cc(p, r, spacing),
                surf_dist_mm(p, r, spacing),
                centroid_dist_mm(p, r, spacing),
            )
        except (ValueError, ContractError) as exc:
            report.per_class[c] = ClassMetrics()
            report.errors[c] = str(exc)
    report.average = ClassMetrics(*(
        _mean_defined(getattr(m, n) for m in report.per_class.values()) for n in METRIC_NAMES))
    return report


# -- multi-case tables ---------------------------------------------------------


@dataclass
class SummaryRow:
    label: str
    mean: tuple
    std: tuple


def summarize(reports: list[MetricsReport], class_names: dict[int, str] | None = None) -> list[SummaryRow]:
    """Mean and population std per class (and classwise average) across cases."""
    class_names = class_names or {}
    classes = sorted({c for r in reports for c in r.per_class})
    rows = []

    def stats(metrics: list[ClassMetrics]):
        means, stds = [], []
        for n in METRIC_NAMES:
            vals = [getattr(m, n) for m in metrics if getattr(m, n) is not None]
            means.append(float(np.mean(vals)) if vals else None)
            stds.append(float(np.std(vals)) if vals else None)
        return tuple(means), tuple(stds)

    for c in classes:
        m, s = stats([r.per_class[c] for r in reports if c in r.per_class])
        rows.append(SummaryRow(class_names.get(c, f"class {c}"), m, s))
    m, s = stats([r.average for r in reports])
    rows.append(SummaryRow("Classwise Average", m, s))
    return rows


def _cell(mean, std) -> str:
    if mean is None:
        return "n/a"
    return f"{mean:.4f} ± {std:.4f}"


def format_text(rows: list[SummaryRow]) -> str:
    width = max([len("Organ class")] + [len(r.label) for r in rows]) + 2
    lines = ["Organ class".ljust(width) + "".join(c.rjust(22) for c in TABLE_COLUMNS)]
    for r in rows:
        lines.append(r.label.ljust(width) + "".join(_cell(m, s).rjust(22) for m, s in zip(r.mean, r.std)))
    return "\n".join(lines) + "\n"


def format_tsv(rows: list[SummaryRow]) -> str:
    """Tab-separated table; each metric cell is ``mean ± std`` (or ``n/a``)."""
    lines = ["\t".join(("class",) + TSV_COLUMNS)]
    for r in rows:
        cells = ["n/a" if m is None else f"{m:.6f} ± {s:.6f}" for m, s in zip(r.mean, r.std)]
        lines.append("\t".join([r.label] + cells))
    return "\n".join(lines) + "\n"
