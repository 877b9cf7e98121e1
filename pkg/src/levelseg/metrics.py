"""Segmentation evaluation: Dice, IoU, weighted coverage, BoundF, Hausdorff."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .maps import edt

DICE_EPS = 1e-7
BOUNDF_TOLERANCES = (1, 2, 3, 4, 5)
CSV_HEADER = ("file", "dice", "iou", "wcov", "boundf", "hausdorff")


@dataclass
class MetricsReport:
    dice: float
    iou: float
    wcov: float
    boundf: float
    hausdorff: float  # -1 when either boundary is empty
    pixel_count: int


@dataclass
class Regions:
    labels: np.ndarray
    count: int
    sizes: np.ndarray  # sizes[k-1] is the pixel count of label k


def _binary(m) -> np.ndarray:
    return np.asarray(m) > 0


def _pair(g, y):
    g, y = _binary(g), _binary(y)
    if g.shape != y.shape:
        raise ValueError(f"dimension mismatch: {g.shape} vs {y.shape}")
    return g, y


def dice_score(g, y, eps: float = DICE_EPS) -> float:
    g, y = _pair(g, y)
    inter = np.count_nonzero(g & y)
    return float(2.0 * inter / (np.count_nonzero(g) + np.count_nonzero(y) + eps))


def iou(g, y) -> float:
    g, y = _pair(g, y)
    union = np.count_nonzero(g | y)
    if union == 0:
        return 1.0
    return np.count_nonzero(g & y) / union


_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def label_components(mask, connectivity: int = 8) -> Regions:
    """Connected components, labelled 1..count in raster order of first pixel."""
    if connectivity not in _STRUCTURES:
        raise ValueError("connectivity must be 4 or 8")
    labels, count = ndimage.label(_binary(mask), structure=_STRUCTURES[connectivity])
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return Regions(labels, int(count), sizes)


def wcov(gt, pred, connectivity: int = 8) -> float:
    """Area-weighted best-match IoU over ground-truth instances."""
    gt, pred = _pair(gt, pred)
    rg = label_components(gt, connectivity)
    if rg.count == 0:
        return 1.0 if not pred.any() else 0.0
    ry = label_components(pred, connectivity)
    if ry.count == 0:
        return 0.0
    # joint histogram of (gt label, pred label) gives every pairwise intersection
    joint = np.zeros((rg.count + 1, ry.count + 1), dtype=np.int64)
    np.add.at(joint, (rg.labels.ravel(), ry.labels.ravel()), 1)
    inter = joint[1:, 1:].astype(np.float64)
    union = rg.sizes[:, None] + ry.sizes[None, :] - inter
    best = (inter / union).max(axis=1)
    return float(np.sum(rg.sizes * best) / rg.sizes.sum())


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour (outside counts as background)."""
    m = _binary(mask)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def boundf(gt, pred, tolerances: Sequence[int] = BOUNDF_TOLERANCES) -> float:
    """Boundary F-measure averaged over distance tolerances 1..5 px."""
    gt, pred = _pair(gt, pred)
    bg, bp = boundary(gt), boundary(pred)
    if not bg.any() and not bp.any():
        return 1.0
    if not bg.any() or not bp.any():
        return 0.0
    d_to_gt = edt(bg)[bp]
    d_to_pred = edt(bp)[bg]
    scores = []
    for d in tolerances:
        precision = np.mean(d_to_gt <= d)
        recall = np.mean(d_to_pred <= d)
        if precision + recall == 0:
            scores.append(0.0)
        else:
            scores.append(2.0 * precision * recall / (precision + recall))
    return float(np.mean(scores))


def hausdorff(gt, pred) -> float:
    """Symmetric Hausdorff distance between boundary pixel sets; -1 if either is empty."""
    gt, pred = _pair(gt, pred)
    bg, bp = boundary(gt), boundary(pred)
    if not bg.any() or not bp.any():
        return -1.0
    return float(max(edt(bg)[bp].max(), edt(bp)[bg].max()))


def evaluate(gt, pred) -> MetricsReport:
    gt, pred = _pair(gt, pred)
    return MetricsReport(
        dice=dice_score(gt, pred),
        iou=iou(gt, pred),
        wcov=wcov(gt, pred),
        boundf=boundf(gt, pred),
        hausdorff=hausdorff(gt, pred),
        pixel_count=int(gt.size),
    )


def mean_report(reports: Iterable[MetricsReport]) -> MetricsReport:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    hd = [r.hausdorff for r in reports if r.hausdorff >= 0]
    return MetricsReport(
        dice=float(np.mean([r.dice for r in reports])),
        iou=float(np.mean([r.iou for r in reports])),
        wcov=float(np.mean([r.wcov for r in reports])),
        boundf=float(np.mean([r.boundf for r in reports])),
        hausdorff=float(np.mean(hd)) if hd else -1.0,
        pixel_count=int(sum(r.pixel_count for r in reports)),
    )


def format_csv(named: Sequence[tuple[str, MetricsReport]]) -> str:
    """Render reports as the metrics CSV, rows sorted by name, plus a MEAN row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    named = sorted(named, key=lambda t: t[0])
    for name, r in named:
        w.writerow(_row(name, r))
    w.writerow(_row("MEAN", mean_report([r for _, r in named])))
    return buf.getvalue()


def _row(name: str, r: MetricsReport):
    return [name] + [f"{v:.6f}" for v in (r.dice, r.iou, r.wcov, r.boundf, r.hausdorff)]


def parse_csv(text: str) -> dict[str, dict[str, float]]:
    rows = list(csv.reader(io.StringIO(text)))
    if tuple(rows[0]) != CSV_HEADER:
        raise ValueError("bad metrics CSV header")
    return {r[0]: dict(zip(CSV_HEADER[1:], map(float, r[1:]))) for r in rows[1:]}

