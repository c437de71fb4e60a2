"""Evaluation measures: region-agreement scoring for membrane-style
segmentations, and FOV-masked pixel statistics (sensitivity, specificity,
accuracy, AUC) for vessel-style probability maps.

Conventions: probability maps hold P(class 1); thresholding uses >=;
segment id 0 is reserved for boundary/background and region scoring is
restricted to pixels whose ground-truth id is positive.
"""

from collections import deque
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy.stats import rankdata

from acenet.errors import DataError


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class RocPoint:
    threshold: float
    tpr: float
    fpr: float


# ------------------------------------------------------------ components

_OFFSETS_4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_OFFSETS_8 = _OFFSETS_4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


def connected_components(binary, connectivity: int = 4) -> np.ndarray:
    """Label foreground components of a binary map by breadth-first search.

    Ids are assigned in raster-scan discovery order starting at 1;
    background stays 0.  Deterministic by construction.
    """
    if connectivity not in (4, 8):
        raise DataError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.asarray(binary) != 0
    h, w = mask.shape
    offsets = _OFFSETS_4 if connectivity == 4 else _OFFSETS_8
    labels = np.zeros((h, w), dtype=np.int64)
    next_id = 1
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or labels[r, c]:
                continue
            labels[r, c] = next_id
            queue = deque([(r, c)])
            while queue:
                y, x = queue.popleft()
                for dy, dx in offsets:
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = next_id
                        queue.append((ny, nx))
            next_id += 1
    return labels


# ----------------------------------------------------------- region score

def vrand(pred, gt) -> float:
    """Foreground-restricted region-agreement F-score.

    Over pixels with gt id > 0, with joint overlap counts
    c_ij = |pred_i ∩ gt_j| and marginals s_i, t_j, returns
    2 * sum c_ij^2 / (sum s_i^2 + sum t_j^2); the overall pixel count
    cancels, and keeping raw counts makes self-agreement exactly 1.0.
    A predicted id of 0 on foreground pixels counts as a bin of its own.
    Invariant under relabeling of ids on either side.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"pred and gt shapes disagree: {pred.shape} vs {gt.shape}")
    fg = gt > 0
    n = int(fg.sum())
    if n == 0:
        raise DataError("ground truth has no foreground pixels; region score undefined")
    p = pred[fg].ravel()
    g = gt[fg].ravel()
    _, p_idx = np.unique(p, return_inverse=True)
    _, g_idx = np.unique(g, return_inverse=True)
    joint = np.zeros((p_idx.max() + 1, g_idx.max() + 1), dtype=np.float64)
    np.add.at(joint, (p_idx, g_idx), 1.0)
    s = joint.sum(axis=1)
    t = joint.sum(axis=0)
    return float(2.0 * (joint ** 2).sum() / ((s ** 2).sum() + (t ** 2).sum()))


# ----------------------------------------------------------- pixel stats

def _check_fov(prob, gt, fov):
    prob = np.asarray(prob, dtype=np.float64)
    gt = np.asarray(gt) != 0
    if fov is None:
        fov = np.ones(gt.shape, dtype=bool)
    else:
        fov = np.asarray(fov, dtype=bool)
    if not (prob.shape == gt.shape == fov.shape):
        raise DataError(f"prob/gt/fov shapes disagree: {prob.shape}, {gt.shape}, {fov.shape}")
    if not fov.any():
        raise DataError("FOV mask is empty")
    return prob[fov], gt[fov]


def pixel_metrics(prob, gt, fov, threshold: float):
    """Threshold at >= and count inside the FOV.

    Returns (ConfusionCounts, sensitivity, specificity, accuracy); a rate
    whose denominator is zero is None, never silently 0.
    """
    p, g = _check_fov(prob, gt, fov)
    pred = p >= threshold
    tp = int(np.sum(pred & g))
    fp = int(np.sum(pred & ~g))
    fn = int(np.sum(~pred & g))
    tn = int(np.sum(~pred & ~g))
    counts = ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)
    sens = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    acc = (tp + tn) / counts.total
    return counts, sens, spec, acc


def auc(prob, gt, fov=None) -> float:
    """Exact rank-statistic area under the ROC curve inside the FOV.

    Equals (number of (positive, negative) pairs ranked correctly, ties
    counting half) / (P * N), which is also the trapezoidal area under
    roc_curve's sweep.
    """
    p, g = _check_fov(prob, gt, fov)
    pos = int(g.sum())
    neg = g.size - pos
    if pos == 0 or neg == 0:
        raise DataError("AUC needs both classes inside the FOV")
    ranks = rankdata(p)
    return float((ranks[g].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


def roc_curve(prob, gt, fov=None) -> List[RocPoint]:
    """Full threshold sweep grouped by distinct scores.

    The first point sits above every score (tpr = fpr = 0); each later
    point is the operating point at threshold = one distinct score value,
    descending, ending at (1, 1).  tpr and fpr are non-decreasing along
    the sweep.
    """
    p, g = _check_fov(prob, gt, fov)
    pos = int(g.sum())
    neg = g.size - pos
    if pos == 0 or neg == 0:
        raise DataError("ROC needs both classes inside the FOV")
    order = np.argsort(-p, kind="stable")
    p_sorted = p[order]
    g_sorted = g[order]
    tp_cum = np.cumsum(g_sorted)
    fp_cum = np.cumsum(~g_sorted)
    # keep only the last index of each run of equal scores
    last = np.nonzero(np.diff(p_sorted))[0]
    idx = np.concatenate([last, [p.size - 1]])
    points = [RocPoint(threshold=float("inf"), tpr=0.0, fpr=0.0)]
    for i in idx:
        points.append(RocPoint(threshold=float(p_sorted[i]),
                               tpr=float(tp_cum[i] / pos),
                               fpr=float(fp_cum[i] / neg)))
    return points


def trapezoid_area(points: List[RocPoint]) -> float:
    area = 0.0
    for a, b in zip(points, points[1:]):
        area += (b.fpr - a.fpr) * (b.tpr + a.tpr) / 2.0
    return area


# -------------------------------------------------------------- overlay

def overlay(pred, gt, base) -> np.ndarray:
    """Error-coloring of a binary prediction over its ground truth:
    correct foreground white, missed foreground red, false foreground
    blue, everything else the grayscale base image.  Returns a [3,H,W]
    float array in [0,1]."""
    pred = np.asarray(pred) != 0
    gt = np.asarray(gt) != 0
    base = np.asarray(base, dtype=np.float64)
    if base.ndim == 4:
        base = base[0]
    if base.ndim == 3:
        base = base.mean(axis=0)
    if not (pred.shape == gt.shape == base.shape):
        raise DataError(f"overlay shapes disagree: {pred.shape}, {gt.shape}, {base.shape}")
    rgb = np.repeat(np.clip(base, 0.0, 1.0)[None], 3, axis=0)
    tp = pred & gt
    fn = ~pred & gt
    fp = pred & ~gt
    for ch in range(3):
        rgb[ch][tp] = 1.0
    rgb[0][fn], rgb[1][fn], rgb[2][fn] = 1.0, 0.0, 0.0
    rgb[0][fp], rgb[1][fp], rgb[2][fp] = 0.0, 0.0, 1.0
    return rgb


# -------------------------------------------------------------- reports

def metrics_line(values: dict) -> str:
    """Single-line key=value record, machine-greppable."""
    return " ".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}"
                    for k, v in values.items())


def metrics_table(values: dict) -> str:
    width = max(len(k) for k in values)
    rows = []
    for k, v in values.items():
        shown = f"{v:.6f}" if isinstance(v, float) else str(v)
        rows.append(f"{k:<{width}}  {shown}")
    return "\n".join(rows)
