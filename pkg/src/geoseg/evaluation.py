"""Binarization, FOV-restricted confusion counts, scores, curves and overlays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt, maximum_filter
from skimage.morphology import skeletonize


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class MetricsReport:
    f1: float
    acc: float
    sens: float
    spec: float
    prec: float
    counts: ConfusionCounts
    degenerate: list = field(default_factory=list)  # metrics hit by a zero denominator
    auc_roc: float | None = None
    roc_curve: np.ndarray | None = None  # (threshold, fpr, tpr)
    pr_curve: np.ndarray | None = None  # (threshold, recall, precision)

    def as_rows(self):
        rows = [("f1", self.f1), ("acc", self.acc), ("sens", self.sens),
                ("spec", self.spec), ("prec", self.prec)]
        if self.auc_roc is not None:
            rows.append(("auc", self.auc_roc))
        c = self.counts
        rows += [("tp", c.tp), ("tn", c.tn), ("fp", c.fp), ("fn", c.fn)]
        return rows


def binarize(Y, threshold):
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return np.asarray(Y) >= threshold


def _fov(fov, shape):
    return np.ones(shape, dtype=bool) if fov is None else np.asarray(fov).astype(bool)


def confusion(pred, gt, fov=None):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    fov = _fov(fov, gt.shape)
    if not (pred.shape == gt.shape == fov.shape):
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, fov {fov.shape}")
    p, g = pred[fov], gt[fov]
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, int(p.size) - tp - fp - fn, fp, fn)


def _ratio(num, den, name, flags):
    # vacuous 1.0 when nothing was asked of the metric, 0.0 when only the numerator is empty
    if den == 0:
        flags.append(name)
        return 1.0 if num == 0 else 0.0
    return num / den


def metrics(counts):
    c = counts
    flags = []
    return MetricsReport(
        f1=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f1", flags),
        acc=_ratio(c.tp + c.tn, c.total, "acc", flags),
        sens=_ratio(c.tp, c.tp + c.fn, "sens", flags),
        spec=_ratio(c.tn, c.tn + c.fp, "spec", flags),
        prec=_ratio(c.tp, c.tp + c.fp, "prec", flags),
        counts=c,
        degenerate=flags,
    )


def _scores_labels(Y, gt, fov):
    if isinstance(Y, (list, tuple)):
        parts = [_scores_labels(y, g, f) for y, g, f in
                 zip(Y, gt, fov if fov is not None else [None] * len(Y))]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
    Y = np.asarray(Y, dtype=np.float64)
    gt = np.asarray(gt).astype(bool)
    m = _fov(fov, gt.shape)
    return Y[m], gt[m]


def curves(Y, gt, fov=None, n_thresholds=None):
    """ROC and PR samples plus trapezoidal ROC AUC.

    Thresholds are every distinct score (default) or ``n_thresholds``
    uniform values in [0, 1].  A pixel is positive when score >= threshold.
    ``Y``/``gt``/``fov`` may also be lists of per-image maps.
    Returns ``(roc, pr, auc)`` with ``roc`` rows ``(threshold, fpr, tpr)``
    and ``pr`` rows ``(threshold, recall, precision)``, thresholds descending.
    """
    s, g = _scores_labels(Y, gt, fov)
    n_pos = int(g.sum())
    n_neg = int(g.size - n_pos)
    if n_thresholds is None:
        order = np.argsort(-s, kind="stable")
        s_sorted, g_sorted = s[order], g[order]
        tp_cum = np.cumsum(g_sorted)
        fp_cum = np.cumsum(~g_sorted)
        last = np.r_[np.nonzero(np.diff(s_sorted))[0], s.size - 1] if s.size else np.array([], int)
        thr, tp, fp = s_sorted[last], tp_cum[last], fp_cum[last]
    else:
        if n_thresholds < 2:
            raise ValueError("need at least two thresholds")
        thr = np.linspace(1.0, 0.0, n_thresholds)
        tp = np.array([np.count_nonzero(g & (s >= t)) for t in thr])
        fp = np.array([np.count_nonzero(~g & (s >= t)) for t in thr])
    tpr = tp / n_pos if n_pos else np.ones(len(thr))
    fpr = fp / n_neg if n_neg else np.ones(len(thr))
    x = np.r_[0.0, fpr, 1.0]
    y = np.r_[0.0, tpr, 1.0]
    auc = float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 1.0)
    roc = np.column_stack([thr, fpr, tpr])
    pr = np.column_stack([thr, tpr, prec])
    return roc, pr, auc


def evaluate(Y, gt, fov=None, threshold=0.5, with_curves=False, n_thresholds=None):
    """Metrics at ``threshold`` over one image or lists of images (counts pooled)."""
    if isinstance(Y, (list, tuple)):
        fovs = fov if fov is not None else [None] * len(Y)
        counts = ConfusionCounts()
        for y, g, f in zip(Y, gt, fovs):
            counts = counts + confusion(binarize(y, threshold), g, f)
    else:
        counts = confusion(binarize(Y, threshold), gt, fov)
    report = metrics(counts)
    if with_curves:
        report.roc_curve, report.pr_curve, report.auc_roc = curves(Y, gt, fov, n_thresholds)
    return report


def select_threshold(Y, gt, fov=None, grid=None):
    """Threshold on a 0.01 grid that maximizes pooled F1 (first maximum wins)."""
    grid = np.round(np.arange(0.01, 1.0, 0.01), 2) if grid is None else grid
    s, g = _scores_labels(Y, gt, fov)
    best_t, best = float(grid[0]), -1.0
    for t in grid:
        p = s >= t
        tp = np.count_nonzero(p & g)
        den = 2 * tp + np.count_nonzero(p & ~g) + np.count_nonzero(~p & g)
        f1 = 2 * tp / den if den else 1.0
        if f1 > best:
            best_t, best = float(t), f1
    return best_t


# -- thin vessels -----------------------------------------------------------

def vessel_width(gt):
    """Local vessel width per vessel pixel: twice the distance-transform value at the nearest skeleton point."""
    gt = np.asarray(gt).astype(bool)
    width = np.zeros(gt.shape)
    if not gt.any():
        return width
    dist = distance_transform_edt(gt)
    skel = skeletonize(gt)
    _, (ri, ci) = distance_transform_edt(~skel, return_indices=True)
    width[gt] = np.round(2.0 * dist[ri[gt], ci[gt]])
    return width


def thin_thick_split(gt, min_thick=3):
    gt = np.asarray(gt).astype(bool)
    w = vessel_width(gt)
    thin = gt & (w < min_thick)
    return thin, gt & ~thin


@dataclass
class ThinVesselReport:
    tp_pred: int  # predictions within range of a thin vessel
    fp: int
    tp_gt: int  # thin vessel pixels with a prediction in range
    fn: int
    tn: int
    spec: float
    prec: float
    sens: float


def _near(mask, search_range):
    return maximum_filter(mask.astype(np.uint8), size=2 * search_range + 1, mode="constant") > 0


def thin_vessel_metrics(pred, gt_thin, search_range=5, fov=None, ignore=None):
    """Range-tolerant matching against thin ground truth.

    Every thin vessel pixel claims a square window of radius ``search_range``
    (Chebyshev distance).  Predicted positives inside any window are matched;
    those outside all windows are false positives.  A thin pixel with no
    prediction inside its window is a miss.  Negatives outside all windows
    are true negatives.  ``ignore`` (e.g. thick vessels) is dropped from the
    evaluated region.
    """
    pred = np.asarray(pred).astype(bool)
    thin = np.asarray(gt_thin).astype(bool)
    region = _fov(fov, thin.shape).copy()
    if ignore is not None:
        region &= ~(np.asarray(ignore).astype(bool) & ~thin)
    pred = pred & region
    near = _near(thin, search_range)
    tp_pred = int(np.count_nonzero(pred & near))
    fp = int(np.count_nonzero(pred & ~near))
    tn = int(np.count_nonzero(region & ~pred & ~near))
    hit = _near(pred, search_range)
    tp_gt = int(np.count_nonzero(thin & region & hit))
    fn = int(np.count_nonzero(thin & region & ~hit))
    flags = []
    return ThinVesselReport(
        tp_pred, fp, tp_gt, fn, tn,
        spec=_ratio(tn, tn + fp, "spec", flags),
        prec=_ratio(tp_pred, tp_pred + fp, "prec", flags),
        sens=_ratio(tp_gt, tp_gt + fn, "sens", flags),
    )


def thin_vessel_auc(Y, gt_thin, search_range=5, fov=None, ignore=None, n_thresholds=101):
    """Trapezoidal AUC of (1 - spec, sens) under range-tolerant matching."""
    pts = []
    for t in np.linspace(1.0, 0.0, n_thresholds):
        r = thin_vessel_metrics(np.asarray(Y) >= t, gt_thin, search_range, fov, ignore)
        pts.append((1.0 - r.spec, r.sens))
    pts = np.array([(0.0, 0.0)] + pts + [(1.0, 1.0)])
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


# -- overlay ----------------------------------------------------------------

OVERLAY_COLORS = {
    "tp": (255, 255, 255),
    "fn": (0, 255, 0),
    "fp": (255, 0, 0),
    "tn": (0, 0, 0),
    "outside": (96, 96, 96),
}


def render_overlay(pred, gt, fov=None):
    """RGB uint8 map: white TP, green FN, red FP, black TN, gray outside the FOV."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    fov = _fov(fov, gt.shape)
    out = np.empty(gt.shape + (3,), dtype=np.uint8)
    out[...] = OVERLAY_COLORS["outside"]
    for key, m in (("tp", pred & gt), ("fn", ~pred & gt), ("fp", pred & ~gt), ("tn", ~pred & ~gt)):
        out[m & fov] = OVERLAY_COLORS[key]
    return out
