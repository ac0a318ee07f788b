"""Thresholded segmentation metrics and rank-based AUC."""

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, DegenerateError, ShapeError

METRIC_NAMES = ("f1", "jacc", "sen", "spe", "acc", "mcc")


@dataclass(frozen=True)
class HardConfusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return HardConfusion(self.tp + other.tp, self.fp + other.fp,
                             self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class MetricSuite:
    f1: float
    jacc: float
    sen: float
    spe: float
    acc: float
    mcc: float
    degenerate: tuple = field(default=())

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name in METRIC_NAMES}


def _flatten(a):
    return np.asarray(getattr(a, "data", a)).reshape(-1)


def _select(p, y, mask):
    p, y = _flatten(p), _flatten(y)
    if p.shape != y.shape:
        raise ShapeError(f"prediction has {p.size} pixels, ground truth {y.size}")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("ground truth must be binary")
    if mask is not None:
        m = _flatten(mask)
        if m.shape != p.shape:
            raise ShapeError(f"mask has {m.size} pixels, prediction {p.size}")
        keep = m > 0
        p, y = p[keep], y[keep]
    return p, y.astype(bool)


def confusion(p, y, mask=None, threshold=0.5):
    """Count pixels inside ``mask``; a pixel is predicted positive iff ``p >= threshold``."""
    p, y = _select(p, y, mask)
    pred = p >= threshold
    tp = int(np.count_nonzero(pred & y))
    fp = int(np.count_nonzero(pred & ~y))
    fn = int(np.count_nonzero(~pred & y))
    return HardConfusion(tp, fp, fn, int(p.size) - tp - fp - fn)


def metric_suite(c):
    """F1, Jaccard, sensitivity, specificity, accuracy, MCC; 0/0 gives 0 and is flagged."""
    flagged = []

    def ratio(name, num, den):
        if den == 0:
            flagged.append(name)
            return 0.0
        return num / den

    tp, fp, fn, tn = (float(v) for v in (c.tp, c.fp, c.fn, c.tn))
    den = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return MetricSuite(
        f1=ratio("f1", 2 * tp, 2 * tp + fp + fn),
        jacc=ratio("jacc", tp, tp + fp + fn),
        sen=ratio("sen", tp, tp + fn),
        spe=ratio("spe", tn, tn + fp),
        acc=ratio("acc", tp + tn, tp + fp + fn + tn),
        mcc=ratio("mcc", tp * tn - fp * fn, den),
        degenerate=tuple(flagged),
    )


def auc(p, y, mask=None):
    """ROC AUC as the Mann-Whitney U statistic; tied scores count one half."""
    p, y = _select(p, y, mask)
    n_pos = int(np.count_nonzero(y))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateError("AUC needs at least one positive and one negative pixel")
    ranks = rankdata(p.astype(np.float64))
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate(preds, labels, masks=None, threshold=0.5, average="micro"):
    """Metric suite plus AUC over a list of images.

    ``micro`` pools every evaluated pixel before computing each metric;
    ``macro`` averages per-image values.
    """
    if average not in ("micro", "macro"):
        raise ValueError(f"average must be 'micro' or 'macro', got {average!r}")
    if masks is None:
        masks = [None] * len(preds)
    if not (len(preds) == len(labels) == len(masks)) or not preds:
        raise ShapeError("preds, labels and masks must be equally long and non-empty")
    if average == "micro":
        total = HardConfusion()
        for p, y, m in zip(preds, labels, masks):
            total = total + confusion(p, y, m, threshold)
        suite = metric_suite(total)
        sel = [_select(p, y, m) for p, y, m in zip(preds, labels, masks)]
        pooled_p = np.concatenate([s[0] for s in sel])
        pooled_y = np.concatenate([s[1] for s in sel])
        result = suite.as_dict()
        result["auc"] = auc(pooled_p, pooled_y)
        return result
    rows = []
    for p, y, m in zip(preds, labels, masks):
        row = metric_suite(confusion(p, y, m, threshold)).as_dict()
        row["auc"] = auc(p, y, m)
        rows.append(row)
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def format_record(dataset, fov, threshold, values):
    """Single machine-readable line: dataset, fov flag, threshold, seven metrics."""
    parts = [f"dataset={dataset}", f"fov={int(bool(fov))}", f"threshold={threshold:g}"]
    parts += [f"{k}={values[k]:.4f}" for k in (*METRIC_NAMES, "auc")]
    return " ".join(parts)


def format_table(values):
    keys = (*METRIC_NAMES, "auc")
    head = " | ".join(f"{k.upper():>6}" for k in keys)
    body = " | ".join(f"{100 * values[k]:6.2f}" for k in keys)
    return f"{head}\n{body}"
