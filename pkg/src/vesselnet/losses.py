"""BCE, soft-MCC and their weighted sum, all differentiable in the probabilities."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError

BCE_CLAMP = 1e-7
MCC_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    bce: float = 0.5
    mcc: float = 0.5

    def __post_init__(self):
        if self.bce < 0 or self.mcc < 0 or self.bce + self.mcc <= 0:
            raise ConfigError(f"loss weights must be non-negative with a positive sum, got {self}")


@dataclass
class SoftConfusion:
    tp: Tensor
    tn: Tensor
    fp: Tensor
    fn: Tensor


def _check(p, y):
    if not isinstance(y, Tensor):
        y = Tensor(y)
    if p.shape != y.shape:
        raise ShapeError(f"prediction {p.shape} and target {y.shape} differ")
    yd = y.data
    if not np.all((yd == 0) | (yd == 1)):
        raise ContractError("targets must be binary {0, 1}")
    return y


def soft_confusion(p, y):
    """Pooled soft TP/TN/FP/FN over every pixel of the batch."""
    y = _check(p, y)
    tp = ad.sum(p * y)
    fp = ad.sum(p) - tp
    fn = ad.sum(y).item() - tp
    tn = p.size - tp - fp - fn
    return SoftConfusion(tp, tn, fp, fn)


def bce(p, y):
    """Mean binary cross-entropy with ``p`` clamped to ``[1e-7, 1 - 1e-7]``."""
    y = _check(p, y)
    pc = ad.clamp(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = y * ad.log(pc) + (1.0 - y) * ad.log(1.0 - pc)
    return -ad.mean(ll)


def mcc_loss(p, y):
    """``1 - MCC`` of the soft confusion; lies in [0, 2]."""
    c = soft_confusion(p, y)
    num = c.tp * c.tn - c.fp * c.fn
    den = ad.sqrt((c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)) + MCC_EPS
    return 1.0 - num / den


def total_loss(p, y, weights=LossWeights()):
    """``weights.bce * bce + weights.mcc * mcc_loss``; zero-weight terms are skipped."""
    terms = []
    if weights.bce:
        terms.append(weights.bce * bce(p, y))
    if weights.mcc:
        terms.append(weights.mcc * mcc_loss(p, y))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]
