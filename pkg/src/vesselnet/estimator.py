"""scikit-learn style wrapper around the training and inference engine."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import checkpoint
from .autodiff import Tensor, no_grad
from .data import Sample, crop_back, pad, pad_array, split_validation
from .errors import ShapeError
from .losses import LossWeights
from .metrics import confusion, metric_suite
from .model import ModelConfig, forward
from .ops import DropBlockConfig
from .rng import Rng
from .trainer import TrainPlan, train


def check_images(X, in_channels=3):
    """Validate an image batch and return it as float32 ``(n, c, h, w)``.

    A single ``(c, h, w)`` image is promoted to a batch of one.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != in_channels:
        raise ShapeError(f"expected images shaped (n, {in_channels}, h, w), got {X.shape}")
    return X


def check_masks(y, X):
    """Validate binary masks against ``X``; returns float32 ``(n, 1, h, w)``."""
    y = check_array(y, allow_nd=True, ensure_2d=False, dtype=np.float32)
    if y.ndim == 3:
        y = y[:, None]
    if y.shape != (X.shape[0], 1, *X.shape[2:]):
        raise ShapeError(f"masks {y.shape} do not match images {X.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("masks must be binary")
    return y


def _ceil8(n):
    return -(-n // 8) * 8


class VesselSegmenter(ClassifierMixin, BaseEstimator):
    """Pixel-wise vessel classifier.

    ``fit`` takes images ``(n, 3, h, w)`` in [0, 1] and binary masks
    ``(n, h, w)``; any spatial size works, inputs are zero-padded to a
    multiple of 8 and predictions cropped back.
    """

    def __init__(self, channels=(16, 32, 48, 64), skip_attention="csa", bottleneck_attention=True,
                 activation="silu", drop_rate=0.15, block_size=7, lambda_bce=0.5, lambda_mcc=0.5,
                 learning_rate=1e-3, max_epochs=150, patience=20, batch_size=8,
                 validation_fraction=0.1, threshold=0.5, random_state=0):
        self.channels = channels
        self.skip_attention = skip_attention
        self.bottleneck_attention = bottleneck_attention
        self.activation = activation
        self.drop_rate = drop_rate
        self.block_size = block_size
        self.lambda_bce = lambda_bce
        self.lambda_mcc = lambda_mcc
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.random_state = random_state

    def _config(self):
        return ModelConfig(channels=tuple(self.channels), skip_attention=self.skip_attention,
                           bottleneck_attention=self.bottleneck_attention, activation=self.activation,
                           dropblock=DropBlockConfig(self.drop_rate, self.block_size))

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        size = X.shape[2:]
        canvas = (_ceil8(size[0]), _ceil8(size[1]))
        samples = [pad(Sample(x, m, None, f"img{i:04d}", size), canvas) for i, (x, m) in enumerate(zip(X, y))]
        seed = 0 if self.random_state is None else int(self.random_state)
        if self.validation_fraction and len(samples) > 1:
            tr, val = split_validation(samples, self.validation_fraction, Rng(seed).split("validation"))
            if not val or not tr:
                tr, val = samples, samples
        else:
            tr, val = samples, samples
        plan = TrainPlan(max_epochs=self.max_epochs, patience=self.patience, batch_size=self.batch_size,
                         weights=LossWeights(self.lambda_bce, self.lambda_mcc), seed=seed,
                         lr=self.learning_rate)
        result = train(plan, self._config(), tr, val)
        self.params_ = result.best_params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        """Vessel probability maps shaped ``(n, h, w)``."""
        check_is_fitted(self, "params_")
        X = check_images(X, self.params_.config.in_channels)
        h, w = X.shape[2:]
        padded = pad_array(X, (_ceil8(h), _ceil8(w)))
        out = []
        with no_grad():
            for i in range(0, len(padded), self.batch_size):
                p = forward(self.params_, Tensor(padded[i:i + self.batch_size]), mode="eval").data
                out.append(crop_back(p, (h, w))[:, 0])
        return np.concatenate(out)

    def predict(self, X):
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y, sample_weight=None):
        """Pooled F1 of the thresholded prediction."""
        X = check_images(X)
        y = check_masks(y, X)
        return metric_suite(confusion(self.predict_proba(X), y, threshold=self.threshold)).f1

    def save(self, path):
        check_is_fitted(self, "params_")
        return checkpoint.save_checkpoint(path, self.params_)

    @classmethod
    def load(cls, path, **kwargs):
        params, _ = checkpoint.load_checkpoint(path)
        cfg = params.config
        est = cls(channels=cfg.channels, skip_attention=cfg.skip_attention,
                  bottleneck_attention=cfg.bottleneck_attention, activation=cfg.activation,
                  drop_rate=cfg.dropblock.drop_rate, block_size=cfg.dropblock.block_size, **kwargs)
        est.params_ = params
        est.classes_ = np.array([0, 1])
        return est
