"""Scikit-learn style wrappers around the two networks.

``FpnSegmenter`` turns raw microscopy frames into foreground-probability
masks; ``CellCounter`` regresses a count (with a 95% interval) from such a
mask. Both follow the estimator protocol, so ``get_params``, ``set_params``
and ``sklearn.base.clone`` behave as usual, and ``CellCounter.score`` is
the stock R^2.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .interpret import resize_nearest
from .models import CountConfig, FpnConfig, ci95
from .optim import split_dataset, train_counter, train_fpn
from .tensor import Tensor
from .validation import check_counts, check_image_stack

__all__ = ["FpnSegmenter", "CellCounter"]


def _logger(verbose):
    return print if verbose else (lambda line: None)


def _split_pairs(pairs, val_fraction, seed):
    if val_fraction <= 0.0:
        return pairs, None
    train_idx, val_idx = split_dataset(len(pairs), 1.0 - val_fraction, seed)
    return [pairs[i] for i in train_idx], [pairs[i] for i in val_idx]


class FpnSegmenter(TransformerMixin, BaseEstimator):
    """Pyramid segmenter with an estimator interface.

    ``fit(X, y)`` takes frames and their binary masks, both (n, H, W);
    ``transform(X)`` returns predicted masks at frame resolution in [0, 1].
    """

    def __init__(self, width_multiplier=1.0, pyramid_depth=4,
                 down_filters=(64, 128, 128, 128), lateral_filters=128,
                 head_filters=256, leaky_slope=0.01, tv_weight=1e-4,
                 epochs=10, lr=1e-3, batch=2, seed=0, squared_residual=False,
                 val_fraction=0.0, verbose=False):
        self.width_multiplier = width_multiplier
        self.pyramid_depth = pyramid_depth
        self.down_filters = down_filters
        self.lateral_filters = lateral_filters
        self.head_filters = head_filters
        self.leaky_slope = leaky_slope
        self.tv_weight = tv_weight
        self.epochs = epochs
        self.lr = lr
        self.batch = batch
        self.seed = seed
        self.squared_residual = squared_residual
        self.val_fraction = val_fraction
        self.verbose = verbose

    def _config(self) -> FpnConfig:
        return FpnConfig(pyramid_depth=self.pyramid_depth,
                         lateral_filters=self.lateral_filters,
                         head_filters=self.head_filters,
                         down_filters=tuple(self.down_filters),
                         leaky_slope=self.leaky_slope,
                         tv_weight=self.tv_weight,
                         width_multiplier=self.width_multiplier)

    def fit(self, X, y):
        images = check_image_stack(X, "X")
        masks = check_image_stack(y, "y")
        if images.shape != masks.shape:
            raise ValueError(f"X and y shapes differ: {images.shape} vs {masks.shape}")
        pairs = list(zip(images, masks))
        train, val = _split_pairs(pairs, self.val_fraction, self.seed)
        self.model_, self.report_ = train_fpn(
            train, val, config=self._config(), epochs=self.epochs, lr=self.lr,
            batch=self.batch, seed=self.seed, squared=self.squared_residual,
            log=_logger(self.verbose))
        self.input_hw_ = images.shape[1:]
        return self

    def _forward_stack(self, X):
        check_is_fitted(self, "model_")
        images = check_image_stack(X, "X")
        h, w = images.shape[1:]
        masks = np.empty((len(images), h, w))
        logvars = np.empty((len(images), h, w))
        for i in range(0, len(images), max(1, self.batch)):
            x = Tensor(images[i : i + max(1, self.batch)][:, None])
            out = self.model_.forward(x, mode="eval")
            for j in range(x.shape[0]):
                masks[i + j] = resize_nearest(out.masks[0].data[j, 0], (h, w))
                logvars[i + j] = resize_nearest(out.logvars[0].data[j, 0], (h, w))
        return np.clip(masks, 0.0, 1.0), logvars

    def transform(self, X):
        return self._forward_stack(X)[0]

    def transform_with_uncertainty(self, X):
        """Like transform, but also returns the per-pixel log-variance map."""
        return self._forward_stack(X)


class CellCounter(RegressorMixin, BaseEstimator):
    """Count regressor with an estimator interface.

    ``fit(X, y)`` takes foreground masks (n, H, W) and counts (n,); the
    mask resolution fixes the fully connected fan-in, so predictions must
    use the same shape. ``predict_interval`` adds the 95% band.
    """

    def __init__(self, width_multiplier=1.0,
                 conv_plan=(64, 128, 256, 256, 512, 512, 512, 512),
                 pool_after=(1, 2, 4, 6, 8), fc_dims=(1024, 512, 1),
                 leaky_slope=0.01, epochs=10, lr=1e-4, batch=5, seed=0,
                 squared_residual=False, val_fraction=0.0, verbose=False):
        self.width_multiplier = width_multiplier
        self.conv_plan = conv_plan
        self.pool_after = pool_after
        self.fc_dims = fc_dims
        self.leaky_slope = leaky_slope
        self.epochs = epochs
        self.lr = lr
        self.batch = batch
        self.seed = seed
        self.squared_residual = squared_residual
        self.val_fraction = val_fraction
        self.verbose = verbose

    def _config(self, input_hw) -> CountConfig:
        return CountConfig(conv_plan=tuple(self.conv_plan),
                           pool_after=tuple(self.pool_after),
                           fc_dims=tuple(self.fc_dims),
                           leaky_slope=self.leaky_slope,
                           width_multiplier=self.width_multiplier,
                           input_hw=tuple(input_hw))

    def fit(self, X, y):
        masks = check_image_stack(X, "X")
        counts = check_counts(y, len(masks))
        pairs = list(zip(masks, counts))
        train, val = _split_pairs(pairs, self.val_fraction, self.seed)
        self.model_, self.report_ = train_counter(
            train, val, config=self._config(masks.shape[1:]), epochs=self.epochs,
            lr=self.lr, batch=self.batch, seed=self.seed,
            squared=self.squared_residual, log=_logger(self.verbose))
        self.input_hw_ = masks.shape[1:]
        return self

    def _forward_stack(self, X):
        check_is_fitted(self, "model_")
        masks = check_image_stack(X, "X")
        preds = np.empty(len(masks))
        logvars = np.empty(len(masks))
        for i in range(0, len(masks), max(1, self.batch)):
            x = Tensor(masks[i : i + max(1, self.batch)][:, None])
            out = self.model_.forward(x, mode="eval")
            preds[i : i + x.shape[0]] = out.count.data[:, 0]
            logvars[i : i + x.shape[0]] = out.logvar.data[:, 0]
        return preds, logvars

    def predict(self, X):
        return self._forward_stack(X)[0]

    def predict_interval(self, X):
        """Counts plus the 95% interval bounds: (pred, lo, hi)."""
        preds, logvars = self._forward_stack(X)
        lo = np.empty_like(preds)
        hi = np.empty_like(preds)
        for i in range(len(preds)):
            lo[i], hi[i] = ci95(preds[i], logvars[i])
        return preds, lo, hi
