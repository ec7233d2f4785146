"""scikit-learn style wrapper: ``fit`` pretrains (and adapts when target images are given)."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .augment import RandAugmentPolicy
from .exceptions import ArgumentError
from .losses import LossConfig
from .metrics import EvalConfig, evaluate_batch
from .model import ModelSpec, init_model, predict
from .trainer import TrainConfig, Trainer


def check_images(X, height=None, width=None):
    """Float32 array of shape (n, H, W, 3) with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ArgumentError(f"expected images of shape (n, H, W, 3), got {X.shape}")
    if height is not None and X.shape[1:3] != (height, width):
        raise ArgumentError(f"expected {height}x{width} images, got {X.shape[1]}x{X.shape[2]}")
    if not np.isfinite(X).all() or X.min(initial=0) < 0 or X.max(initial=0) > 1:
        raise ArgumentError("image values must be finite and in [0, 1]")
    return X


def check_depths(y, X):
    """Depth maps (n, H, W) or (n, H, W, 1) matching ``X``; 0 marks a missing label."""
    y = np.asarray(y, dtype=np.float32)
    if y.ndim == 4 and y.shape[-1] == 1:
        y = y[..., 0]
    if y.shape != X.shape[:3]:
        raise ArgumentError(f"depth shape {y.shape} does not match images {X.shape[:3]}")
    if not np.isfinite(y).all() or (y < 0).any():
        raise ArgumentError("depth values must be finite and >= 0")
    if not all((d > 0).any() for d in y):
        raise ArgumentError("every depth map needs at least one labelled pixel")
    return y


class DepthAdaptRegressor(RegressorMixin, BaseEstimator):
    """Per-pixel depth regressor.

    ``fit(X, y)`` runs supervised CutMix pretraining; ``fit(X, y, X_target=T)``
    then adapts to the unlabelled images ``T``. ``score`` is negative AbsRel so
    that higher is better.
    """

    def __init__(self, depth=4, base_channels=16, max_depth=80.0, pretrain_epochs=50, pretrain_lr=4e-3,
                 pretrain_batch=8, adapt_epochs=10, adapt_lr=3e-5, decay_start_epoch=4, batch_n=12, ratio="2",
                 streams=3, aug_set="s_fm", aug_n=1, aug_m=7.0, source_variant="pairwise_sum", clip_norm=10.0,
                 cap=80.0, random_state=0):
        self.depth = depth
        self.base_channels = base_channels
        self.max_depth = max_depth
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_lr = pretrain_lr
        self.pretrain_batch = pretrain_batch
        self.adapt_epochs = adapt_epochs
        self.adapt_lr = adapt_lr
        self.decay_start_epoch = decay_start_epoch
        self.batch_n = batch_n
        self.ratio = ratio
        self.streams = streams
        self.aug_set = aug_set
        self.aug_n = aug_n
        self.aug_m = aug_m
        self.source_variant = source_variant
        self.clip_norm = clip_norm
        self.cap = cap
        self.random_state = random_state

    def _configs(self, spec):
        seeds = dict(seed_model=self.random_state, seed_data=self.random_state, seed_augment=self.random_state)
        pre = TrainConfig.pretrain_defaults(model=spec, lr=self.pretrain_lr, epochs=self.pretrain_epochs,
                                            batch_size=self.pretrain_batch, clip_norm=self.clip_norm, **seeds)
        ada = TrainConfig.adapt_defaults(
            model=spec, lr=self.adapt_lr, epochs=self.adapt_epochs, decay_start_epoch=self.decay_start_epoch,
            batch_size=self.batch_n, ratio=str(self.ratio), streams=self.streams, clip_norm=self.clip_norm,
            loss=LossConfig(source_variant=self.source_variant, streams=self.streams),
            policy=RandAugmentPolicy(self.aug_set, self.aug_n, self.aug_m), **seeds,
        )
        return pre.validate(), ada.validate()

    def fit(self, X, y, X_target=None):
        X = check_images(X)
        y = check_depths(y, X)
        spec = ModelSpec(X.shape[1], X.shape[2], self.depth, self.base_channels, self.max_depth)
        pre, ada = self._configs(spec)
        ids = np.array([f"s{i}" for i in range(len(X))])
        net = init_model(spec, self.random_state)
        Trainer(net, pre, (X, y, ids)).run()
        self.adapted_ = False
        if X_target is not None:
            T = check_images(X_target, X.shape[1], X.shape[2])
            Trainer(net, ada, (X, y, ids), (T, np.array([f"t{i}" for i in range(len(T))]))).run()
            self.adapted_ = True
        self.net_ = net
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X):
        """Depth maps of shape (n, H, W)."""
        check_is_fitted(self, "net_")
        X = check_images(X, self.net_.spec.height, self.net_.spec.width)
        return predict(self.net_, X)[..., 0]

    def score(self, X, y, sample_weight=None):
        if sample_weight is not None:
            raise ArgumentError("sample weights are not supported")
        X = check_images(X)
        y = check_depths(y, X)
        return -evaluate_batch(self.predict(X), y, EvalConfig(cap=self.cap)).abs_rel
