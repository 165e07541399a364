"""Scikit-learn style classifier wrapping the training pipeline."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .data import (
    Dataset,
    SplitSpec,
    TimeSeriesRecord,
    fill_missing,
    impute_missing,
    timestep_means,
    znormalize,
    znormalize_dataset,
)
from .model import (
    TrainConfig,
    predict_probabilities,
    select_shape_length,
    train,
)


def _validate_series_matrix(X, allow_nan=True) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ValueError(f"expected a 2D array of series, got shape {X.shape}")
    if X.shape[1] < 2:
        raise ValueError("series must have at least 2 timesteps")
    if np.isinf(X).any():
        raise ValueError("series contain infinite values")
    if not allow_nan and np.isnan(X).any():
        raise ValueError("series contain NaN values")
    return X


class SoftShapeClassifier(ClassifierMixin, BaseEstimator):
    """Univariate time-series classifier over attention-scored soft shapes.

    fit(X, y) accepts an (n_samples, n_timesteps) float array (NaN marks
    missing values) and any hashable labels. A validation slice of the
    training data drives early stopping and, when `window` is None, the
    window-length search.

    Parameters mirror `TrainConfig`; see that class for meanings.
    """

    def __init__(
        self,
        window=None,
        stride=4,
        dim=64,
        eta=0.5,
        top_k=1,
        num_experts=None,
        depth=2,
        aux_weight=0.001,
        attn_dim=8,
        lr=0.001,
        max_epochs=500,
        warmup_epochs=150,
        patience=50,
        val_fraction=0.2,
        normalize=True,
        inter_kernel_sizes=(3, 5, 9),
        inter_bottleneck=True,
        no_soft_sparse=False,
        no_intra=False,
        no_inter=False,
        linear_embed=False,
        random_state=0,
    ):
        self.window = window
        self.stride = stride
        self.dim = dim
        self.eta = eta
        self.top_k = top_k
        self.num_experts = num_experts
        self.depth = depth
        self.aux_weight = aux_weight
        self.attn_dim = attn_dim
        self.lr = lr
        self.max_epochs = max_epochs
        self.warmup_epochs = warmup_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.normalize = normalize
        self.inter_kernel_sizes = inter_kernel_sizes
        self.inter_bottleneck = inter_bottleneck
        self.no_soft_sparse = no_soft_sparse
        self.no_intra = no_intra
        self.no_inter = no_inter
        self.linear_embed = linear_embed
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            window=self.window,
            stride=self.stride,
            dim=self.dim,
            eta=self.eta,
            top_k=self.top_k,
            num_experts=self.num_experts,
            depth=self.depth,
            aux_weight=self.aux_weight,
            attn_dim=self.attn_dim,
            lr=self.lr,
            max_epochs=self.max_epochs,
            warmup_epochs=self.warmup_epochs,
            patience=self.patience,
            seed=self.random_state,
            inter_kernel_sizes=tuple(self.inter_kernel_sizes),
            inter_bottleneck=self.inter_bottleneck,
            no_soft_sparse=self.no_soft_sparse,
            no_intra=self.no_intra,
            no_inter=self.no_inter,
            linear_embed=self.linear_embed,
        )

    def fit(self, X, y):
        X = _validate_series_matrix(X)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError("y must be a 1D array aligned with X")
        if len(X) < 2:
            raise ValueError("need at least 2 samples to fit")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]

        records = [TimeSeriesRecord(row, int(label)) for row, label in zip(X, encoded)]
        dataset = Dataset(
            records,
            num_classes=len(self.classes_),
            series_length=X.shape[1],
            name="fit",
        )

        rng = np.random.default_rng(self.random_state)
        perm = rng.permutation(len(X))
        n_val = max(1, int(len(X) * self.val_fraction))
        if n_val >= len(X):
            raise ValueError("val_fraction leaves no training samples")
        split = SplitSpec(
            train=sorted(int(i) for i in perm[n_val:]),
            val=sorted(int(i) for i in perm[:n_val]),
            test=[],
            seed=self.random_state,
        )

        if self.normalize:
            dataset = znormalize_dataset(dataset)
        self.timestep_means_ = timestep_means(dataset, split.train)
        dataset = impute_missing(dataset, split.train)

        config = self._config()
        if config.window is None:
            config = replace(config, window=select_shape_length(dataset, split, config))
        self.window_ = config.window
        self.net_, self.metrics_ = train(dataset, split, config)
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("fit must be called before predicting")

    def _prepare(self, X) -> np.ndarray:
        X = _validate_series_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"expected {self.n_features_in_} timesteps, got {X.shape[1]}"
            )
        rows = []
        for row in X:
            if self.normalize:
                row = znormalize(row)
            rows.append(fill_missing(row, self.timestep_means_))
        return np.stack(rows)

    def predict_proba(self, X):
        self._check_fitted()
        return predict_probabilities(self.net_, self._prepare(X))

    def predict(self, X):
        self._check_fitted()
        return self.classes_[self.predict_proba(X).argmax(axis=-1)]
