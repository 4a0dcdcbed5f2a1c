"""scikit-learn style front end.

``DGFASegmenter`` takes a list of clouds (each an ``(n, 3)`` xyz array, or
``(n, 3 + c)`` with extra feature columns) and a matching list of per-point
label arrays.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from dgfa.metrics import evaluate
from dgfa.model import ModelConfig, forward, predict_labels
from dgfa.scenes import scene_features
from dgfa.train import TrainConfig, prepare_sample, train


def check_clouds(X, min_columns: int = 3) -> list[np.ndarray]:
    """Normalise X to a list of finite float64 ``(n, c)`` arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    clouds = []
    for i, c in enumerate(X):
        c = np.asarray(c, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] < min_columns:
            raise ValueError(f"cloud {i}: expected shape (n, >={min_columns}), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError(f"cloud {i}: non-finite values")
        clouds.append(c)
    if not clouds:
        raise ValueError("no clouds given")
    return clouds


def check_labels(y, clouds) -> list[np.ndarray]:
    if isinstance(y, np.ndarray) and y.ndim == 1 and len(clouds) == 1:
        y = [y]
    if len(y) != len(clouds):
        raise ValueError(f"{len(clouds)} clouds but {len(y)} label arrays")
    out = []
    for i, (lab, c) in enumerate(zip(y, clouds)):
        lab = np.asarray(lab)
        if lab.shape != (len(c),):
            raise ValueError(f"cloud {i}: {len(c)} points but labels of shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            if np.any(lab != np.round(lab)):
                raise ValueError(f"cloud {i}: labels must be integers")
        out.append(lab.astype(np.int64))
    return out


class DGFASegmenter(ClassifierMixin, BaseEstimator):
    """Point-cloud semantic segmenter with dilated graph feature aggregation.

    Parameters mirror :class:`~dgfa.train.TrainConfig` and
    :class:`~dgfa.model.ModelConfig`; ``num_classes=None`` infers the class
    count from the training labels.
    """

    def __init__(self, num_classes=None, encoder_widths=(16, 32, 48, 64), dgfa_rates=(1, 2, 4, 8),
                 dgfa_width=32, dgfa_out_width=64, decoder_widths=(64, 32, 32), dgfa_k=8, dgfa_step=4,
                 dgfa_mode="dense", ratios=(4, 4, 2), k=16, lambdas=(1.0, 1.0, 1.0, 1.0), reduction="mean",
                 epochs=20, lr=1e-3, seed=0):
        self.num_classes = num_classes
        self.encoder_widths = encoder_widths
        self.dgfa_rates = dgfa_rates
        self.dgfa_width = dgfa_width
        self.dgfa_out_width = dgfa_out_width
        self.decoder_widths = decoder_widths
        self.dgfa_k = dgfa_k
        self.dgfa_step = dgfa_step
        self.dgfa_mode = dgfa_mode
        self.ratios = ratios
        self.k = k
        self.lambdas = lambdas
        self.reduction = reduction
        self.epochs = epochs
        self.lr = lr
        self.seed = seed

    def _features(self, cloud):
        return np.c_[scene_features(cloud[:, :3]), cloud[:, 3:]]

    def _config(self, n_classes, n_channels) -> TrainConfig:
        model = ModelConfig(
            num_classes=n_classes, input_channels=n_channels, encoder_widths=self.encoder_widths,
            dgfa_rates=self.dgfa_rates, dgfa_width=self.dgfa_width, dgfa_out_width=self.dgfa_out_width,
            dgfa_k=self.dgfa_k, dgfa_step=self.dgfa_step, dgfa_mode=self.dgfa_mode,
            decoder_widths=self.decoder_widths,
        )
        return TrainConfig(model=model, epochs=self.epochs, lr=self.lr, seed=self.seed, lambdas=self.lambdas,
                           reduction=self.reduction, ratios=self.ratios, k=self.k)

    def fit(self, X, y):
        clouds = check_clouds(X)
        labels = check_labels(y, clouds)
        widths = {c.shape[1] for c in clouds}
        if len(widths) != 1:
            raise ValueError(f"clouds have different column counts {sorted(widths)}")
        n_classes = self.num_classes or int(max(l.max() for l in labels)) + 1
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = widths.pop()
        self.config_ = self._config(n_classes, self.n_features_in_)
        samples = [prepare_sample(c[:, :3], lab, self.config_, self._features(c)) for c, lab in zip(clouds, labels)]
        self.params_, self.history_ = train(self.config_, samples)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("DGFASegmenter is not fitted yet; call fit first")

    def _forward(self, cloud):
        if cloud.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {cloud.shape[1]}")
        s = prepare_sample(cloud[:, :3], None, self.config_, self._features(cloud))
        return forward(s.features, s.hierarchy, s.graphs, self.config_.model, self.params_)

    def predict(self, X):
        """Per-point labels from the full-resolution head (one array per cloud)."""
        self._check_fitted()
        preds = [predict_labels(self._forward(c).logits[0]) for c in check_clouds(X)]
        return preds[0] if isinstance(X, np.ndarray) and np.ndim(X) == 2 else preds

    def transform(self, X):
        """Per-point features after the last upsampling layer."""
        self._check_fitted()
        feats = [self._forward(c).features["last-upsample"].data for c in check_clouds(X)]
        return feats[0] if isinstance(X, np.ndarray) and np.ndim(X) == 2 else feats

    def score(self, X, y, sample_weight=None):
        """Mean IoU over all points of all clouds."""
        clouds = check_clouds(X)
        labels = check_labels(y, clouds)
        pred = self.predict(clouds)
        return evaluate(np.concatenate(pred), np.concatenate(labels), len(self.classes_)).miou
