"""scikit-learn style wrappers around the pipeline.

``TwoStageEncoder`` fits heads and LoRA factors and transforms images into CLS
features; ``LinearProbeClassifier`` is the gradient-descent softmax probe used
by the evaluation harness, exposed with ``fit``/``predict``/``score``. Both
compose with sklearn pipelines and ``clone``.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, validate_data

from . import backbone as bb
from .core import load_config, validate_config, vit_config
from .data import SceneRecord
from .evaluation import ProbeConfig, fit_softmax_regression
from .pipeline import build_frozen_backbone, generate_data, run_stage1, run_stage2, training_data


def check_images(X, image_size: int) -> np.ndarray:
    """Validate a batch of images as float32 [N, 3, S, S]; a single [3, S, S] image is promoted."""
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], SceneRecord):
        X = np.stack([r.image for r in X])
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != (3, image_size, image_size):
        raise ValueError(f"expected images shaped [N, 3, {image_size}, {image_size}], got {X.shape}")
    flat = check_array(X.reshape(len(X), -1), dtype=np.float32)
    return flat.reshape(X.shape)


def check_records(records) -> list[SceneRecord]:
    records = list(records)
    if not records:
        raise ValueError("no records given")
    bad = [i for i, r in enumerate(records) if not isinstance(r, SceneRecord)]
    if bad:
        raise TypeError(f"items {bad[:5]} are not SceneRecords")
    return records


class TwoStageEncoder(TransformerMixin, BaseEstimator):
    """Frozen toy backbone plus LoRA factors learned by the two-stage procedure.

    ``fit`` runs stage 1 and stage 2 on annotated records (or on the
    configured toy dataset when ``X`` is None). ``transform`` maps images to
    CLS features. With ``adapt=False`` fitting only builds the backbone, which
    gives the frozen-baseline arm.
    """

    def __init__(self, config=None, overrides=(), seed=0, adapt=True):
        self.config = config
        self.overrides = overrides
        self.seed = seed
        self.adapt = adapt

    def _cfg(self) -> dict:
        cfg = load_config(self.config or {}, [*self.overrides, f"train.seed={int(self.seed)}"])
        validate_config(cfg)
        return cfg

    def fit(self, X=None, y=None):
        cfg = self._cfg()
        self.config_ = cfg
        self.backbone_ = build_frozen_backbone(cfg)
        self.lora_ = None
        self.stage1_losses_, self.stage2_losses_ = {}, []
        if self.adapt:
            bundle = generate_data(cfg)
            records = bundle.train if X is None else check_records(X)
            data = training_data(cfg, records)
            s1 = run_stage1(cfg, self.backbone_, data, bundle.vocab)
            s2 = run_stage2(cfg, self.backbone_, s1.heads, data)
            self.lora_ = s2.lora
            self.stage1_losses_ = {k: r.losses for k, r in s1.results.items()}
            self.stage2_losses_ = s2.losses
        self.n_features_out_ = vit_config(cfg).hidden_size
        return self

    @torch.no_grad()
    def transform(self, X):
        check_is_fitted(self, "backbone_")
        images = torch.from_numpy(check_images(X, vit_config(self.config_).image_size))
        return bb.forward(self.backbone_, images, self.lora_).cls_feature.double().numpy()


class LinearProbeClassifier(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression on standardized features, full-batch gradient descent."""

    def __init__(self, l2=1e-3, tol=1e-5, max_epochs=3000):
        self.l2 = l2
        self.tol = tol
        self.max_epochs = max_epochs

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        ProbeConfig(self.max_epochs, self.l2, self.tol)
        self.classes_, yi = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes to fit a probe; got 1 class")
        self.mean_ = X.mean(0)
        scale = X.std(0)
        scale[scale == 0] = 1.0
        self.scale_ = scale
        W, b, epochs, converged = fit_softmax_regression(
            (X - self.mean_) / self.scale_, yi, len(self.classes_), self.l2, self.tol, self.max_epochs
        )
        self.coef_, self.intercept_ = W.T, b
        self.n_iter_, self.converged_ = epochs, converged
        return self

    def _scores(self, X):
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return ((X - self.mean_) / self.scale_) @ self.coef_.T + self.intercept_

    def decision_function(self, X):
        """Class scores [n, K]; for two classes the margin of ``classes_[1]`` over ``classes_[0]``."""
        z = self._scores(X)
        return z[:, 1] - z[:, 0] if z.shape[1] == 2 else z

    def predict_proba(self, X):
        z = self._scores(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        z = self._scores(X)
        return self.classes_[np.argmax(z, axis=1)]
