"""scikit-learn style wrapper: fit on (images, label maps), predict label maps."""

from __future__ import annotations

import copy
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import toy_config
from .errors import ContractError, ShapeError
from .metrics import ConfusionAccumulator
from .model import MROVSeg
from .training import Trainer, ToySample


def _check_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ShapeError(f"expected images of shape [n, 3, H, W], got {X.shape}")
    if X.shape[0] == 0:
        raise ContractError("need at least one image")
    return X


def _check_labels(y, X: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ShapeError(f"label maps {y.shape} do not match images {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ContractError("label maps must be integer class ids")
    if y.min() < 0 or y.max() >= n_classes:
        raise ContractError(f"labels must lie in 0..{n_classes - 1}")
    return y


class MROVSegSegmenter(BaseEstimator):
    """Open-vocabulary semantic segmenter with a fixed vocabulary at fit time.

    Every non-zero class present in a label map becomes one target segment;
    class 0 is the background segment.
    """

    def __init__(self, class_names: Sequence[str] = ("background", "object"), p: float = 0.5,
                 steps: int = 200, batch_size: int = 2, base_lr: float = 1e-3,
                 fusion_enabled: bool = True, random_state: int = 0, model_config=None):
        self.class_names = class_names
        self.p = p
        self.steps = steps
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.fusion_enabled = fusion_enabled
        self.random_state = random_state
        self.model_config = model_config

    def _build(self, image_hw) -> MROVSeg:
        cfg = copy.deepcopy(self.model_config) if self.model_config is not None \
            else toy_config().model
        cfg.image_size = tuple(image_hw)
        cfg.p = self.p
        cfg.init_seed = self.random_state
        cfg.adapter.fusion_enabled = self.fusion_enabled
        cfg.__post_init__()
        return MROVSeg(cfg)

    def fit(self, X, y):
        X = _check_images(X)
        names = list(self.class_names)
        y = _check_labels(y, X, len(names))
        samples = [ToySample(img, [(int(k), lab == k) for k in np.unique(lab) if k != 0])
                   for img, lab in zip(X, y)]
        model = self._build(X.shape[2:])
        tcfg = toy_config().train
        tcfg.steps = self.steps
        tcfg.batch_size = min(self.batch_size, len(samples))
        tcfg.base_lr = self.base_lr
        tcfg.data_seed = self.random_state
        trainer = Trainer(model, tcfg, samples, names)
        result = trainer.fit()
        self.model_ = model
        self.classes_ = np.array(names)
        self.loss_curve_ = result.losses
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X, class_names: Optional[Sequence[str]] = None) -> np.ndarray:
        """Label maps; ``class_names`` may swap in a different vocabulary."""
        check_is_fitted(self, "model_")
        X = _check_images(X)
        names = list(self.classes_) if class_names is None else list(class_names)
        text = self.model_.embed_text(names)
        return np.stack([self.model_.segment(img, names, text=text).label_map for img in X])

    def score(self, X, y) -> float:
        """Mean IoU over the classes present in ``y``."""
        pred = self.predict(X)
        acc = ConfusionAccumulator(len(self.classes_), ignore_index=None)
        acc.update(pred, _check_labels(y, _check_images(X), len(self.classes_)))
        res = acc.miou()
        return float(res.miou) if res.defined else float("nan")
