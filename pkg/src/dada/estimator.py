"""Scikit-learn style front end for the adaptation pipeline.

DADASegmenter wraps dataset wrapping, network construction and the
adversarial training loop behind the usual fit/predict surface, so the
segmenter drops into sklearn tooling (get_params/set_params, clone,
pipelines operating on image batches).
"""

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .metrics import confusion, iou_report, predict_labels
from .model import ModelConfig
from .synthdata import SceneDataset
from .trainer import ABLATION_PRESETS, TrainConfig, TrainState, fit_loop


def _check_images(X, name="X"):
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (n_samples, height, width, 3), "
                         f"got {X.shape}")
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return X


def _check_label_maps(y, shape, num_classes=None):
    y = np.asarray(y)
    if y.shape != shape:
        raise ValueError(f"y must have shape {shape}, got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == y.astype(np.int64)):
            raise ValueError("y must contain integer class indices")
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise ValueError("y contains negative class indices")
    if num_classes is not None and y.size and y.max() >= num_classes:
        raise ValueError(f"y contains classes >= num_classes ({num_classes})")
    return y


def _check_depth_maps(z, shape):
    z = np.asarray(z, dtype=np.float32)
    if z.shape != shape:
        raise ValueError(f"inv_depth must have shape {shape}, got {z.shape}")
    if z.size and (z.min() <= 0 or z.max() > 1):
        raise ValueError("inv_depth values must lie in (0, 1]")
    return z


class DADASegmenter(BaseEstimator):
    """Depth-aware domain-adaptive semantic segmenter.

    fit takes labeled source images (with inverse-depth maps when the
    chosen ablation uses the depth branch) plus unlabeled target images;
    predict emits per-pixel class maps. score returns mIoU.
    """

    def __init__(self, ablation="S7", num_classes=None,
                 backbone_channels=(16, 32, 64, 64), classifier_dilation=2,
                 lambda_dep=1e-3, lambda_adv=1e-3, gen_lr=2.5e-4,
                 gen_momentum=0.9, gen_weight_decay=1e-4, disc_lr=1e-4,
                 iterations=500, seed=0, lr_schedule="constant",
                 berhu_fraction=0.2):
        self.ablation = ablation
        self.num_classes = num_classes
        self.backbone_channels = backbone_channels
        self.classifier_dilation = classifier_dilation
        self.lambda_dep = lambda_dep
        self.lambda_adv = lambda_adv
        self.gen_lr = gen_lr
        self.gen_momentum = gen_momentum
        self.gen_weight_decay = gen_weight_decay
        self.disc_lr = disc_lr
        self.iterations = iterations
        self.seed = seed
        self.lr_schedule = lr_schedule
        self.berhu_fraction = berhu_fraction

    def fit(self, X, y, inv_depth=None, X_target=None):
        if self.ablation not in ABLATION_PRESETS:
            raise ValueError(f"unknown ablation {self.ablation!r}; "
                             f"expected one of {sorted(ABLATION_PRESETS)}")
        setup = ABLATION_PRESETS[self.ablation]

        X = _check_images(X)
        n, h, w = X.shape[:3]
        y = _check_label_maps(y, (n, h, w), self.num_classes)
        n_classes = self.num_classes or int(y.max()) + 1
        if setup.uses_depth_branch:
            if inv_depth is None:
                raise ValueError(f"ablation {self.ablation} uses the depth branch; "
                                 "pass inv_depth for the source images")
            inv_depth = _check_depth_maps(inv_depth, (n, h, w))
        if setup.adversarial:
            if X_target is None:
                raise ValueError(f"ablation {self.ablation} is adversarial; "
                                 "pass unlabeled X_target images")
            X_target = _check_images(X_target, "X_target")
            if X_target.shape[1:3] != (h, w):
                raise ValueError("X_target resolution must match X")
        else:
            X_target = X  # unused stream; keeps the loop uniform

        model_cfg = ModelConfig(
            backbone_channels=tuple(self.backbone_channels),
            backbone_depth=len(self.backbone_channels),
            classifier_dilation=self.classifier_dilation,
            num_classes=n_classes, input_size=(h, w))
        train_cfg = TrainConfig(
            lambda_dep=self.lambda_dep, lambda_adv=self.lambda_adv,
            gen_lr=self.gen_lr, gen_momentum=self.gen_momentum,
            gen_weight_decay=self.gen_weight_decay, disc_lr=self.disc_lr,
            iterations=self.iterations, seed=self.seed,
            lr_schedule=self.lr_schedule, berhu_fraction=self.berhu_fraction)

        source = SceneDataset.from_arrays(X, labels=y, inv_depths=inv_depth, role="source")
        target = SceneDataset.from_arrays(X_target, role="target-train")
        state = TrainState(model_cfg, train_cfg, setup, len(source), len(target))
        fit_loop(state, source, target, train_cfg.iterations)

        self.net_ = state.net
        self.model_config_ = model_cfg
        self.classes_ = np.arange(n_classes)
        return self

    def _require_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("this DADASegmenter instance is not fitted yet")

    def predict(self, X):
        self._require_fitted()
        X = _check_images(X)
        return np.stack([predict_labels(self.net_, X[i]) for i in range(X.shape[0])])

    def predict_proba(self, X):
        """Per-pixel class probabilities, shape (n, height, width, classes)."""
        self._require_fitted()
        X = _check_images(X)
        out = []
        with torch.no_grad():
            for i in range(X.shape[0]):
                t = torch.from_numpy(np.ascontiguousarray(X[i].transpose(2, 0, 1))[None])
                out.append(self.net_(t).seg[0].numpy().transpose(1, 2, 0))
        return np.stack(out)

    def predict_depth(self, X):
        """Predicted inverse depth, shape (n, height, width)."""
        self._require_fitted()
        X = _check_images(X)
        out = []
        with torch.no_grad():
            for i in range(X.shape[0]):
                t = torch.from_numpy(np.ascontiguousarray(X[i].transpose(2, 0, 1))[None])
                depth = self.net_(t).depth
                if depth is None:
                    raise ValueError("model was trained without a depth branch")
                out.append(depth[0].numpy())
        return np.stack(out)

    def score(self, X, y):
        """Mean IoU over the batch (classes absent everywhere excluded)."""
        self._require_fitted()
        pred = self.predict(X)
        y = _check_label_maps(np.asarray(y), pred.shape, len(self.classes_))
        cm = confusion(pred.reshape(-1), y.reshape(-1), len(self.classes_))
        return iou_report(cm).miou
