"""scikit-learn style wrappers around the toy training loops.

``ToyConvClassifier`` trains a plain supervised network; ``DPKDistiller``
distills a student from a frozen teacher with the hybrid-feature objective.
Both accept (n, C, H, W) float arrays and arbitrary class labels.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from dpk._validation import check_images
from dpk.config import build_config
from dpk.harness.data import ArrayDataset


class _TorchClassifierMixin(ClassifierMixin):
    def _encode(self, X, y):
        X, y = check_images(X, y)
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return ArrayDataset(X, self.label_encoder_.transform(y).astype(np.int64))

    def _config(self, overrides):
        overrides = [(k, v) for k, v in overrides if v is not None]
        return build_config({}, [("seed", self.seed), ("optim.epochs", self.epochs),
                                 ("optim.batch_size", self.batch_size), ("optim.lr", self.lr),
                                 *overrides])

    @torch.no_grad()
    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X)
        self.model_.eval()
        out = [self.model_(torch.from_numpy(X[i : i + 500])) for i in range(0, len(X), 500)]
        return torch.cat(out).numpy()

    def predict_proba(self, X):
        return torch.softmax(torch.from_numpy(self.decision_function(X)), dim=1).numpy()

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class ToyConvClassifier(_TorchClassifierMixin, BaseEstimator):
    """Four-stage convolutional classifier trained with cross-entropy only.

    Parameters
    ----------
    width : channel multiplier (1.0 = teacher size, 0.5 = student size).
    epochs, batch_size, lr : SGD recipe; momentum 0.9, cosine decay.
    seed : drives initialization and data order.
    """

    def __init__(self, width=0.5, epochs=20, batch_size=64, lr=0.05, seed=0):
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        from dpk.harness.train import run_baseline

        data = self._encode(X, y)
        role = "teacher" if self.width >= 1.0 else "student"
        width_key = "model.teacher_width" if role == "teacher" else "model.student_width"
        cfg = self._config([("model.role", role), (width_key, float(self.width)),
                            ("dataset.num_classes", len(self.classes_))])
        result = run_baseline(cfg, out_dir=False, datasets=(data, data))
        self.model_ = result.model
        self.train_report_ = result.report
        return self


class DPKDistiller(_TorchClassifierMixin, BaseEstimator):
    """Student distilled from ``teacher`` with dynamic teacher-patch masking.

    Parameters
    ----------
    teacher : fitted ``ToyConvClassifier``, a ``ToyConvNet`` or a checkpoint path.
        Its class count must match the labels passed to ``fit``; labels are
        mapped to indices in sorted order, as the teacher saw them.
    student_width : channel multiplier of the student.
    mask_strategy : one of random, block, grid, cka, cosine, exponential, linear.
    mask_ratio : ratio for the fixed strategies.
    filler : what masked student tokens are replaced with (teacher, zero, learnable).
    alpha, beta, tau : loss weights and softmax temperature.
    transform_dim, encoder_blocks, decoder_blocks : transform size; None keeps defaults.
    """

    def __init__(self, teacher=None, student_width=0.5, mask_strategy="cka", mask_ratio=0.75,
                 filler="teacher", alpha=0.8, beta=0.2, tau=4.0, transform_dim=None,
                 encoder_blocks=6, decoder_blocks=6, epochs=20, batch_size=64, lr=0.05, seed=0):
        self.teacher = teacher
        self.student_width = student_width
        self.mask_strategy = mask_strategy
        self.mask_ratio = mask_ratio
        self.filler = filler
        self.alpha = alpha
        self.beta = beta
        self.tau = tau
        self.transform_dim = transform_dim
        self.encoder_blocks = encoder_blocks
        self.decoder_blocks = decoder_blocks
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def _teacher_module(self):
        from dpk.harness.train import load_model

        t = self.teacher
        if t is None:
            raise ValueError("DPKDistiller needs a teacher")
        if isinstance(t, ToyConvClassifier):
            check_is_fitted(t, "model_")
            return t.model_
        if isinstance(t, torch.nn.Module):
            return t
        return load_model(t)

    def fit(self, X, y):
        from dpk.harness.train import run_distillation

        data = self._encode(X, y)
        teacher = self._teacher_module()
        if teacher.num_classes != len(self.classes_):
            raise ValueError(
                f"teacher predicts {teacher.num_classes} classes, labels have {len(self.classes_)}"
            )
        cfg = self._config([
            ("model.student_width", float(self.student_width)),
            ("dataset.num_classes", len(self.classes_)),
            ("mask.strategy", self.mask_strategy), ("mask.ratio", float(self.mask_ratio)),
            ("mask.filler", self.filler),
            ("kd.alpha", float(self.alpha)), ("kd.beta", float(self.beta)), ("kd.tau", float(self.tau)),
            ("transform.dim", self.transform_dim),
            ("transform.encoder_blocks", self.encoder_blocks),
            ("transform.decoder_blocks", self.decoder_blocks),
        ])
        result = run_distillation(cfg, teacher=teacher, out_dir=False, datasets=(data, data))
        self.model_ = result.model
        self.trace_ = result.trace
        self.train_report_ = result.report
        return self
