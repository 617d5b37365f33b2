"""scikit-learn compatible front-end for the semi-supervised segmenter."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .metrics import auc_roc
from .trainer import Trainer, TrainConfig
from .validation import check_patch_labels, check_patches


class VesselSegmenter(ClassifierMixin, BaseEstimator):
    """Patch-level vessel segmenter trained as the discriminator of a semi-supervised GAN.

    ``fit(X, y, X_unlabeled=...)`` trains on labeled patches plus an unlabeled
    pool; with ``semi_supervised=False`` it is a plain supervised U-Net.
    Patches are (N, 48, 48) arrays in [-1, 1]. For the structured head ``y``
    and ``predict_proba`` are per pixel (N, 48, 48); for the center-pixel head
    they are per patch (N,).
    """

    def __init__(
        self,
        head="structured",
        pooling="average",
        norm="weight",
        generator_objective="feature_matching",
        matching_layer="Con1",
        semi_supervised=True,
        use_unsup=True,
        lr_d=1e-4,
        lr_g=1e-4,
        batch_size=64,
        epochs=50,
        adam_betas=(0.5, 0.999),
        dropout_keep=0.8,
        seed=0,
        keep_best=True,
    ):
        self.head = head
        self.pooling = pooling
        self.norm = norm
        self.generator_objective = generator_objective
        self.matching_layer = matching_layer
        self.semi_supervised = semi_supervised
        self.use_unsup = use_unsup
        self.lr_d = lr_d
        self.lr_g = lr_g
        self.batch_size = batch_size
        self.epochs = epochs
        self.adam_betas = adam_betas
        self.dropout_keep = dropout_keep
        self.seed = seed
        self.keep_best = keep_best

    def make_config(self) -> TrainConfig:
        return TrainConfig(
            lr_D=self.lr_d, lr_G=self.lr_g, batch_size=self.batch_size, epochs=self.epochs,
            adam_betas=self.adam_betas, generator_objective=self.generator_objective,
            matching_layer=self.matching_layer, head=self.head, pooling=self.pooling, norm=self.norm,
            dropout_keep=self.dropout_keep, semi_supervised=self.semi_supervised,
            use_unsup=self.use_unsup, seed=self.seed,
        )

    def fit(self, X, y, X_unlabeled=None, X_val=None, y_val=None, out_dir=None):
        """Train from scratch.

        ``X_unlabeled`` defaults to ``X`` with its labels ignored. When a
        validation set is given and ``keep_best`` is set, the parameters with
        the best validation AUC are kept.
        """
        config = self.make_config()
        structured = config.head == "structured"
        X = check_patches(X)
        y = check_patch_labels(y, X, structured)
        if X_unlabeled is None:
            X_unlabeled = X
        X_unlabeled = check_patches(X_unlabeled, X.shape[1], "X_unlabeled")
        validation = None
        if X_val is not None:
            X_val = check_patches(X_val, X.shape[1], "X_val")
            validation = (X_val, check_patch_labels(y_val, X_val, structured, "y_val"))
        self.trainer_ = Trainer(config)
        self.log_ = self.trainer_.train(X, y, X_unlabeled, validation, out_dir)
        if self.keep_best:
            self.trainer_.restore_best()
        self.classes_ = np.array([0, 1])
        self.patch_size_ = X.shape[1]
        return self

    @property
    def discriminator_(self):
        check_is_fitted(self, "trainer_")
        return self.trainer_.D

    @property
    def generator_(self):
        check_is_fitted(self, "trainer_")
        return self.trainer_.G

    @property
    def structured_(self) -> bool:
        check_is_fitted(self, "trainer_")
        return self.trainer_.D.structured

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        return self.trainer_.predict_proba(check_patches(X, self.patch_size_))

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(np.int64)

    def score(self, X, y, sample_weight=None) -> float:
        """Pixel-level (or centre-pixel) area under the ROC curve."""
        X = check_patches(X, getattr(self, "patch_size_", None))
        y = check_patch_labels(y, X, self.structured_)
        return auc_roc(self.predict_proba(X), y.astype(bool))

    def generate(self, n: int) -> np.ndarray:
        """Draw ``n`` synthetic patches from the generator."""
        check_is_fitted(self, "trainer_")
        self.trainer_.G.eval()
        with torch.no_grad():
            return self.trainer_.G(self.trainer_.sample_z(n))[:, 0].numpy()

    def save(self, path) -> None:
        check_is_fitted(self, "trainer_")
        self.trainer_.save_checkpoint(path, self.log_)

    @classmethod
    def load(cls, path) -> "VesselSegmenter":
        trainer = Trainer.from_checkpoint(path)
        c = trainer.config
        est = cls(head=c.head, pooling=c.pooling, norm=c.norm, generator_objective=c.generator_objective,
                  matching_layer=c.matching_layer, semi_supervised=c.semi_supervised, use_unsup=c.use_unsup,
                  lr_d=c.lr_D, lr_g=c.lr_G, batch_size=c.batch_size, epochs=c.epochs, adam_betas=c.adam_betas,
                  dropout_keep=c.dropout_keep, seed=c.seed)
        est.trainer_ = trainer
        est.log_ = None
        est.classes_ = np.array([0, 1])
        est.patch_size_ = trainer.d_spec.input_resolution
        return est
