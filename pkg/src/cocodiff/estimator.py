"""scikit-learn style wrapper around the training pipeline."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets, unique_labels
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig, TrainConfig
from .dataset import (GraphTopology, SkeletonDataset, SkeletonSequence, default_class_names,
                      ntu_topology)
from .diffusion import DenoiserConfig
from .encoder import EncoderConfig
from .errors import ConfigError, ShapeError
from .text import TextEncoderConfig
from .training import encode_dataset, encoder_from, run_pipeline

VARIANTS = ("cocodiff", "baseline")


def check_skeletons(X, num_joints: int | None = None) -> np.ndarray:
    """Validate a [N, C, T, V, M] array of finite values and return it as float32."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 5:
        raise ShapeError("rank", 5, X.ndim)
    if num_joints is not None and X.shape[3] != num_joints:
        raise ShapeError("joints", num_joints, X.shape[3])
    if not np.isfinite(X).all():
        raise ValueError("input contains NaN or infinity")
    return X


def as_dataset(X, y, class_names, topology: GraphTopology) -> SkeletonDataset:
    X = check_skeletons(X, topology.num_joints)
    y = np.asarray(y, dtype=np.int64)
    if len(y) != len(X):
        raise ShapeError("samples", len(X), len(y))
    seqs = [SkeletonSequence(X[i], int(y[i]), i) for i in range(len(X))]
    return SkeletonDataset(seqs, list(class_names), topology)


class CoCoDiffClassifier(ClassifierMixin, BaseEstimator):
    """Skeleton action classifier trained with or without diffusion guidance.

    ``variant="cocodiff"`` runs encoder pretraining, diffusion pretraining and
    joint training; ``variant="baseline"`` trains the encoder with
    cross-entropy only. Inference is the same for both: encoder then linear
    classifier.

    X has shape [n_samples, channels, frames, joints, actors]. Labels may be
    any hashable values; their string forms name the classes for the text
    prompts unless ``class_names`` is given.
    """

    def __init__(self, variant="cocodiff", epochs=30, batch_size=32, lr=0.1, diffusion_lr=0.01,
                 momentum=0.9, weight_decay=4e-4, warmup_epochs=5, lam=0.075, tau=0.07, T=30,
                 widths=(16, 32, 64), strides=(1, 2, 2), temporal_kernel=9, text_dim=64,
                 denoiser_hidden=(256, 128), time_embed_dim=32, class_names=None, topology=None,
                 use_fine_text=True, use_coarse_text=True, pretrain_encoder=True,
                 pretrain_diffusion=True, random_state=0, dtype="float32"):
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.diffusion_lr = diffusion_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.lam = lam
        self.tau = tau
        self.T = T
        self.widths = widths
        self.strides = strides
        self.temporal_kernel = temporal_kernel
        self.text_dim = text_dim
        self.denoiser_hidden = denoiser_hidden
        self.time_embed_dim = time_embed_dim
        self.class_names = class_names
        self.topology = topology
        self.use_fine_text = use_fine_text
        self.use_coarse_text = use_coarse_text
        self.pretrain_encoder = pretrain_encoder
        self.pretrain_diffusion = pretrain_diffusion
        self.random_state = random_state
        self.dtype = dtype

    def _topology(self, num_joints):
        if self.topology is not None:
            return self.topology
        if num_joints == 25:
            return ntu_topology()
        raise ConfigError("topology", f"no default skeleton graph for {num_joints} joints")

    def _run_config(self, n_classes: int) -> RunConfig:
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"must be one of {VARIANTS}")
        widths = tuple(int(w) for w in self.widths)
        epochs = int(self.epochs)
        # decay at 70% and 85% of training, mirroring 70/80 of 90 epochs
        decay = tuple(sorted({e for e in (int(epochs * 0.7), int(epochs * 0.85)) if 0 < e < epochs}))
        train = TrainConfig(
            epochs=epochs, batch_size=int(self.batch_size), lr=float(self.lr),
            diffusion_lr=float(self.diffusion_lr), momentum=float(self.momentum),
            weight_decay=float(self.weight_decay), warmup_epochs=int(self.warmup_epochs),
            lr_decay_epochs=decay, lam=float(self.lam), tau=float(self.tau), T=int(self.T),
            use_fine_text=bool(self.use_fine_text), use_coarse_text=bool(self.use_coarse_text),
            pretrain_encoder=bool(self.pretrain_encoder), pretrain_diffusion=bool(self.pretrain_diffusion),
            select_best="last", dtype=self.dtype,
        )
        cfg = RunConfig(
            text=TextEncoderConfig(embed_dim=int(self.text_dim)),
            encoder=EncoderConfig(widths=widths, strides=tuple(self.strides), feature_dim=widths[-1],
                                  temporal_kernel=int(self.temporal_kernel)),
            denoiser=DenoiserConfig(hidden=tuple(self.denoiser_hidden), time_embed_dim=int(self.time_embed_dim)),
            train=train,
        ).set_seed(int(self.random_state))
        cfg = replace(cfg, generation=replace(cfg.generation, num_classes=n_classes))
        return cfg.resolved()

    def fit(self, X, y):
        X = check_skeletons(X)
        check_classification_targets(y)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        y_idx = np.searchsorted(self.classes_, y)
        if self.class_names is not None:
            names = list(self.class_names)
            if len(names) != len(self.classes_):
                raise ConfigError("class_names", f"expected {len(self.classes_)} names, got {len(names)}")
        elif self.classes_.dtype.kind in "iu":
            names = default_class_names(len(self.classes_))
        else:
            names = [str(c) for c in self.classes_]
        topology = self._topology(X.shape[3])
        ds = as_dataset(X, y_idx, names, topology)
        cfg = self._run_config(len(self.classes_))
        cfg = replace(cfg, generation=replace(cfg.generation, topology=topology))
        result = run_pipeline(cfg, ds, baseline=self.variant == "baseline")
        self.checkpoint_ = result["baseline" if self.variant == "baseline" else "final"]
        self.history_ = result["history"]
        self.encoder_ = encoder_from(self.checkpoint_)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.topology_ = topology
        return self

    def _dataset(self, X) -> SkeletonDataset:
        check_is_fitted(self, "checkpoint_")
        X = check_skeletons(X, self.topology_.num_joints)
        zeros = np.zeros(len(X), dtype=np.int64)
        return as_dataset(X, zeros, self.checkpoint_.class_names, self.topology_)

    def transform(self, X) -> np.ndarray:
        """Pooled encoder features, one row per sample."""
        return encode_dataset(self.encoder_, self._dataset(X)).double().numpy()

    def decision_function(self, X) -> np.ndarray:
        feats = encode_dataset(self.encoder_, self._dataset(X))
        with torch.no_grad():
            return self.encoder_.classify(feats).double().numpy()

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]
