"""scikit-learn style wrapper around the multi-task network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data.manifest import Sample
from .data.preprocessing import brain_mask
from .losses import LossWeights
from .networks import ClassLabel, DiagnosisConfig, ModelConfig, SynthesisConfig, build_model, predict
from .trainer import TrainConfig, train

MRI_CHANNELS = 8


def check_mri_batch(X, dims=None) -> np.ndarray:
    """Validate an (N, 8, m, n, p) batch of finite MRI volumes; returns float32."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 5 or X.shape[1] != MRI_CHANNELS:
        raise ValueError(f"expected MRI batch of shape (N, {MRI_CHANNELS}, m, n, p), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty MRI batch")
    if dims is not None and tuple(X.shape[2:]) != tuple(dims):
        raise ValueError(f"volume dims {X.shape[2:]} do not match the fitted dims {tuple(dims)}")
    if not np.all(np.isfinite(X)):
        raise ValueError("MRI batch contains non-finite values")
    return X


def check_pet_batch(pet, X: np.ndarray) -> np.ndarray:
    if pet is None:
        raise ValueError("a PET CBF target batch is required")
    pet = np.asarray(pet, dtype=np.float32)
    if pet.ndim == 4:
        pet = pet[:, None]
    if pet.shape != (X.shape[0], 1) + X.shape[2:]:
        raise ValueError(f"PET batch shape {pet.shape} does not match MRI batch {X.shape}")
    if not np.all(np.isfinite(pet)):
        raise ValueError("PET batch contains non-finite values")
    return pet


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray([int(ClassLabel.parse(v)) for v in np.asarray(y).ravel()], dtype=int)
    if y.shape[0] != n:
        raise ValueError(f"{y.shape[0]} labels for {n} volumes")
    return y


def _samples(X, pet, y) -> list[Sample]:
    return [Sample(X[i], pet[i], int(y[i]), brain_mask(X[i]), 1.0, None) for i in range(X.shape[0])]


class MultiTaskCBFNet(ClassifierMixin, BaseEstimator):
    """Joint CBF synthesis (``transform``) and 4-class diagnosis (``predict``).

    Inputs are mean-normalised 8-channel MRI batches of shape
    ``(N, 8, m, n, p)``; targets for ``fit`` are class labels plus a PET CBF
    batch ``(N, 1, m, n, p)`` passed as ``pet``.

    Parameters
    ----------
    base_width, num_scales : int
        Synthesis encoder width at full resolution and number of scales.
    shared_stem : bool
        Put one convolution shared by both branches in front of them.
    lr, batch_size, max_epochs, patience : training schedule.
    val_fraction : float
        Share of the fit data held out for early stopping when no explicit
        validation set is passed.
    w1, w2, w3, w4, psnr_sign : translation loss weights.
    seed : int
    """

    def __init__(self, base_width=8, num_scales=3, shared_stem=False, lr=2e-4, batch_size=4, max_epochs=30,
                 patience=10, val_fraction=0.1, w1=0.15, w2=0.15, w3=0.60, w4=0.20, psnr_sign=-1, seed=0):
        self.base_width = base_width
        self.num_scales = num_scales
        self.shared_stem = shared_stem
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.w1 = w1
        self.w2 = w2
        self.w3 = w3
        self.w4 = w4
        self.psnr_sign = psnr_sign
        self.seed = seed

    def _configs(self, dims):
        model_cfg = ModelConfig(
            synthesis=SynthesisConfig(input_dims=dims, base_width=self.base_width, num_scales=self.num_scales),
            diagnosis=DiagnosisConfig(input_dims=dims),
            shared_stem=self.shared_stem,
        )
        weights = LossWeights(self.w1, self.w2, self.w3, self.w4, self.psnr_sign)
        train_cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                                patience=self.patience, seed=self.seed, weights=weights)
        return model_cfg, train_cfg

    def fit(self, X, y, pet=None, X_val=None, y_val=None, pet_val=None):
        X = check_mri_batch(X)
        pet = check_pet_batch(pet, X)
        y = check_labels(y, X.shape[0])
        dims = tuple(X.shape[2:])
        model_cfg, train_cfg = self._configs(dims)
        if X_val is None:
            n_val = max(1, int(round(self.val_fraction * X.shape[0])))
            if n_val >= X.shape[0]:
                raise ValueError("too few volumes to hold out a validation set")
            order = np.random.default_rng(self.seed).permutation(X.shape[0])
            val_idx, tr_idx = order[:n_val], order[n_val:]
            train_set = _samples(X[tr_idx], pet[tr_idx], y[tr_idx])
            val_set = _samples(X[val_idx], pet[val_idx], y[val_idx])
        else:
            X_val = check_mri_batch(X_val, dims)
            train_set = _samples(X, pet, y)
            val_set = _samples(X_val, check_pet_batch(pet_val, X_val), check_labels(y_val, X_val.shape[0]))
        self.model_ = build_model(model_cfg, seed=self.seed, weights=train_cfg.weights)
        self.history_ = train(self.model_, train_set, val_set, train_cfg)
        self.classes_ = np.arange(len(ClassLabel))
        self.class_names_ = [c.name for c in ClassLabel]
        self.input_dims_ = dims
        return self

    def _run(self, X, batch_size=None):
        check_is_fitted(self, "model_")
        X = check_mri_batch(X, self.input_dims_)
        bs = batch_size or self.batch_size
        outs = [predict(self.model_, X[i:i + bs]) for i in range(0, X.shape[0], bs)]
        return np.concatenate([o[0] for o in outs]), np.concatenate([o[1] for o in outs])

    def transform(self, X) -> np.ndarray:
        """Synthesised CBF, shape (N, 1, m, n, p), in the targets' normalised units."""
        return self._run(X)[0]

    def predict_proba(self, X) -> np.ndarray:
        return self._run(X)[1]

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)
