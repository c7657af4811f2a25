"""scikit-learn compatible classifier around the binary networks."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .entropy import EntropyConfig, EntropyReport, entropy_report
from .models import ModelConfig, build_model, memory_report
from .quant import QuantConfig
from .training import TrainConfig, deterministic_mode, evaluate, make_optimizer, predict_logits, train_epoch


def _as_images(X, in_channels=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped [N, C, H, W] or [N, H, W], got {X.shape}")
    if in_channels is not None and X.shape[1] != in_channels:
        raise ValueError(f"model was fitted on {in_channels} channels, got {X.shape[1]}")
    return X


class BinaryNetClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier with binarized hidden convolutions.

    ``penalty_weight > 0`` adds ``penalty_weight * |target_entropy - mean filter
    entropy|`` to the cross-entropy, steering the information capacity of the
    binary filters.  ``binarize=False`` trains the same network at full
    precision.

    Inputs are float images [N, C, H, W] (or [N, H, W]) already scaled and
    normalized; labels may be any hashable values.
    """

    def __init__(self, arch="lenet", width=1.0, binarize=True, target_entropy=0.97,
                 penalty_weight=1e-4, k=5, activation_bits=4, ste_clip=1.0, epochs=10,
                 batch_size=128, lr=0.1, momentum=0.9, weight_decay=1e-4, augment=False,
                 random_state=0, deterministic=True, verbose=0):
        self.arch = arch
        self.width = width
        self.binarize = binarize
        self.target_entropy = target_entropy
        self.penalty_weight = penalty_weight
        self.k = k
        self.activation_bits = activation_bits
        self.ste_clip = ste_clip
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.augment = augment
        self.random_state = random_state
        self.deterministic = deterministic
        self.verbose = verbose

    def _entropy_config(self):
        if not self.binarize or not self.penalty_weight:
            return None
        return EntropyConfig(target=self.target_entropy, weight=self.penalty_weight, k=self.k)

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = _as_images(X)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        y_idx = np.searchsorted(self.classes_, y)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.in_channels_ = X.shape[1]
        quant = QuantConfig(activation_bits=self.activation_bits, k=self.k, ste_clip=self.ste_clip)
        mcfg = ModelConfig(arch=self.arch, num_classes=len(self.classes_), width=self.width,
                           binarize=self.binarize, in_channels=self.in_channels_, quant=quant)
        tcfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr0=self.lr,
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           entropy=self._entropy_config(), seed=self.random_state,
                           deterministic=self.deterministic, augment=self.augment)
        seed = 0 if self.random_state is None else int(self.random_state)
        self.model_ = build_model(mcfg, seed=seed)
        self.optimizer_ = make_optimizer(self.model_, tcfg)
        rng = np.random.default_rng(seed)
        train = Dataset(X, y_idx, len(self.classes_), "train")
        val = None
        if X_val is not None:
            val = Dataset(_as_images(X_val, self.in_channels_),
                          np.searchsorted(self.classes_, np.asarray(y_val)), len(self.classes_), "val")
        self.history_ = []
        with deterministic_mode(self.deterministic):
            for epoch in range(self.epochs):
                m = train_epoch(self.model_, train, tcfg, self.optimizer_, epoch, rng)
                if val is not None:
                    ev = evaluate(self.model_, val)
                    m.val_acc, m.val_loss = ev["accuracy"], ev["loss"]
                self.history_.append(m)
                if self.verbose:
                    print(f"epoch {epoch + 1}/{self.epochs} loss={m.train_loss:.4f} "
                          f"acc={m.train_acc:.4f} H={m.mean_entropy:.4f}")
        self.model_.eval()
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = _as_images(check_array(X, allow_nd=True, dtype=np.float64), self.in_channels_)
        return predict_logits(self.model_, X)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def entropy_report(self) -> EntropyReport:
        check_is_fitted(self, "model_")
        cfg = self._entropy_config() or EntropyConfig(target=self.target_entropy, weight=0.0, k=self.k)
        return entropy_report(self.model_, cfg, step=len(self.history_))

    def memory_report(self):
        check_is_fitted(self, "model_")
        return memory_report(self.model_)
