"""scikit-learn style wrappers.

``X`` is a stack of 2D slices with shape (n_slices, H, W) and ``y`` the
matching integer masks. Transformers map slices to network inputs; the
segmenter trains on them and predicts masks, optionally adapting to each
test slice first.
"""
import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .gmr_core import gmr_stack
from .pitta import AdaptationConfig, PITTAAdapter
from .train import TrainConfig, train


def check_slices(X, min_size=3):
    """Return ``X`` as a float64 (n, H, W) stack of finite slices."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected slices of shape (n, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no slices given")
    if min(X.shape[1:]) < min_size:
        raise ValueError(f"slices must be at least {min_size}x{min_size}, got {X.shape[1:]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("slices contain NaN or Inf")
    return X


def check_masks(y, X=None, num_classes=None):
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("masks must hold integer class indices")
    y = y.astype(np.int64)
    if X is not None and y.shape != np.shape(X):
        raise ValueError(f"masks {y.shape} do not match slices {np.shape(X)}")
    if y.size and y.min() < 0:
        raise ValueError("negative class index in masks")
    if num_classes is not None and y.size and y.max() >= num_classes:
        raise ValueError(f"class index {y.max()} >= num_classes={num_classes}")
    return y


def minmax_slices(X):
    X = check_slices(X)
    lo = X.min(axis=(1, 2), keepdims=True)
    span = X.max(axis=(1, 2), keepdims=True) - lo
    return np.where(span > 0, (X - lo) / np.where(span > 0, span, 1.0), 0.0)


class GradientMapTransformer(TransformerMixin, BaseEstimator):
    """Stateless transformer returning the gradient map of every slice."""

    def fit(self, X, y=None):
        X = check_slices(X)
        self.slice_shape_ = X.shape[1:]
        return self

    def transform(self, X):
        return gmr_stack(check_slices(X))


class SliceScaler(TransformerMixin, BaseEstimator):
    """Per-slice min-max scaling to [0, 1]; the raw-intensity baseline input."""

    def fit(self, X, y=None):
        X = check_slices(X)
        self.slice_shape_ = X.shape[1:]
        return self

    def transform(self, X):
        return minmax_slices(X)


class PassThrough(TransformerMixin, BaseEstimator):
    """Identity; for slices that are already gradient maps."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return check_slices(X)


REPRESENTATIONS = {"gmr": GradientMapTransformer, "raw": SliceScaler, "precomputed": PassThrough}


def represent(X, kind):
    if kind not in REPRESENTATIONS:
        raise ValueError(f"representation must be one of {sorted(REPRESENTATIONS)}")
    return REPRESENTATIONS[kind]().fit_transform(X)


def _dice_scores(pred, truth, classes):
    out = []
    for c in classes:
        a, b = pred == c, truth == c
        denom = a.sum() + b.sum()
        out.append(1.0 if denom == 0 else 2.0 * np.logical_and(a, b).sum() / denom)
    return out


class GMRSegmenter(ClassifierMixin, BaseEstimator):
    """Slice segmenter trained on one modality, optionally adapted at test time.

    Parameters
    ----------
    representation : {'gmr', 'raw'}
        Network input: gradient maps, or min-max scaled intensities.
    profile : {'full', 'tiny'}
        Architecture size.
    adaptation : AdaptationConfig, dict or None
        When given, :meth:`predict` adapts a copy of the network to each
        slice before labelling it.
    """

    def __init__(self, representation="gmr", profile="full", num_classes=None,
                 batch_size=24, learning_rate=1e-4, iterations=10000, augment=True,
                 augmentation=None, adaptation=None, random_state=0):
        self.representation = representation
        self.profile = profile
        self.num_classes = num_classes
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.augment = augment
        self.augmentation = augmentation
        self.adaptation = adaptation
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           iterations=self.iterations, seed=int(self.random_state or 0),
                           augment=self.augment, augmentation=dict(self.augmentation or {}),
                           profile=self.profile)

    def fit(self, X, y, on_step=None):
        X = check_slices(X)
        y = check_masks(y, X, self.num_classes)
        inputs = represent(X, self.representation)
        ckpt = train(inputs, y, self._train_config(), num_classes=self.num_classes,
                     on_step=on_step, metadata={"representation": self.representation})
        self._set_checkpoint(ckpt)
        return self

    def _set_checkpoint(self, ckpt):
        self.checkpoint_ = ckpt
        self.model_ = ckpt.build_model()
        self.class_prior_ = ckpt.class_prior
        self.classes_ = np.arange(ckpt.architecture.num_classes)
        self.n_classes_ = len(self.classes_)

    @classmethod
    def from_checkpoint(cls, ckpt, **params):
        params.setdefault("representation", ckpt.metadata.get("representation", "gmr"))
        est = cls(num_classes=ckpt.architecture.num_classes, **params)
        est._set_checkpoint(ckpt)
        return est

    def _adaptation_config(self):
        a = self.adaptation
        if a is None or isinstance(a, AdaptationConfig):
            return a
        return AdaptationConfig(**a)

    def _inputs(self, X):
        check_is_fitted(self, "model_")
        X = check_slices(X)
        if X.shape[1:] != tuple(self.checkpoint_.architecture.input_size):
            raise ValueError(f"slice shape {X.shape[1:]} does not match the trained "
                             f"input size {self.checkpoint_.architecture.input_size}")
        return represent(X, self.representation)

    @torch.no_grad()
    def predict_proba(self, X):
        """Unadapted per-pixel class probabilities, shape (n, C, H, W)."""
        inputs = self._inputs(X)
        self.model_.eval()
        dtype = next(self.model_.parameters()).dtype
        out = []
        for s in inputs:
            logits = self.model_(torch.as_tensor(s[None, None]).to(dtype))
            out.append(torch.softmax(logits, dim=1)[0].numpy().astype(np.float64))
        return np.stack(out)

    def predict(self, X, return_traces=False):
        cfg = self._adaptation_config()
        if cfg is None:
            pred = self.predict_proba(X).argmax(axis=1)
            return (pred, []) if return_traces else pred
        inputs = self._inputs(X)
        adapter = PITTAAdapter(self.model_, self.class_prior_, cfg)
        pred, traces = adapter.predict(inputs)
        return (pred, traces) if return_traces else pred

    def score(self, X, y, sample_weight=None):
        """Mean foreground Dice over slices pooled together."""
        y = check_masks(y)
        pred = self.predict(X)
        return float(np.mean(_dice_scores(pred, y, self.classes_[1:])))

    def __sklearn_is_fitted__(self):
        return hasattr(self, "model_")


__all__ = ["GradientMapTransformer", "SliceScaler", "GMRSegmenter", "check_slices",
           "check_masks", "represent", "NotFittedError"]
