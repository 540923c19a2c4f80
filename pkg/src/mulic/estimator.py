"""scikit-learn style wrapper around the hand-written CNN."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import nn
from .rng import substream

EVAL_CHUNK = 256


def check_maps(X, map_size=None):
    """Coerce ``X`` to a float64 ``[n, 1, A, A]`` array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1 or X.shape[2] != X.shape[3]:
        raise ValueError(f"expected maps shaped [n, A, A] or [n, 1, A, A], got {X.shape}")
    if map_size is not None and X.shape[2] != map_size:
        raise ValueError(f"expected {map_size}x{map_size} maps, got {X.shape[2]}x{X.shape[3]}")
    if X.shape[0] == 0:
        raise ValueError("empty input")
    if not np.isfinite(X).all():
        raise ValueError("maps contain non-finite values")
    return X


def check_labels(y, n, n_classes):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes - 1}]")
    return y


class CnnClassifier(ClassifierMixin, BaseEstimator):
    """SNR-class CNN trained with mini-batch Adam.

    Parameters
    ----------
    lr : float
        Adam step size.
    epochs : int
        Passes over the training data per call to :meth:`fit`.
    batch_size : int
    random_state : int
        Seeds weight init (stream ``"init"``) and per-epoch shuffles
        (stream ``"shuffle"``).
    shuffle : bool
    warm_start : bool
        When True and the model is already fitted, :meth:`fit` continues
        from the current weights with a fresh Adam state.
    n_classes, channels, hidden : int
        Architecture sizes.

    Attributes
    ----------
    params_ : CnnParams
    history_ : list of dict
        Per-epoch mean training loss and training accuracy of the last fit.
    n_samples_seen_ : int
        Training samples read by the last fit.
    """

    def __init__(self, lr=1e-3, epochs=50, batch_size=64, random_state=0, shuffle=True,
                 warm_start=False, n_classes=5, channels=32, hidden=128):
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.shuffle = shuffle
        self.warm_start = warm_start
        self.n_classes = n_classes
        self.channels = channels
        self.hidden = hidden

    def _validate_hyperparams(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def fit(self, X, y, epoch_callback=None):
        self._validate_hyperparams()
        X = check_maps(X)
        y = check_labels(y, X.shape[0], self.n_classes)
        continuing = self.warm_start and hasattr(self, "params_")
        if not continuing:
            self.params_ = nn.init_params(
                substream(self.random_state, "init"), X.shape[2], self.channels, self.hidden, self.n_classes,
            )
            self.classes_ = np.arange(self.n_classes)
            self.map_size_ = X.shape[2]
        elif X.shape[2] != self.map_size_:
            raise ValueError(f"model was fitted on {self.map_size_}x{self.map_size_} maps")
        # fine-tuning never inherits optimizer moments
        self.adam_ = nn.AdamState.fresh(self.params_)
        self.history_ = []
        self.n_samples_seen_ = 0
        n = X.shape[0]
        for epoch in range(self.epochs):
            order = (substream(self.random_state, "shuffle", epoch).permutation(n)
                     if self.shuffle else np.arange(n))
            loss_sum = 0.0
            correct = 0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                xb, yb = X[idx], y[idx]
                res = nn.forward(self.params_, xb)
                loss, per_sample = nn.cross_entropy(res.probs, yb)
                grads = nn.backward(self.params_, res.cache, yb)
                nn.adam_step(self.params_, grads, self.adam_, self.lr)
                loss_sum += per_sample.sum()
                correct += int((res.probs.argmax(axis=1) == yb).sum())
                self.n_samples_seen_ += len(idx)
            self.history_.append({"epoch": epoch + 1, "loss": loss_sum / n, "accuracy": correct / n})
            if epoch_callback is not None:
                epoch_callback(self, epoch)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("CnnClassifier is not fitted yet")

    def predict_proba(self, X):
        self._check_fitted()
        X = check_maps(X, self.map_size_)
        out = [nn.forward(self.params_, X[i:i + EVAL_CHUNK]).probs for i in range(0, len(X), EVAL_CHUNK)]
        return np.concatenate(out)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def sample_losses(self, X, y):
        """Per-sample cross-entropy, the membership-inference feature."""
        probs = self.predict_proba(X)
        y = check_labels(y, probs.shape[0], self.n_classes)
        return nn.cross_entropy(probs, y)[1]

    @classmethod
    def from_params(cls, params, **kwargs):
        """Wrap existing weights (e.g. from a checkpoint) as a fitted estimator."""
        est = cls(n_classes=params.fc2_w.shape[0], channels=params.conv_w.shape[0], hidden=params.fc1_w.shape[0], **kwargs)
        est.params_ = params
        est.classes_ = np.arange(est.n_classes)
        side = int(round(np.sqrt(params.fc1_w.shape[1] // params.conv_w.shape[0])))
        est.map_size_ = side + params.kernel - 1
        est.history_ = []
        return est
