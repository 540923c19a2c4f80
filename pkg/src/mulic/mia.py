"""Loss-based membership inference: 1-D logistic attack scored by stratified k-fold CV."""
import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .learn import _as_arrays
from .rng import substream


class DegenerateFitError(ValueError):
    pass


@dataclass
class LossSamples:
    """Per-sample losses with membership labels (1 = forget set, 0 = test set)."""

    loss: np.ndarray
    member: np.ndarray

    def __post_init__(self):
        self.loss = np.asarray(self.loss, dtype=np.float64)
        self.member = np.asarray(self.member, dtype=np.int64)
        if self.loss.shape != self.member.shape or self.loss.ndim != 1:
            raise ValueError("loss and member must be 1-D arrays of equal length")
        if not np.isfinite(self.loss).all():
            raise ValueError("losses must be finite")

    def __len__(self):
        return len(self.loss)


@dataclass
class MiaReport:
    score: float
    fold_scores: list
    model_name: str = ""

    def to_json(self, **extra):
        doc = {"model": self.model_name, "score": round(self.score, 5),
               "fold_scores": [round(s, 10) for s in self.fold_scores]}
        doc.update(extra)
        return json.dumps(doc, indent=2) + "\n"


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_fit(loss, member, iterations=1000, lr=0.1):
    """Full-batch gradient ascent on the log-likelihood of ``sigmoid(w * loss + b)``.

    Starts from ``w = b = 0``. The step on ``w`` is divided by the feature's
    mean square (when above one) so that large raw losses cannot make the
    iteration overshoot; the fixed point is unchanged.
    """
    x = np.asarray(loss, dtype=np.float64)
    y = np.asarray(member, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise DegenerateFitError("logistic fit needs both membership labels")
    scale = max(1.0, float(np.mean(x * x)))
    w = b = 0.0
    for _ in range(iterations):
        r = y - _sigmoid(w * x + b)
        w += lr * float(np.mean(r * x)) / scale
        b += lr * float(np.mean(r))
    return w, b


class LossThresholdAttack(ClassifierMixin, BaseEstimator):
    """Logistic-regression attack on a single scalar feature (the sample loss)."""

    def __init__(self, iterations=1000, lr=0.1):
        self.iterations = iterations
        self.lr = lr

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64).reshape(len(y), -1)
        if X.shape[1] != 1:
            raise ValueError("attack takes exactly one feature")
        self.coef_, self.intercept_ = logistic_fit(X[:, 0], y, self.iterations, self.lr)
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        if not hasattr(self, "coef_"):
            raise NotFittedError("attack is not fitted")
        X = np.asarray(X, dtype=np.float64).reshape(-1)
        return self.coef_ * X + self.intercept_

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(np.int64)


def collect_losses(model, test_set, forget_set):
    Xt, yt, _ = _as_arrays(test_set)
    Xf, yf, _ = _as_arrays(forget_set)
    if len(yt) == 0 or len(yf) == 0:
        raise ValueError("test and forget sets must be non-empty")
    loss = np.concatenate([model.sample_losses(Xt, yt), model.sample_losses(Xf, yf)])
    member = np.concatenate([np.zeros(len(yt), np.int64), np.ones(len(yf), np.int64)])
    return LossSamples(loss, member)


def stratified_folds(labels, k, rng):
    """Assign each sample a fold id; per class, fold sizes differ by at most one."""
    labels = np.asarray(labels)
    folds = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        if len(idx) < k:
            raise ValueError(f"class {cls} has {len(idx)} samples, fewer than k={k} folds")
        # rotate the starting fold per class so totals stay balanced too
        folds[idx] = (np.arange(len(idx)) + offset) % k
        offset += len(idx)
    return folds


def mia_score_from_losses(samples, k=5, seed=0, iterations=1000, lr=0.1, model_name=""):
    if k < 2:
        raise ValueError("k must be >= 2")
    folds = stratified_folds(samples.member, k, substream(seed, "mia/folds"))
    scores = []
    for f in range(k):
        held = folds == f
        attack = LossThresholdAttack(iterations, lr).fit(samples.loss[~held, None], samples.member[~held])
        scores.append(float(np.mean(attack.predict(samples.loss[held]) == samples.member[held])))
    return MiaReport(float(np.mean(scores)), scores, model_name)


def mia_score(model, test_set, forget_set, k=5, seed=0, model_name=""):
    """Mean held-out accuracy of the loss attack separating forget (1) from test (0)."""
    return mia_score_from_losses(collect_losses(model, test_set, forget_set), k, seed, model_name=model_name)


def loss_histogram(losses_by_set, bins=40):
    """Shared-edge histograms of per-sample losses, one count row per named set."""
    allv = np.concatenate([np.asarray(v, dtype=np.float64) for v in losses_by_set.values()])
    hi = float(allv.max()) if allv.size and allv.max() > 0 else 1.0
    edges = np.linspace(0.0, hi, bins + 1)
    counts = {name: np.histogram(v, bins=edges)[0] for name, v in losses_by_set.items()}
    return edges, counts
