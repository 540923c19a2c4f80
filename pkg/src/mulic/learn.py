"""Original (Q), relearned-retain (Q°) and unlearned (Q') models, evaluation, ensembles."""
import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import Partition, SiiqDataset
from .estimator import CnnClassifier
from .nn import cross_entropy


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def estimator(self, **overrides):
        kw = dict(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                  random_state=self.seed, shuffle=self.shuffle)
        kw.update(overrides)
        return CnnClassifier(**kw)


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray
    per_sample_losses: np.ndarray
    subset_name: str
    predictions: np.ndarray = field(default=None, repr=False)

    def to_json(self):
        return json.dumps({
            "subset": self.subset_name,
            "accuracy": round(float(self.accuracy), 10),
            "count": int(self.confusion.sum()),
            "mean_loss": round(float(self.per_sample_losses.mean()), 10),
            "confusion": self.confusion.tolist(),
        }, indent=2) + "\n"

    def confusion_csv(self):
        n = self.confusion.shape[0]
        rows = ["true\\pred," + ",".join(f"class{j}" for j in range(n))]
        rows += [f"class{i}," + ",".join(str(int(c)) for c in self.confusion[i]) for i in range(n)]
        return "\n".join(rows) + "\n"


def _require(part, what):
    if part is None or len(part) == 0:
        raise ValueError(f"{what} partition is empty")


def train_original(dataset, cfg):
    """Fit Q on retain ∪ forget."""
    _require(dataset.retain, "retain")
    _require(dataset.forget, "forget")
    X = np.concatenate([dataset.retain.grids, dataset.forget.grids])[:, None]
    y = np.concatenate([dataset.retain.labels, dataset.forget.labels])
    return cfg.estimator().fit(X, y)


def relearn_retain(dataset, cfg):
    """Fit Q° from scratch on the retain partition only."""
    _require(dataset.retain, "retain")
    return cfg.estimator().fit(dataset.retain.X, dataset.retain.labels)


def unlearn_finetune(q, dataset, cfg, epochs=None):
    """Q' = Q fine-tuned on the retain partition with a fresh Adam state.

    ``epochs`` defaults to ``cfg.epochs``; zero returns an unchanged copy of Q.
    """
    _require(dataset.retain, "retain")
    epochs = cfg.epochs if epochs is None else epochs
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    qp = copy.deepcopy(q)
    qp.set_params(lr=cfg.lr, epochs=epochs, batch_size=cfg.batch_size, random_state=cfg.seed,
                  shuffle=cfg.shuffle, warm_start=True)
    if epochs == 0:
        return qp
    return qp.fit(dataset.retain.X, dataset.retain.labels)


def _as_arrays(maps):
    if isinstance(maps, Partition):
        return maps.grids, maps.labels, maps.name
    maps = list(maps)
    if not maps:
        raise ValueError("cannot evaluate an empty map list")
    return np.stack([m.grid for m in maps]), np.array([m.label for m in maps]), "maps"


def evaluate(model, maps, subset_name=None, n_classes=5):
    """Accuracy, confusion matrix (rows = true class) and per-sample losses."""
    X, y, default_name = _as_arrays(maps)
    if len(y) == 0:
        raise ValueError("cannot evaluate an empty partition")
    probs = model.predict_proba(X)
    pred = probs.argmax(axis=1)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    _, losses = cross_entropy(probs, y)
    return EvalReport(
        accuracy=float(np.trace(confusion) / confusion.sum()),
        confusion=confusion,
        per_sample_losses=losses,
        subset_name=subset_name or default_name,
        predictions=pred,
    )


# -- ensembles ----------------------------------------------------------------


class EnsembleModel:
    """Sub-models trained on disjoint shards, combined by averaging class probabilities."""

    def __init__(self, submodels, subdataset_ids=None):
        submodels = list(submodels)
        ids = list(range(len(submodels))) if subdataset_ids is None else list(subdataset_ids)
        if len(ids) != len(submodels):
            raise ValueError("need one sub-dataset id per sub-model")
        if not submodels:
            raise ValueError("ensemble needs at least one sub-model")
        self.submodels = submodels
        self.subdataset_ids = ids

    def __len__(self):
        return len(self.submodels)

    def predict_proba(self, X):
        return np.mean([m.predict_proba(X) for m in self.submodels], axis=0)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)


def _subset(part, idx, name):
    return Partition(name, part.membership, part.grids[idx], part.labels[idx], part.sinr_db[idx], part.interfered[idx])


def shard_dataset(dataset, M, interfered_index):
    """Split retain into ``M`` shards; only shard ``interfered_index`` also receives the forget set."""
    if not 0 <= interfered_index < M:
        raise IndexError(f"interfered index {interfered_index} outside 0..{M - 1}")
    shards = []
    for j, idx in enumerate(np.array_split(np.arange(len(dataset.retain)), M)):
        retain = _subset(dataset.retain, idx, f"retain/{j}")
        if j == interfered_index:
            forget = dataset.forget
        else:
            forget = _subset(dataset.forget, np.arange(0), f"forget/{j}")
        shards.append(SiiqDataset(retain, forget, {}, {"shard": j}))
    return shards


def train_ensemble(shards, cfg):
    models = []
    for j, shard in enumerate(shards):
        X = np.concatenate([shard.retain.grids, shard.forget.grids])[:, None]
        y = np.concatenate([shard.retain.labels, shard.forget.labels])
        models.append(TrainConfig(cfg.lr, cfg.epochs, cfg.batch_size, cfg.seed + j, cfg.shuffle).estimator().fit(X, y))
    return EnsembleModel(models, list(range(len(shards))))


def ensemble_unlearn(ensemble, interfered_index, shards, cfg, epochs=None):
    """Fine-tune only sub-model ``interfered_index`` on its shard's retain set."""
    if not 0 <= interfered_index < len(ensemble):
        raise IndexError(f"interfered index {interfered_index} outside 0..{len(ensemble) - 1}")
    shard = shards[interfered_index] if isinstance(shards, (list, tuple)) else shards
    submodels = list(ensemble.submodels)
    submodels[interfered_index] = unlearn_finetune(submodels[interfered_index], shard, cfg, epochs)
    return EnsembleModel(submodels, ensemble.subdataset_ids)
