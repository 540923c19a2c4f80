import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mulic import dataset as siiq
from mulic.estimator import CnnClassifier, check_labels, check_maps
from mulic.learn import (
    EnsembleModel,
    TrainConfig,
    ensemble_unlearn,
    evaluate,
    relearn_retain,
    shard_dataset,
    train_ensemble,
    train_original,
    unlearn_finetune,
)

FAST = TrainConfig(lr=1e-3, epochs=2, batch_size=16, seed=3)


@pytest.fixture(scope="module")
def tiny():
    cfg = siiq.CorpusConfig(retain_count=60, forget_count=15, noise_variance=0.01)
    cases = (siiq.CaseConfig("clean", 1, (), 0.0, sample_count=20),)
    return siiq.generate_corpus(cfg, cases, seed=11)


class Oracle:
    """Predicts the true label with certainty."""

    def __init__(self, labels):
        self.labels = labels

    def predict_proba(self, X):
        return np.eye(5)[self.labels]


class Uniform:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def predict_proba(self, X):
        return np.eye(5)[self.rng.integers(0, 5, len(X))]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_check_helpers():
    assert check_maps(np.zeros((2, 28, 28))).shape == (2, 1, 28, 28)
    with pytest.raises(ValueError):
        check_maps(np.zeros((2, 28, 27)))
    with pytest.raises(ValueError):
        check_maps(np.zeros((0, 1, 28, 28)))
    with pytest.raises(ValueError):
        check_maps(np.full((1, 1, 28, 28), np.nan))
    with pytest.raises(ValueError):
        check_maps(np.zeros((1, 1, 26, 26)), map_size=28)
    np.testing.assert_array_equal(check_labels(np.array([0.0, 4.0]), 2, 5), [0, 4])
    with pytest.raises(ValueError):
        check_labels(np.array([0, 5]), 2, 5)
    with pytest.raises(ValueError):
        check_labels(np.array([0.5]), 1, 5)


def test_estimator_api():
    est = CnnClassifier(epochs=3, lr=0.01)
    assert est.get_params()["epochs"] == 3
    c = clone(est)
    assert c.get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, 28, 28)))


def test_fit_predict_small_maps():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 1, 10, 10))
    y = (X[:, 0, :5].sum(axis=(1, 2)) > 0).astype(int)
    est = CnnClassifier(epochs=15, batch_size=8, lr=3e-3, channels=4, hidden=16, random_state=1).fit(X, y)
    assert len(est.history_) == 15
    assert est.n_samples_seen_ == 15 * 40
    assert est.score(X, y) > 0.9
    assert est.predict_proba(X).shape == (40, 5)
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 1, 12, 12)))


def test_original_is_deterministic(tiny):
    a = train_original(tiny, FAST)
    b = train_original(tiny, FAST)
    assert a.params_.equals(b.params_)
    assert a.n_samples_seen_ == FAST.epochs * 75
    assert all(0.0 <= h["accuracy"] <= 1.0 for h in a.history_)


def test_relearn_reads_no_forget_samples(tiny):
    rr = relearn_retain(tiny, FAST)
    assert rr.n_samples_seen_ == FAST.epochs * len(tiny.retain)


def test_finetune_zero_epochs_is_identity(tiny):
    q = train_original(tiny, FAST)
    q0 = unlearn_finetune(q, tiny, FAST, epochs=0)
    assert q0.params_.equals(q.params_)
    assert q0.params_ is not q.params_


def test_finetune_leaves_q_untouched(tiny):
    q = train_original(tiny, FAST)
    snapshot = q.params_.copy()
    qp = unlearn_finetune(q, tiny, FAST, epochs=1)
    assert q.params_.equals(snapshot)
    assert not qp.params_.equals(snapshot)
    assert qp.n_samples_seen_ == len(tiny.retain)
    assert qp.adam_.step_count == int(np.ceil(len(tiny.retain) / FAST.batch_size))


def test_empty_partition_rejected(tiny):
    empty = siiq.Partition("retain", "retain", np.zeros((0, 28, 28)), np.zeros(0, int), np.zeros(0), np.zeros(0, bool))
    with pytest.raises(ValueError):
        relearn_retain(siiq.SiiqDataset(empty, tiny.forget, {}), FAST)
    with pytest.raises(ValueError):
        evaluate(Oracle([]), [])


def test_evaluate_perfect_and_chance(tiny):
    part = tiny.tests["clean"]
    rep = evaluate(Oracle(part.labels), part)
    assert rep.accuracy == 1.0
    assert np.array_equal(np.diag(rep.confusion), np.bincount(part.labels, minlength=5))
    assert rep.confusion.sum() == len(part)

    labels = np.random.default_rng(1).integers(0, 5, 625)
    maps = [siiq.IQMap(np.zeros((28, 28)), int(y), "test", 0.0) for y in labels]
    chance = evaluate(Uniform(2), maps)
    assert abs(chance.accuracy - 0.2) < 0.05
    assert chance.accuracy == np.trace(chance.confusion) / chance.confusion.sum()


def test_evaluate_losses_single_source(tiny):
    q = train_original(tiny, FAST)
    rep = evaluate(q, tiny.forget)
    np.testing.assert_array_equal(rep.per_sample_losses, q.sample_losses(tiny.forget.X, tiny.forget.labels))


def test_eval_report_outputs(tiny):
    rep = evaluate(Oracle(tiny.retain.labels), tiny.retain, "retain")
    doc = json.loads(rep.to_json())
    assert doc["subset"] == "retain" and doc["accuracy"] == 1.0
    lines = rep.confusion_csv().strip().splitlines()
    assert lines[0] == "true\\pred,class0,class1,class2,class3,class4"
    assert len(lines) == 6
    assert all(c.isdigit() for line in lines[1:] for c in line.split(",")[1:])


def test_ensemble_selective_unlearning(tiny):
    shards = shard_dataset(tiny, 3, 1)
    assert len(shards[1].forget) == len(tiny.forget)
    assert len(shards[0].forget) == 0 and len(shards[2].forget) == 0
    ens = train_ensemble(shards, FAST)
    before = [m.params_.copy() for m in ens.submodels]
    after = ensemble_unlearn(ens, 1, shards, FAST, epochs=1)
    for j in (0, 2):
        assert all(a.tobytes() == b.tobytes() for a, b in zip(after.submodels[j].params_.arrays(), before[j].arrays()))
    assert not after.submodels[1].params_.equals(before[1])
    assert ens.submodels[1].params_.equals(before[1])
    with pytest.raises(IndexError):
        ensemble_unlearn(ens, 3, shards, FAST)
    with pytest.raises(IndexError):
        shard_dataset(tiny, 3, -1)


def test_ensemble_single_member_matches_finetune(tiny):
    shards = shard_dataset(tiny, 1, 0)
    ens = train_ensemble(shards, FAST)
    direct = unlearn_finetune(ens.submodels[0], shards[0], FAST, epochs=1)
    via = ensemble_unlearn(ens, 0, shards, FAST, epochs=1)
    assert direct.params_.equals(via.submodels[0].params_)
    X = tiny.retain.X[:5]
    np.testing.assert_array_equal(via.predict_proba(X), direct.predict_proba(X))


def test_ensemble_mean_rule():
    class Fixed:
        def __init__(self, p):
            self.p = np.asarray(p, dtype=float)

        def predict_proba(self, X):
            return np.tile(self.p, (len(X), 1))

    ens = EnsembleModel([Fixed([1, 0, 0, 0, 0]), Fixed([0, 0.5, 0.5, 0, 0])])
    np.testing.assert_allclose(ens.predict_proba(np.zeros((2, 1))), [[0.5, 0.25, 0.25, 0, 0]] * 2)
    with pytest.raises(ValueError):
        EnsembleModel([Fixed([1, 0, 0, 0, 0])], [0, 1])
