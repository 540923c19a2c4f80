"""Machine unlearning of uplink inter-user interference in an SNR classifier."""
from .cost import CostConfig, CostReport, cost_report
from .dataset import CANONICAL_CASES, CaseConfig, CorpusConfig, SiiqDataset, generate_corpus, load, save
from .estimator import CnnClassifier
from .learn import (EnsembleModel, EvalReport, TrainConfig, ensemble_unlearn, evaluate, relearn_retain,
                    shard_dataset, train_ensemble, train_original, unlearn_finetune)
from .mia import LossThresholdAttack, MiaReport, mia_score

__version__ = "0.1.0"
