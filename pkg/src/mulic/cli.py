"""Command-line driver for the unlearning experiment.

Every stage reads from and writes to one output directory::

    siiq.bin (+ .manifest.json)       generate
    models/{Q,Q_rr,Q_un}.mulc         train / relearn / unlearn
    eval/<model>/<subset>.json|.csv   eval
    mia/<model>/<case>.json           mia
    cost/cost_<i>.json|.txt           cost
    report/*.csv                      report

Exit codes: 0 success, 1 runtime failure, 2 usage, 3 invalid config,
4 missing or unreadable input.
"""
import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dataset as siiq
from . import nn
from .cost import CostConfig, cost_report
from .errors import FormatError
from .estimator import CnnClassifier
from .learn import TrainConfig, evaluate, unlearn_finetune
from .mia import collect_losses, loss_histogram, mia_score_from_losses
from .rng import derive_seed

log = logging.getLogger("mulic")

EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG, EXIT_INPUT = 1, 2, 3, 4

MODELS = ("Q", "Q_rr", "Q_un")
MODEL_LABELS = {"Q": "Q", "Q_rr": "Q°", "Q_un": "Q'"}
DATASET_FILE = "siiq.bin"

DEFAULT_COST = (
    {"user_activity_probs": [0.2, 0.3], "K": 50, "t0": 5, "M": 5},
    {"user_activity_probs": [0.1, 0.1, 0.1], "K": 30, "t0": 3, "M": 10,
     "cleansed_history": [[10, 1]], "nu": 1},
)


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus: siiq.CorpusConfig = field(default_factory=siiq.CorpusConfig)
    cases: tuple = siiq.CANONICAL_CASES
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune_epochs: int = 50
    mia_k: int = 5
    cost: tuple = DEFAULT_COST
    cost_trials: int = 100_000
    histogram_bins: int = 40

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            kw = dict(doc)
            if "corpus" in kw:
                kw["corpus"] = siiq.CorpusConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in kw["corpus"].items()})
            if "cases" in kw:
                kw["cases"] = tuple(siiq.CaseConfig(**c) for c in kw["cases"])
            if "train" in kw:
                kw["train"] = TrainConfig(**kw["train"])
            if "cost" in kw:
                kw["cost"] = tuple(kw["cost"])
            cfg = cls(**kw)
            cfg.validate()
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        return cfg

    def validate(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.finetune_epochs < 0:
            raise ConfigError("finetune_epochs must be >= 0")
        if self.mia_k < 2:
            raise ConfigError("mia_k must be >= 2")
        if self.cost_trials < 10_000:
            raise ConfigError("cost_trials must be >= 10000")
        names = [c.name for c in self.cases]
        if len(set(names)) != len(names):
            raise ConfigError("case names must be unique")
        for c in self.cost:
            try:
                CostConfig.from_dict(c)
            except (TypeError, ValueError, KeyError) as exc:
                raise ConfigError(f"invalid cost config {c}: {exc}") from None

    def to_dict(self):
        return {
            "seed": int(self.seed),
            "corpus": self.corpus.to_dict(),
            "cases": [c.to_dict() for c in self.cases],
            "train": {"lr": self.train.lr, "epochs": self.train.epochs, "batch_size": self.train.batch_size,
                      "seed": self.train.seed, "shuffle": self.train.shuffle},
            "finetune_epochs": self.finetune_epochs,
            "mia_k": self.mia_k,
            "cost": list(self.cost),
            "cost_trials": self.cost_trials,
            "histogram_bins": self.histogram_bins,
        }


def load_config(args):
    doc = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    cfg = ExperimentConfig.from_dict(doc)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        if args.epochs < 1:
            raise ConfigError("--epochs must be >= 1")
        cfg.train = replace(cfg.train, epochs=args.epochs)
    if args.finetune_epochs is not None:
        cfg.finetune_epochs = args.finetune_epochs
    if args.cases:
        wanted = [c.strip() for c in args.cases.split(",") if c.strip()]
        by_name = {c.name: c for c in cfg.cases}
        missing = [w for w in wanted if w not in by_name]
        if missing:
            raise ConfigError(f"unknown cases {missing}; configured: {sorted(by_name)}")
        cfg.cases = tuple(by_name[w] for w in wanted)
    cfg.validate()
    return cfg


# -- file helpers ---------------------------------------------------------------


def _write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump(path, doc):
    _write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _stage_cfg(cfg, name, epochs=None):
    """Training settings for one model, seeded from its own named substream."""
    t = cfg.train
    return TrainConfig(t.lr, t.epochs if epochs is None else epochs, t.batch_size,
                       derive_seed(cfg.seed, f"train/{name}"), t.shuffle)


def _load_dataset(out):
    path = out / DATASET_FILE
    if not path.exists():
        raise MissingInputError(f"{path} not found; run `generate` first")
    try:
        return siiq.load(path)
    except FormatError as exc:
        raise MissingInputError(f"{path}: {exc}") from None


def _model_path(out, name):
    return out / "models" / f"{name}.mulc"


def _load_model(out, name):
    path = _model_path(out, name)
    if not path.exists():
        raise MissingInputError(f"{path} not found")
    try:
        params, _ = nn.load_checkpoint(path)
    except FormatError as exc:
        raise MissingInputError(f"{path}: {exc}") from None
    return CnnClassifier.from_params(params)


def _save_model(out, name, model):
    path = _model_path(out, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(path, model.params_, getattr(model, "adam_", None))
    hist = [{k: round(v, 12) if isinstance(v, float) else v for k, v in h.items()} for h in model.history_]
    _dump(path.with_suffix(".history.json"),
          {"model": name, "history": hist, "samples_seen": getattr(model, "n_samples_seen_", 0)})


def _available_models(out):
    return [m for m in MODELS if _model_path(out, m).exists()]


def _epoch_logger(name):
    def cb(model, epoch):
        h = model.history_[-1]
        log.info("%s epoch %d loss %.4f acc %.4f", name, h["epoch"], h["loss"], h["accuracy"])
    return cb


def _case_test(ds, case):
    if case not in ds.tests:
        raise MissingInputError(f"dataset has no test set for case {case!r}")
    return ds.tests[case]


def _train_subsets(ds, name):
    """The training set each model saw: Q used retain and forget, the others retain only."""
    if name == "Q":
        return siiq.Partition("train", "retain", np.concatenate([ds.retain.grids, ds.forget.grids]),
                              np.concatenate([ds.retain.labels, ds.forget.labels]),
                              np.concatenate([ds.retain.sinr_db, ds.forget.sinr_db]),
                              np.concatenate([ds.retain.interfered, ds.forget.interfered]))
    return ds.retain


# -- subcommands ------------------------------------------------------------------


def cmd_generate(cfg, out):
    ds = siiq.generate_corpus(cfg.corpus, cfg.cases, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    siiq.save(ds, out / DATASET_FILE)
    log.info("wrote %s: %s", out / DATASET_FILE, ds.manifest["counts"])


def _fit(cfg, name, part):
    return _stage_cfg(cfg, name).estimator().fit(part.X, part.labels, epoch_callback=_epoch_logger(name))


def cmd_train(cfg, out):
    ds = _load_dataset(out)
    _save_model(out, "Q", _fit(cfg, "Q", _train_subsets(ds, "Q")))


def cmd_relearn(cfg, out):
    ds = _load_dataset(out)
    _save_model(out, "Q_rr", _fit(cfg, "Q_rr", ds.retain))


def cmd_unlearn(cfg, out):
    ds = _load_dataset(out)
    q = _load_model(out, "Q")
    _save_model(out, "Q_un", unlearn_finetune(q, ds, _stage_cfg(cfg, "Q_un"), epochs=cfg.finetune_epochs))


def _subsets(ds, cfg, name):
    yield "train", _train_subsets(ds, name)
    yield "retain", ds.retain
    yield "forget", ds.forget
    for case in cfg.cases:
        yield f"test_{case.name}", _case_test(ds, case.name)


def cmd_eval(cfg, out):
    ds = _load_dataset(out)
    models = _available_models(out)
    if not models:
        raise MissingInputError(f"no checkpoints under {out / 'models'}")
    for name in models:
        model = _load_model(out, name)
        for subset, part in _subsets(ds, cfg, name):
            rep = evaluate(model, part, subset)
            base = out / "eval" / name / subset
            _write(base.with_suffix(".json"), rep.to_json())
            _write(base.with_suffix(".csv"), rep.confusion_csv())
            log.info("%s %s accuracy %.4f", name, subset, rep.accuracy)


def cmd_mia(cfg, out):
    ds = _load_dataset(out)
    models = _available_models(out)
    if not models:
        raise MissingInputError(f"no checkpoints under {out / 'models'}")
    mia_seed = derive_seed(cfg.seed, "mia")
    for name in models:
        model = _load_model(out, name)
        for case in cfg.cases:
            samples = collect_losses(model, _case_test(ds, case.name), ds.forget)
            rep = mia_score_from_losses(samples, cfg.mia_k, mia_seed, model_name=name)
            _write(out / "mia" / name / f"{case.name}.json", rep.to_json(case=case.name, k=cfg.mia_k))
            log.info("%s %s MIA %.5f", name, case.name, rep.score)


def cmd_cost(cfg, out):
    seed = derive_seed(cfg.seed, "cost")
    for i, doc in enumerate(cfg.cost):
        rep = cost_report(CostConfig.from_dict(doc), cfg.cost_trials, seed + i)
        _write(out / "cost" / f"cost_{i}.json", rep.to_json())
        _write(out / "cost" / f"cost_{i}.txt", rep.table())


def _read_json(path):
    if not path.exists():
        raise MissingInputError(f"{path} not found; run the producing stage first")
    return json.loads(path.read_text())


def cmd_report(cfg, out):
    """Collate accuracy and MIA tables plus per-case loss histograms."""
    ds = _load_dataset(out)
    models = _available_models(out)
    if not models:
        raise MissingInputError(f"no checkpoints under {out / 'models'}")
    cases = [c.name for c in cfg.cases]

    rows = ["model,row," + ",".join(cases)]
    for name in models:
        for row in ("train", "test", "forget", "retain"):
            cells = []
            for case in cases:
                subset = f"test_{case}" if row == "test" else row
                acc = _read_json(out / "eval" / name / f"{subset}.json")["accuracy"]
                cells.append(f"{100.0 * acc:.2f}")
            rows.append(f"{MODEL_LABELS[name]},{row}," + ",".join(cells))
    _write(out / "report" / "table1.csv", "\n".join(rows) + "\n")

    rows = ["model," + ",".join(cases)]
    for name in models:
        scores = [_read_json(out / "mia" / name / f"{case}.json")["score"] for case in cases]
        rows.append(f"{MODEL_LABELS[name]}," + ",".join(f"{s:.5f}" for s in scores))
    _write(out / "report" / "table2.csv", "\n".join(rows) + "\n")

    loaded = {name: _load_model(out, name) for name in models}
    for case in cases:
        losses = {}
        for name, model in loaded.items():
            s = collect_losses(model, _case_test(ds, case), ds.forget)
            losses[f"{name}_test"] = s.loss[s.member == 0]
            losses[f"{name}_forget"] = s.loss[s.member == 1]
        edges, counts = loss_histogram(losses, cfg.histogram_bins)
        lines = ["bin_lo,bin_hi," + ",".join(counts)]
        for b in range(len(edges) - 1):
            lines.append(f"{edges[b]:.10g},{edges[b + 1]:.10g}," + ",".join(str(int(c[b])) for c in counts.values()))
        _write(out / "report" / f"loss_hist_{case}.csv", "\n".join(lines) + "\n")


def cmd_all(cfg, out):
    for step in (cmd_generate, cmd_train, cmd_relearn, cmd_unlearn, cmd_eval, cmd_mia, cmd_cost, cmd_report):
        log.info("== %s", step.__name__[4:])
        step(cfg, out)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "relearn": cmd_relearn,
    "unlearn": cmd_unlearn,
    "eval": cmd_eval,
    "mia": cmd_mia,
    "cost": cmd_cost,
    "report": cmd_report,
    "all": cmd_all,
}

HELP = {
    "generate": "simulate the SIIQ corpus",
    "train": "train the original model Q on retain + forget",
    "relearn": "retrain Q° from scratch on the retain set",
    "unlearn": "fine-tune Q on the retain set to obtain Q'",
    "eval": "accuracy and confusion matrices for every model and subset",
    "mia": "membership inference scores per model and case",
    "cost": "closed-form retraining cost with a Monte Carlo check",
    "report": "collate tables and loss histograms",
    "all": "run every stage in order",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="mulic", description="Machine unlearning of uplink interference.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--out", default="mulic_out", help="output directory (default: %(default)s)")
        p.add_argument("--epochs", type=int, help="training epochs (overrides config)")
        p.add_argument("--finetune-epochs", type=int, help="fine-tuning epochs for the unlearned model")
        p.add_argument("--cases", help="comma-separated case names to restrict to")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        out = Path(args.out)
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"mulic: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInputError as exc:
        print(f"mulic: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, ArithmeticError, OSError) as exc:
        print(f"mulic: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
