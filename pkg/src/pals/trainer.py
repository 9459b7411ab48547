"""Training loop: pseudo-label, train on reliable pairs, augment candidates.

Also hosts the comparison baselines and the metric/summary writers used by
the CLI.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import ConfigError, Dataset, check_rate
from .loss import AugSpec, LossSpec, augment, final_batch_loss, smooth_labels
from .model import Model, OptState, forward, init_model, sgd_step
from .pseudo import knn_query, pseudo_label_step

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lambda", "m", "n_selected", "n_correct", "pseudo_acc",
                  "train_loss", "test_acc")
METHODS = ("pals", "supervised", "naive", "knn_majority")


@dataclass(frozen=True)
class RunConfig:
    k: int = 15
    delta: float = 0.25
    zeta: float = 1.0
    smoothing: float = 0.5
    lambda_max: float = 0.45
    lambda_min: float = 0.35
    q: float = 0.0
    eta: float = 0.0
    epochs: int = 150
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-3
    mixup: bool = True
    cr: bool = True
    seed: int = 0
    hidden: tuple = (64, 32)
    weak_sigma: float = 0.05
    strong_sigma: float = 0.2
    drop_frac: float = 0.25

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError("delta must lie in [0, 1]")
        if self.zeta <= 0:
            raise ConfigError("zeta must be positive")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError("smoothing must lie in [0, 1)")
        if not 0.0 <= self.lambda_min <= self.lambda_max <= 1.0:
            raise ConfigError("need 0 <= lambda_min <= lambda_max <= 1")
        check_rate("q", self.q)
        check_rate("eta", self.eta)
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < (2 if self.mixup else 1):
            raise ConfigError("batch_size must be >= 2 with mixup, >= 1 otherwise")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden sizes must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")
        try:
            self.aug_spec().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def aug_spec(self) -> AugSpec:
        return AugSpec(self.weak_sigma, self.strong_sigma, self.drop_frac)

    def loss_spec(self) -> LossSpec:
        return LossSpec(self.smoothing, self.zeta, self.mixup, self.cr, self.aug_spec())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(int(h) for h in d["hidden"])
        return cls(**d)


PRESETS = {
    "desk": RunConfig(),
    "full": RunConfig(epochs=500, lr=0.1),
}


@dataclass
class EpochMetrics:
    epoch: int
    lam: float
    m: int
    n_selected: int
    n_correct: int
    pseudo_acc: float
    train_loss: float
    test_acc: float

    def row(self) -> list:
        return [self.epoch, self.lam, self.m, self.n_selected, self.n_correct,
                self.pseudo_acc, self.train_loss, self.test_acc]


def lambda_schedule(t: int, t_max: int, lam_max: float = 0.45, lam_min: float = 0.35) -> float:
    """Linear decay from ``lam_max`` at epoch 1 to ``lam_min`` at ``t_max``."""
    if t_max <= 1:
        return lam_max
    return lam_max - (lam_max - lam_min) * (t - 1) / (t_max - 1)


def augment_candidates(model: Model, x: np.ndarray, original: np.ndarray, lam: float,
                       rng: np.random.Generator, aug: AugSpec = AugSpec(),
                       scale: np.ndarray | float = 1.0) -> np.ndarray:
    """Working candidate sets for the next epoch.

    Starts from ``original`` every time and adds the top-1 prediction on a
    weakly augmented view whenever its probability exceeds ``lam``.
    """
    p = forward(model, augment(x, "weak", aug, rng, scale))[1]
    top = np.argmax(p, axis=1)
    confident = np.flatnonzero(p[np.arange(len(p)), top] > lam)
    working = np.array(original, dtype=bool, copy=True)
    working[confident, top[confident]] = True
    return working


def evaluate(model: Model, ds: Dataset) -> float:
    pred = np.argmax(forward(model, ds.features)[1], axis=1)
    return float(np.mean(pred == ds.true_labels))


@dataclass
class TrainState:
    config: RunConfig
    train: Dataset
    test: Dataset | None
    model: Model
    opt: OptState
    working: np.ndarray
    scale: np.ndarray
    rngs: dict
    epoch: int = 0
    history: list = field(default_factory=list)


def init_state(config: RunConfig, train: Dataset, test: Dataset | None = None) -> TrainState:
    config.validate()
    if config.epochs > 0 and config.k >= train.n:
        raise ConfigError(f"k={config.k} needs more than {train.n} samples")
    if test is not None and (test.dim != train.dim or test.num_classes != train.num_classes):
        raise ConfigError("train and test datasets disagree on dimensions")
    ss = np.random.SeedSequence(config.seed)
    names = ("init", "shuffle", "loss", "augment", "labels")
    rngs = {name: np.random.default_rng(child) for name, child in zip(names, ss.spawn(len(names)))}
    sizes = (train.dim, *config.hidden, train.num_classes)
    model = init_model(sizes, rngs["init"])
    opt = OptState(config.lr, config.momentum, config.weight_decay, config.epochs)
    scale = train.features.std(axis=0)
    return TrainState(config, train, test, model, opt, train.candidates.copy(), scale, rngs)


def _train_pairs(state: TrainState, idx: np.ndarray, labels: np.ndarray) -> float:
    """One pass of minibatch SGD over the given (sample, label) pairs."""
    cfg = state.config
    if idx.size == 0:
        return math.nan
    state.opt.epoch = state.epoch - 1
    order = state.rngs["shuffle"].permutation(idx.size)
    idx, labels = idx[order], labels[order]
    targets = smooth_labels(labels, cfg.smoothing, state.train.num_classes)
    x_all = state.train.features
    spec = cfg.loss_spec()
    losses = []
    for start in range(0, idx.size, cfg.batch_size):
        sl = slice(start, start + cfg.batch_size)
        loss, grads = final_batch_loss(state.model, x_all[idx[sl]], targets[sl], spec,
                                       state.rngs["loss"], state.scale)
        sgd_step(state.model, grads, state.opt)
        losses.append(loss)
    return float(np.mean(losses))


def _test_acc(state: TrainState) -> float:
    return evaluate(state.model, state.test) if state.test is not None else math.nan


def run_epoch(state: TrainState) -> EpochMetrics:
    """Pseudo-label with current features, train on the reliable set, then
    rebuild the working candidate sets for the next epoch."""
    cfg, ds = state.config, state.train
    state.epoch += 1
    t = state.epoch
    z = forward(state.model, ds.features)[0]
    ps = pseudo_label_step(z, state.working, cfg.k, cfg.delta)
    if ps.n_selected == 0:
        log.info("epoch %d: no reliable pairs, skipping updates", t)
    train_loss = _train_pairs(state, ps.reliable_idx, ps.reliable_labels)
    lam = lambda_schedule(t, cfg.epochs, cfg.lambda_max, cfg.lambda_min)
    state.working = augment_candidates(state.model, ds.features, ds.candidates, lam,
                                       state.rngs["augment"], cfg.aug_spec(), state.scale)
    truth = ds.true_labels
    metrics = EpochMetrics(
        epoch=t, lam=lam, m=ps.budget, n_selected=ps.n_selected,
        n_correct=int(np.sum(truth[ps.reliable_idx] == ps.reliable_labels)),
        pseudo_acc=float(np.mean(ps.pseudo_labels == truth)),
        train_loss=train_loss, test_acc=_test_acc(state),
    )
    state.history.append(metrics)
    return metrics


@dataclass
class TrainResult:
    method: str
    model: Model | None
    history: list
    test_acc: float


def run_training(config: RunConfig, train: Dataset, test: Dataset | None = None) -> TrainResult:
    state = init_state(config, train, test)
    for _ in range(config.epochs):
        m = run_epoch(state)
        log.debug("epoch %d n_sel=%d correct=%d test=%.4f", m.epoch, m.n_selected,
                  m.n_correct, m.test_acc)
    return TrainResult("pals", state.model, state.history, _test_acc(state))


def _run_label_baseline(method: str, config: RunConfig, train: Dataset,
                        test: Dataset | None) -> TrainResult:
    # baselines train with plain smoothed cross-entropy: no mixup, no consistency term
    config = replace(config, mixup=False, cr=False)
    state = init_state(config, train, test)
    n = train.n
    idx = np.arange(n)
    cand = train.candidates
    for _ in range(config.epochs):
        state.epoch += 1
        if method == "supervised":
            labels = train.true_labels
        else:
            # uniform draw among each sample's candidates
            u = state.rngs["labels"].random(n)
            counts = cand.sum(axis=1)
            pick = np.minimum((u * counts).astype(np.int64), counts - 1)
            labels = np.argmax(np.cumsum(cand, axis=1) > pick[:, None], axis=1)
        loss = _train_pairs(state, idx, labels)
        correct = int(np.sum(labels == train.true_labels))
        state.history.append(EpochMetrics(state.epoch, math.nan, 0, n, correct, correct / n,
                                          loss, _test_acc(state)))
    return TrainResult(method, state.model, state.history, _test_acc(state))


def baseline_supervised(config: RunConfig, train: Dataset, test: Dataset | None = None) -> TrainResult:
    """Oracle upper bound: the same objective trained on hidden true labels."""
    return _run_label_baseline("supervised", config, train, test)


def baseline_naive_ce(config: RunConfig, train: Dataset, test: Dataset | None = None) -> TrainResult:
    """One uniformly drawn candidate per sample, redrawn every epoch."""
    return _run_label_baseline("naive", config, train, test)


def knn_majority_predict(train: Dataset, queries: np.ndarray, k: int) -> np.ndarray:
    nbrs = knn_query(train.features, queries, k)
    votes = np.zeros((len(queries), train.num_classes))
    for j in range(k):
        votes += train.candidates[nbrs.indices[:, j]]
    return np.argmax(votes, axis=1)


def baseline_knn_majority(config: RunConfig, train: Dataset, test: Dataset) -> TrainResult:
    """Unweighted candidate vote among raw-feature neighbours; no training."""
    pred = knn_majority_predict(train, test.features, config.k)
    return TrainResult("knn_majority", None, [], float(np.mean(pred == test.true_labels)))


def run_method(method: str, config: RunConfig, train: Dataset, test: Dataset | None) -> TrainResult:
    runners = {"pals": run_training, "supervised": baseline_supervised,
               "naive": baseline_naive_ce, "knn_majority": baseline_knn_majority}
    if method not in runners:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return runners[method](config, train, test)


def write_metrics_csv(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for m in history:
            writer.writerow(m.row())


def read_metrics_csv(path) -> list[EpochMetrics]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(EpochMetrics(int(row["epoch"]), float(row["lambda"]), int(row["m"]),
                                    int(row["n_selected"]), int(row["n_correct"]),
                                    float(row["pseudo_acc"]), float(row["train_loss"]),
                                    float(row["test_acc"])))
    return out


def write_summary(result: TrainResult, config: RunConfig, train: Dataset, path,
                  wall_time: float, extra: dict | None = None) -> dict:
    summary = {
        "method": result.method,
        "oracle": result.method == "supervised",
        "config": config.to_dict(),
        "seed": config.seed,
        "q": config.q,
        "eta": config.eta,
        "num_classes": train.num_classes,
        "dataset_hash": train.content_hash(),
        "final_test_acc": result.test_acc,
        "epochs_run": len(result.history),
        "wall_time_s": wall_time,
        **(extra or {}),
    }
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def timed(fn, *args):
    start = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - start

