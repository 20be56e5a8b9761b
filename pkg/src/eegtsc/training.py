"""Optimisation, early stopping, grid search and the three training regimes.

Seed policy: a run with seed ``s`` draws its initialisation from the
``"init"`` streams and its batch order from the ``"shuffle"`` stream of
:func:`eegtsc.seeding.rng_stream`, nothing else.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .conditioning import ConditionedModel, ConditioningMode, make_conditioned
from .data import Dataset, check_compatible
from .metrics import RunResult, aggregate_runs, evaluate_metric
from .models import ModelFamily
from .seeding import rng_stream

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              lr: float, weight_decay: float = 0.0) -> AdamState:
    """One in-place AdamW update (decay decoupled from the gradient moments)."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        if g is None:
            g = np.zeros_like(p)
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return state


class Adam:
    def __init__(self, params, lr: float = 1e-3, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamState()

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# --------------------------------------------------------------------------
# single training run
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 500
    patience: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    alpha: Optional[float] = None
    hpo_repeats: int = 3
    eval_repeats: int = 5
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be > 0 and weight_decay >= 0")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.hpo_repeats < 1 or self.eval_repeats < 1:
            raise ValueError("repeat counts must be >= 1")


class EarlyStopping:
    """Tracks the best validation loss; signals a stop after ``patience`` epochs
    without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.best_state = None
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float, state=None) -> bool:
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_state = None if state is None else {k: v.copy() for k, v in state.items()}
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainedModel:
    model: ConditionedModel
    history: list
    config: TrainConfig
    seed: int
    best_epoch: int
    best_val_loss: float

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def predict(model: ConditionedModel, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for every record, in dataset order."""
    model.eval()
    out = []
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            s, x, _ = dataset.batch(slice(start, start + batch_size))
            out.append(model(s, x).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.spec.num_classes))


def mean_cross_entropy(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    logp = T.log_softmax(logits)
    return float(-logp[np.arange(labels.size), labels - 1].mean())


def _safe_metric(metric, logits, labels) -> float:
    try:
        return evaluate_metric(metric, logits, labels)
    except ValueError:
        return float("nan")


def split_metrics(model: ConditionedModel, dataset: Dataset, metric: str = "accuracy",
                  batch_size: int = 256, logits: Optional[np.ndarray] = None) -> dict:
    """Pooled and per-subject metric and loss for one split."""
    if logits is None:
        logits = predict(model, dataset, batch_size)
    labels = dataset.labels
    res = {
        "metric": metric,
        "pooled": _safe_metric(metric, logits, labels),
        "loss": mean_cross_entropy(logits, labels),
        "accuracy": _safe_metric("accuracy", logits, labels),
        "per_subject": {},
        "per_subject_loss": {},
    }
    if logits.shape[1] == 2:
        res["auc"] = _safe_metric("auc", logits, labels)
    for s in dataset.present_subjects():
        mask = dataset.subjects == s
        res["per_subject"][s] = _safe_metric(metric, logits[mask], labels[mask])
        res["per_subject_loss"][s] = mean_cross_entropy(logits[mask], labels[mask])
    return res


def train_epoch(model: ConditionedModel, optimizer: Adam, dataset: Dataset, batch_size: int,
                rng: np.random.Generator) -> float:
    """One pass over ``dataset`` in shuffled minibatches; returns the mean training loss."""
    model.train()
    n = len(dataset)
    perm = rng.permutation(n)
    total = 0.0
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        s, x, y = dataset.batch(idx)
        loss = T.softmax_cross_entropy(model(s, x), y)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite training loss {value}")
        optimizer.zero_grad()
        T.backward(loss)
        optimizer.step()
        total += value * idx.size
    return total / n


def train(model: ConditionedModel, splits: dict, config: TrainConfig, seed: int,
          metric: str = "accuracy", validation_loss: Optional[Callable] = None) -> TrainedModel:
    """Train with Adam and early stopping on the validation loss.

    After each epoch the mean cross-entropy over the whole validation split
    (eval mode) is recorded; training stops once ``config.patience`` epochs in
    a row fail to beat the best value, and the best epoch's parameters and
    running statistics are restored. ``validation_loss(model, epoch)`` can
    replace the measured loss (used to script stopping behaviour).
    """
    tr, va = splits["train"], splits["val"]
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("train and val splits must be non-empty")
    check_compatible([tr, va])
    optimizer = Adam(model.parameters(), config.learning_rate, config.weight_decay)
    shuffle = rng_stream(seed, "shuffle")
    stopper = EarlyStopping(config.patience)
    history = []
    for epoch in range(1, config.max_epochs + 1):
        train_loss = train_epoch(model, optimizer, tr, config.batch_size, shuffle)
        logits = predict(model, va, config.eval_batch_size)
        val_loss = mean_cross_entropy(logits, va.labels)
        if validation_loss is not None:
            val_loss = float(validation_loss(model, epoch))
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        val_metric = _safe_metric(metric, logits, va.labels)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_metric": val_metric})
        logger.debug("epoch %d train %.5f val %.5f %s %.4f", epoch, train_loss, val_loss, metric, val_metric)
        if stopper.update(epoch, val_loss, model.state_dict()):
            break
    model.load_state_dict(stopper.best_state)
    model.eval()
    return TrainedModel(model, history, config, seed, stopper.best_epoch, stopper.best_loss)


# --------------------------------------------------------------------------
# grid search
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SearchSpace:
    batch_size: tuple = (32, 64)
    learning_rate: tuple = (1e-4, 1e-5, 1e-6)
    weight_decay: tuple = (0.0, 0.01, 0.1, 0.5, 1.0)
    alpha: tuple = (0.1, 0.25, 0.5, 0.75)
    depth: tuple = (3, 4)


@dataclass(frozen=True)
class GridCell:
    learning_rate: float
    batch_size: int
    weight_decay: float
    alpha: Optional[float] = None
    depth: Optional[int] = None

    def sort_key(self) -> tuple:
        return (self.learning_rate, self.batch_size, self.weight_decay,
                -1.0 if self.alpha is None else self.alpha, -1 if self.depth is None else self.depth)

    def apply(self, config: TrainConfig) -> TrainConfig:
        return replace(config, learning_rate=self.learning_rate, batch_size=self.batch_size,
                       weight_decay=self.weight_decay, alpha=self.alpha)

    def to_dict(self) -> dict:
        return asdict(self)


def enumerate_grid(space: SearchSpace, with_alpha: bool, with_depth: bool) -> list[GridCell]:
    """Cartesian product of the search axes that apply to this mode/family."""
    alphas = space.alpha if with_alpha else (None,)
    depths = space.depth if with_depth else (None,)
    return [GridCell(lr, bs, wd, a, d) for lr, bs, wd, a, d in
            itertools.product(space.learning_rate, space.batch_size, space.weight_decay, alphas, depths)]


@dataclass
class HPOResult:
    cells: list       # [{"cell": GridCell, "losses": [...], "score": float}]
    best: GridCell

    def to_dict(self) -> dict:
        return {
            "cells": [{"cell": c["cell"].to_dict(), "losses": c["losses"], "score": c["score"]} for c in self.cells],
            "best": self.best.to_dict(),
        }


def hpo_grid(cells: Sequence[GridCell], score_fn: Callable, base_seed: int = 0, repeats: int = 3,
             jobs: int = 1) -> HPOResult:
    """Exhaustive grid search.

    ``score_fn(cell, seed)`` returns a validation loss; each cell is scored
    with seeds ``base_seed .. base_seed + repeats - 1`` and ranked by the mean.
    Ties go to the lexicographically smallest ``(lr, batch, wd, alpha, depth)``.
    """
    cells = list(cells)
    if not cells:
        raise ValueError("empty search grid")
    tasks = [(c, base_seed + r) for c in cells for r in range(repeats)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            losses = list(ex.map(score_fn, *zip(*tasks)))
    else:
        losses = [score_fn(c, s) for c, s in tasks]
    table = []
    for i, c in enumerate(cells):
        ls = [float(v) for v in losses[i * repeats:(i + 1) * repeats]]
        score = float(np.mean(ls))
        table.append({"cell": c, "losses": ls, "score": score})
    def rank(entry):
        s = entry["score"]
        return (s if math.isfinite(s) else math.inf, entry["cell"].sort_key())
    best = min(table, key=rank)["cell"]
    return HPOResult(table, best)


# --------------------------------------------------------------------------
# regimes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Trial:
    """Everything needed to train one (cell, seed); picklable for process pools."""

    splits: dict
    family: ModelFamily
    mode: ConditioningMode
    config: TrainConfig
    metric: str = "accuracy"

    def build(self, cell: GridCell, seed: int) -> ConditionedModel:
        tr = self.splits["train"]
        mode = self.mode.with_alpha(cell.alpha)
        return make_conditioned(lambda c, y: self.family.spec(c, y, cell.depth), mode,
                                tr.num_subjects, tr.num_channels, tr.num_classes, seed)

    def run(self, cell: GridCell, seed: int) -> TrainedModel:
        model = self.build(cell, seed)
        return train(model, self.splits, cell.apply(self.config), seed, self.metric)

    def score(self, cell: GridCell, seed: int) -> float:
        try:
            return self.run(cell, seed).best_val_loss
        except NumericalError:
            return math.inf


@dataclass
class ProtocolResult:
    protocol: str
    mode: str
    hpo: dict                    # subject (or "all") -> HPOResult
    runs: list                   # RunResult per repeat, covering all test subjects
    trained: list = field(default_factory=list)
    aggregate: Optional[object] = None


def _filter_splits(splits: dict, subject: int) -> dict:
    return {k: v.for_subject(subject) for k, v in splits.items()}


def _search_and_repeat(trial: Trial, space: SearchSpace, base_seed: int, jobs: int):
    with_alpha = trial.mode.uses_alpha
    cells = enumerate_grid(space, with_alpha, trial.family.has_depth)
    hpo = hpo_grid(cells, trial.score, base_seed, trial.config.hpo_repeats, jobs)
    trained = [trial.run(hpo.best, base_seed + r) for r in range(trial.config.eval_repeats)]
    return hpo, trained


def run_joint(splits: dict, family: ModelFamily, mode: ConditioningMode, space: SearchSpace = SearchSpace(),
              config: TrainConfig = TrainConfig(), base_seed: int = 0, metric: str = "accuracy",
              jobs: int = 1) -> ProtocolResult:
    """One model over all subjects (SA, CIC, CEC or SE); grid search then repeated final runs."""
    if mode.variant == "subject_specific":
        raise ValueError("use run_subject_specific for the subject-specific regime")
    check_compatible(splits.values())
    trial = Trial(splits, family, mode, config, metric)
    hpo, trained = _search_and_repeat(trial, space, base_seed, jobs)
    runs = []
    for r, tm in enumerate(trained):
        m = split_metrics(tm.model, splits["test"], metric, config.eval_batch_size)
        runs.append(RunResult(r + 1, m["per_subject"], m["pooled"], m["per_subject_loss"]))
    agg = aggregate_runs(runs) if len(runs) > 1 else None
    return ProtocolResult("joint", mode.variant, {"all": hpo}, runs, trained, agg)


def run_subject_specific(splits: dict, family: ModelFamily, space: SearchSpace = SearchSpace(),
                         config: TrainConfig = TrainConfig(), base_seed: int = 0, metric: str = "accuracy",
                         jobs: int = 1) -> ProtocolResult:
    """One subject-agnostic model per subject, each with its own grid search."""
    check_compatible(splits.values())
    mode = ConditioningMode("sa")
    hpos, trained_all = {}, []
    per_run = [dict() for _ in range(config.eval_repeats)]
    per_run_loss = [dict() for _ in range(config.eval_repeats)]
    for s in splits["test"].present_subjects():
        sub = _filter_splits(splits, s)
        if len(sub["train"]) == 0 or len(sub["val"]) == 0:
            raise ValueError(f"subject {s} has no train or val records")
        trial = Trial(sub, family, mode, config, metric)
        hpo, trained = _search_and_repeat(trial, space, base_seed, jobs)
        hpos[s] = hpo
        trained_all.append(trained)
        for r, tm in enumerate(trained):
            m = split_metrics(tm.model, sub["test"], metric, config.eval_batch_size)
            per_run[r][s] = m["per_subject"][s]
            per_run_loss[r][s] = m["per_subject_loss"][s]
    runs = [RunResult(r + 1, per_run[r], float(np.mean(list(per_run[r].values()))), per_run_loss[r])
            for r in range(config.eval_repeats)]
    agg = aggregate_runs(runs) if len(runs) > 1 else None
    return ProtocolResult("subject_specific", "sa", hpos, runs, trained_all, agg)

