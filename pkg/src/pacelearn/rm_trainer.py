"""Reward-machine training, cross-validated evaluation and the grading interface."""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from . import nn_core as nn
from .dataset_gen import FoldSplit, LabeledWindow
from .seq_classifiers import (CORRECT, INCORRECT, Classifier, ModelConfig, build_model,
                              encode_windows, predict_correct_proba, save_model)
from .trace_model import Symbol, encode_sequence


@dataclass(frozen=True)
class TrainSpec:
    arch: str = "lstm"
    window: int = 20
    epochs: int = 500
    learning_rate: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    patience: int | None = 40  # stop after this many epochs without a better checkpoint
    hidden: int = 64
    d_k: int = 128
    embed_dim: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def model_config(self) -> ModelConfig:
        return ModelConfig(arch=self.arch, window=self.window, hidden=self.hidden, d_k=self.d_k,
                           embed_dim=self.embed_dim, seed=self.seed, dtype=self.dtype)


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    @property
    def accuracy(self) -> float:
        n = self.tp + self.fp + self.fn + self.tn
        return (self.tp + self.tn) / n if n else 0.0


def confusion(labels: Sequence[int], predicted_correct: Sequence[bool]) -> Metrics:
    """Confusion counts with ``correct`` (label 1) as the positive class."""
    y = np.asarray(labels, dtype=bool)
    p = np.asarray(predicted_correct, dtype=bool)
    return Metrics(int(np.sum(y & p)), int(np.sum(~y & p)), int(np.sum(y & ~p)), int(np.sum(~y & ~p)))


def predicted_correct(p_correct: np.ndarray) -> np.ndarray:
    # a probability of exactly one half is a tie and counts as incorrect
    return np.asarray(p_correct) > 0.5


@dataclass
class TrainResult:
    model: Classifier
    curves: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_f1: float = float("nan")


def _arrays(windows: Sequence[LabeledWindow], dtype) -> tuple[np.ndarray, np.ndarray]:
    X = encode_windows([w.symbols for w in windows], dtype)
    y = np.array([CORRECT if w.label == 1 else INCORRECT for w in windows], dtype=np.int64)
    return X, y


def _select(windows: Sequence[LabeledWindow], ids: Sequence[int]) -> list[LabeledWindow]:
    by_id = {w.sample_id: w for w in windows}
    return [by_id[i] for i in ids]


def train(spec: TrainSpec, split: FoldSplit, data: Sequence[LabeledWindow],
          checkpoint_path: str | Path | None = None) -> TrainResult:
    """Mini-batch Adam on the training folds, keeping the best-on-validation model.

    A checkpoint is "better" when its validation F1 is higher, or equal with a
    lower validation loss.
    """
    split.check_disjoint()
    for w in data:
        if len(w.context) != spec.window:
            raise ValueError(f"window of length {len(w.context)} does not match spec window {spec.window}")
    model = build_model(spec.model_config())
    result = TrainResult(model)
    if spec.epochs == 0:
        return result
    dtype = model.store.dtype
    Xtr, ytr = _arrays(_select(data, split.train), dtype)
    val = _select(data, split.val)
    Xva, yva = _arrays(val, dtype)
    val_labels = [w.label for w in val]
    if len(Xtr) == 0 or len(Xva) == 0:
        raise ValueError("empty training or validation fold")
    rng = np.random.default_rng(spec.seed)
    opt = nn.OptimConfig(learning_rate=spec.learning_rate)
    best_key = (-1.0, math.inf)
    best_state = model.store.state()
    stale = 0
    for epoch in range(1, spec.epochs + 1):
        order = rng.permutation(len(Xtr))
        total, count = 0.0, 0
        for lo in range(0, len(order), spec.batch_size):
            idx = order[lo:lo + spec.batch_size]
            model.store.zero_grad()
            loss = nn.softmax_cross_entropy(model.logits(Xtr[idx]), ytr[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            nn.backward(loss)
            nn.adam_step(model.store, opt)
            total += value * len(idx)
            count += len(idx)
        p_val = predict_correct_proba(model, Xva)
        val_f1 = confusion(val_labels, predicted_correct(p_val)).f1
        val_loss = nn.cross_entropy(np.stack([p_val, 1 - p_val], axis=1), yva)
        result.curves.append({"epoch": epoch, "train_loss": total / count,
                              "val_loss": val_loss, "val_f1": val_f1})
        if (val_f1, -val_loss) > (best_key[0], -best_key[1]):
            best_key = (val_f1, val_loss)
            best_state = model.store.state()
            result.best_epoch, result.best_val_f1 = epoch, val_f1
            stale = 0
        else:
            stale += 1
            if spec.patience is not None and stale >= spec.patience:
                break
    model.store.load(best_state)
    model.rebind()
    if checkpoint_path is not None:
        save_model(model, checkpoint_path)
    return result


def evaluate(model: Classifier, windows: Sequence[LabeledWindow]) -> Metrics:
    if not windows:
        raise ValueError("empty test fold")
    X, _ = _arrays(windows, model.store.dtype)
    return confusion([w.label for w in windows], predicted_correct(predict_correct_proba(model, X)))


@dataclass(frozen=True)
class FoldReport:
    arch: str
    window: int
    config_id: int
    metrics: Metrics
    best_epoch: int = 0
    seed: int = 0

    @property
    def precision(self) -> float:
        return self.metrics.precision

    @property
    def recall(self) -> float:
        return self.metrics.recall

    @property
    def f1(self) -> float:
        return self.metrics.f1


@dataclass(frozen=True)
class AggregateReport:
    arch: str
    window: int
    n: int
    precision: tuple[float, float]  # (mean, population std)
    recall: tuple[float, float]
    f1: tuple[float, float]


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    # statistics works in exact arithmetic, so identical entries give a std of exactly 0
    a = [float(v) for v in values]
    return statistics.fmean(a), statistics.pstdev(a)


def aggregate(reports: Sequence[FoldReport], expected: int | None = None) -> AggregateReport:
    if not reports:
        raise ValueError("no reports to aggregate")
    if expected is not None and len(reports) != expected:
        raise ValueError(f"expected {expected} reports, got {len(reports)}")
    return AggregateReport(reports[0].arch, reports[0].window, len(reports),
                           _mean_std([r.precision for r in reports]),
                           _mean_std([r.recall for r in reports]),
                           _mean_std([r.f1 for r in reports]))


def cross_validate(spec: TrainSpec, splits: Sequence[FoldSplit], data: Sequence[LabeledWindow],
                   checkpoint_dir: str | Path | None = None) -> tuple[list[FoldReport], list[TrainResult]]:
    reports, results = [], []
    for split in splits:
        path = None
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"rm_{spec.arch}_w{spec.window}_c{split.config_id}.json"
        result = train(spec, split, data, path)
        metrics = evaluate(result.model, _select(data, split.test))
        reports.append(FoldReport(spec.arch, spec.window, split.config_id, metrics, result.best_epoch, spec.seed))
        results.append(result)
    return reports, results


METRIC_FIELDS = ("arch", "window", "config_id", "precision", "recall", "f1")
AGGREGATE_FIELDS = ("window", "arch", "precision_mean", "precision_std", "recall_mean", "recall_std",
                    "f1_mean", "f1_std", "n_configs")


def _open_out(dest):
    if isinstance(dest, (str, Path)):
        return open(dest, "w", encoding="utf-8", newline=""), True
    return dest, False


def write_metrics_csv(reports: Sequence[FoldReport], dest: str | Path | IO[str]) -> None:
    fh, owned = _open_out(dest)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in reports:
            w.writerow([r.arch, r.window, r.config_id, f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f1:.6f}"])
    finally:
        if owned:
            fh.close()


def write_aggregate_csv(aggs: Sequence[AggregateReport], dest: str | Path | IO[str]) -> None:
    """One row per (window, arch), windows ascending and LSTM first."""
    fh, owned = _open_out(dest)
    order = {"lstm": 0, "transformer": 1}
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_FIELDS)
        for a in sorted(aggs, key=lambda a: (a.window, order.get(a.arch, 9))):
            w.writerow([a.window, a.arch, *(f"{v:.6f}" for v in (*a.precision, *a.recall, *a.f1)), a.n])
    finally:
        if owned:
            fh.close()


class RewardMachine:
    """A frozen classifier used as a reward function over logs of ``window + 1`` symbols.

    The reward is the classifier's probability that the final action is
    correct given the preceding context. Grades are cached per log.
    """

    def __init__(self, model: Classifier):
        self.model = model
        self.window = model.config.window
        self._cache: dict[tuple[Symbol, ...], float] = {}

    @property
    def log_len(self) -> int:
        return self.window + 1

    def grade(self, log: Sequence[Symbol]) -> float:
        key = tuple(log)
        if len(key) != self.log_len:
            raise ValueError(f"log must hold {self.log_len} symbols, got {len(key)}")
        hit = self._cache.get(key)
        if hit is None:
            X = encode_sequence(key, self.model.store.dtype)[None]
            hit = float(predict_correct_proba(self.model, X)[0])
            self._cache[key] = hit
        return hit

    def grade_many(self, logs: Sequence[Sequence[Symbol]]) -> np.ndarray:
        keys = [tuple(l) for l in logs]
        missing = list(dict.fromkeys(k for k in keys if k not in self._cache))
        for k in missing:
            if len(k) != self.log_len:
                raise ValueError(f"log must hold {self.log_len} symbols, got {len(k)}")
        if missing:
            X = encode_windows(missing, self.model.store.dtype)
            for k, p in zip(missing, predict_correct_proba(self.model, X)):
                self._cache[k] = float(p)
        return np.array([self._cache[k] for k in keys])


def grade(rm: RewardMachine, log: Sequence[Symbol]) -> float:
    return rm.grade(log)
