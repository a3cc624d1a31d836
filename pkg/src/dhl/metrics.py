"""Accuracy, macro precision/recall/F1 and the leading-success rate."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from dhl.data import TrainingInstance
from dhl.errors import ShapeError
from dhl.model import ModelConfig, bind, forward_chunks, predict_next

BASELINES = (None, "next")


@dataclass
class ConfusionTally:
    """Per-class TP/FP/FN counts; tallies from disjoint shards add up."""

    n_classes: int
    tp: np.ndarray = field(default=None)
    fp: np.ndarray = field(default=None)
    fn: np.ndarray = field(default=None)
    seen: np.ndarray = field(default=None)  # class occurred as a label or prediction

    def __post_init__(self):
        for name in ("tp", "fp", "fn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.n_classes, dtype=np.int64))
        if self.seen is None:
            self.seen = np.zeros(self.n_classes, dtype=bool)

    @property
    def correct(self) -> int:
        return int(self.tp.sum())

    @property
    def total(self) -> int:
        return int(self.tp.sum() + self.fp.sum())

    @classmethod
    def from_pairs(cls, predictions, labels, n_classes: int) -> "ConfusionTally":
        preds = np.asarray(predictions, dtype=np.int64).reshape(-1)
        gold = np.asarray(labels, dtype=np.int64).reshape(-1)
        if preds.shape != gold.shape:
            raise ShapeError(f"{preds.size} predictions vs {gold.size} labels")
        for arr, what in ((preds, "prediction"), (gold, "label")):
            if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
                raise ShapeError(f"{what} id outside [0, {n_classes})")
        hit = preds == gold
        t = cls(n_classes)
        t.tp = np.bincount(gold[hit], minlength=n_classes)
        t.fp = np.bincount(preds[~hit], minlength=n_classes)
        t.fn = np.bincount(gold[~hit], minlength=n_classes)
        t.seen[preds] = True
        t.seen[gold] = True
        return t

    def merge(self, other: "ConfusionTally") -> "ConfusionTally":
        if other.n_classes != self.n_classes:
            raise ShapeError("cannot merge tallies with different class counts")
        return ConfusionTally(self.n_classes, self.tp + other.tp, self.fp + other.fp,
                              self.fn + other.fn, self.seen | other.seen)


@dataclass
class MetricsReport:
    level: str
    acc: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    ls: float | None
    n_instances: int

    def to_json(self) -> dict:
        return {"level": self.level, "acc": self.acc, "macro_precision": self.macro_precision,
                "macro_recall": self.macro_recall, "macro_f1": self.macro_f1, "ls": self.ls,
                "n_instances": self.n_instances}


def _ratio(num: np.ndarray, den: np.ndarray, zero_division: float) -> np.ndarray:
    out = np.full(num.shape, zero_division, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def report_from_tally(tally: ConfusionTally, level: str = "", *, zero_division: float = 0.0,
                      classes: str = "present", ls: float | None = None) -> MetricsReport:
    if tally.total == 0:
        raise ValueError("no predictions to score")
    if classes not in ("present", "all"):
        raise ValueError("classes must be 'present' or 'all'")
    tp, fp, fn = (x.astype(np.float64) for x in (tally.tp, tally.fp, tally.fn))
    precision = _ratio(tp, tp + fp, zero_division)
    recall = _ratio(tp, tp + fn, zero_division)
    f1 = _ratio(2 * precision * recall, precision + recall, zero_division)
    mask = tally.seen if classes == "present" else np.ones(tally.n_classes, dtype=bool)
    return MetricsReport(
        level=level,
        acc=tally.correct / tally.total,
        macro_precision=float(precision[mask].mean()),
        macro_recall=float(recall[mask].mean()),
        macro_f1=float(f1[mask].mean()),
        ls=ls,
        n_instances=tally.total,
    )


def compute_metrics(predictions: Sequence[int], labels: Sequence[int], n_classes: int, *,
                    level: str = "", zero_division: float = 0.0,
                    classes: str = "present") -> MetricsReport:
    """Accuracy and macro P/R/F1.

    Macro-F1 is the mean of per-class F1. A class whose precision, recall or
    F1 has a zero denominator scores ``zero_division`` for that metric. By
    default the mean runs over classes that occur among labels or
    predictions; ``classes="all"`` averages over the whole vocabulary.
    """
    if len(predictions) == 0:
        raise ValueError("compute_metrics needs at least one prediction")
    tally = ConfusionTally.from_pairs(predictions, labels, n_classes)
    return report_from_tally(tally, level, zero_division=zero_division, classes=classes)


def leading_success(predictions: Sequence[int], final_goals: Sequence[int]) -> float:
    """Share of predictions that name their dialog's final goal."""
    preds = np.asarray(predictions).reshape(-1)
    finals = np.asarray(final_goals).reshape(-1)
    if preds.shape != finals.shape:
        raise ShapeError(f"{preds.size} predictions vs {finals.size} final goals")
    if preds.size == 0:
        raise ValueError("leading_success needs at least one prediction")
    return float(np.mean(preds == finals))


def next_baseline(instances: Sequence[TrainingInstance], level: str) -> np.ndarray:
    """Repeat the last goal of the prefix."""
    return np.array([inst.prefixes[level][-1] for inst in instances], dtype=np.int64)


def predict_instances(params: Mapping[str, np.ndarray], config: ModelConfig,
                      instances: Sequence[TrainingInstance], adjacency,
                      baseline: str | None = None) -> tuple[list[TrainingInstance], dict]:
    """Predictions per level, with instances returned in the order predicted."""
    if baseline not in BASELINES:
        raise ValueError(f"unknown baseline {baseline!r}")
    levels = config.levels
    for inst in instances:
        if inst.levels != levels:
            raise ShapeError(f"instance levels {inst.levels} do not match model levels {levels}")
    if baseline == "next":
        return list(instances), {lv: next_baseline(instances, lv) for lv in levels}
    traces = forward_chunks(bind(params), config, instances, adjacency)
    ordered = [inst for t in traces for inst in t.instances]
    preds = {lv: np.concatenate([predict_next(t, lv) for t in traces]) for lv in levels}
    return ordered, preds


def _tally_shard(params, config, shard, adjacency, baseline):
    ordered, preds = predict_instances(params, config, shard, adjacency, baseline)
    out = {}
    for lv in config.levels:
        labels = np.array([inst.targets[lv] for inst in ordered], dtype=np.int64)
        out[lv] = ConfusionTally.from_pairs(preds[lv], labels, config.vocab_size(lv))
    finals = np.array([inst.finals["entity"] for inst in ordered], dtype=np.int64)
    hits = int(np.sum(preds["entity"] == finals))
    return out, hits


def evaluate_model(params: Mapping[str, np.ndarray], config: ModelConfig,
                   instances: Sequence[TrainingInstance], adjacency=None,
                   baseline: str | None = None, *, workers: int = 1,
                   zero_division: float = 0.0, classes: str = "present") -> dict[str, MetricsReport]:
    """Score next-goal prediction on every level; LS goes on the entity report.

    ``workers > 1`` shards the instances across threads; the tallies are
    summed so the result does not depend on the split.
    """
    instances = list(instances)
    if not instances:
        raise ValueError("no instances to evaluate")
    if baseline is None and adjacency is None:
        raise ValueError("model evaluation needs the adjacency matrices")
    workers = max(1, min(workers, len(instances)))
    shards = [instances[i::workers] for i in range(workers)]
    if workers == 1:
        results = [_tally_shard(params, config, shards[0], adjacency, baseline)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda s: _tally_shard(params, config, s, adjacency, baseline), shards))
    tallies = results[0][0]
    hits = results[0][1]
    for other, h in results[1:]:
        tallies = {lv: tallies[lv].merge(other[lv]) for lv in tallies}
        hits += h
    reports = {}
    for lv in config.levels:
        ls = hits / len(instances) if lv == "entity" else None
        reports[lv] = report_from_tally(tallies[lv], lv, zero_division=zero_division,
                                        classes=classes, ls=ls)
    return reports
