"""Accuracy, rank-based AUC, run aggregation and per-subject result tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax (ties -> lowest class) equals the 1-based label."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits [B, Y] and B labels required, got {logits.shape} and {labels.shape}")
    if labels.size == 0:
        raise ValueError("accuracy of an empty batch is undefined")
    pred = logits.argmax(axis=1) + 1
    return float(np.mean(pred == labels))


def midranks(x) -> np.ndarray:
    """1-based ranks, tied values sharing the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    i = 0
    n = x.size
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counting one half.

    ``labels`` are binary; any of {0,1} or {1,2} is accepted, the larger
    value being the positive class.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    values = np.unique(labels)
    if values.size != 2:
        raise ValueError("AUC needs both classes present")
    pos = labels == values[1]
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    r = midranks(scores)
    u = r[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def positive_class_scores(logits) -> np.ndarray:
    """Softmax probability of class 2 for two-class logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ValueError("positive-class scores need two-class logits")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def evaluate_metric(metric: str, logits, labels) -> float:
    if metric == "accuracy":
        return accuracy(logits, labels)
    if metric == "auc":
        return auc(positive_class_scores(logits), labels)
    raise ValueError(f"unknown metric {metric!r}")


@dataclass
class RunResult:
    run: int
    per_subject: dict
    pooled: float = float("nan")
    per_subject_loss: dict = field(default_factory=dict)

    @property
    def subject_mean(self) -> float:
        """The run-level value: unweighted mean over subjects."""
        return float(np.mean([self.per_subject[s] for s in sorted(self.per_subject)]))


@dataclass(frozen=True)
class AggregateResult:
    runs: int
    per_run: tuple
    mean: float
    stddev: float
    per_subject: dict = field(default_factory=dict)  # subject -> (mean, std)


def _run_value(v) -> float:
    if isinstance(v, RunResult):
        return v.subject_mean
    if isinstance(v, Mapping):
        return float(np.mean([float(v[k]) for k in sorted(v)]))
    if isinstance(v, (Sequence, np.ndarray)) and not isinstance(v, str):
        return float(np.mean(np.asarray(v, dtype=np.float64)))
    return float(v)


def aggregate_runs(per_run: Sequence) -> AggregateResult:
    """Mean and Bessel-corrected standard deviation over runs.

    Each entry is one run: a scalar, a sequence or mapping of per-subject
    values (averaged with equal subject weight), or a :class:`RunResult`.
    """
    values = [_run_value(v) for v in per_run]
    R = len(values)
    if R < 2:
        raise ValueError(f"stddev over runs needs R >= 2, got {R}")
    mean = sum(values) / R
    std = math.sqrt(sum((v - mean) ** 2 for v in values) / (R - 1))
    per_subject = {}
    if all(isinstance(v, (RunResult, Mapping)) for v in per_run):
        dicts = [v.per_subject if isinstance(v, RunResult) else v for v in per_run]
        subjects = sorted(set().union(*dicts))
        for s in subjects:
            xs = np.array([d[s] for d in dicts if s in d], dtype=np.float64)
            per_subject[s] = (float(xs.mean()), float(xs.std(ddof=1)) if xs.size > 1 else float("nan"))
    return AggregateResult(R, tuple(values), mean, std, per_subject)


def _cell(mean: float, std: float, decimals: int) -> str:
    if math.isnan(std):
        return f"{mean:.{decimals}f}"
    return f"{mean:.{decimals}f}±{std:.{decimals}f}"


@dataclass
class SubjectTable:
    columns: list
    subjects: list
    cells: dict       # (subject, column) -> (mean, std)
    summary: dict     # column -> (mean, std)
    decimals: int = 2

    def rows(self) -> list[list[str]]:
        out = [["Subject"] + list(self.columns)]
        for s in self.subjects:
            row = [str(s)]
            for c in self.columns:
                v = self.cells.get((s, c))
                row.append("-" if v is None else _cell(*v, self.decimals))
            out.append(row)
        summary = ["Summary"]
        for c in self.columns:
            summary.append(_cell(*self.summary[c], self.decimals))
        out.append(summary)
        return out

    def to_text(self) -> str:
        rows = self.rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        fmt = lambda r: "  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
        rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
        lines = [fmt(rows[0]), rule] + [fmt(r) for r in rows[1:-1]] + [rule, fmt(rows[-1])]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject"] + [f"{c}_{k}" for c in self.columns for k in ("mean", "std")])
        for s in self.subjects:
            row = [s]
            for c in self.columns:
                v = self.cells.get((s, c))
                row += ["", ""] if v is None else [repr(v[0]), repr(v[1])]
            w.writerow(row)
        row = ["Summary"]
        for c in self.columns:
            row += [repr(self.summary[c][0]), repr(self.summary[c][1])]
        w.writerow(row)
        return buf.getvalue()


def subject_table(results: Mapping[str, Sequence[RunResult]], decimals: int = 2) -> SubjectTable:
    """Per-subject mean±std across runs for each column, plus a Summary row.

    The Summary is the mean±std over runs of the per-run subject average.
    With a single run the std is omitted.
    """
    columns = list(results)
    cells = {}
    summary = {}
    subjects = set()
    for col, runs in results.items():
        runs = list(runs)
        if not runs:
            raise ValueError(f"column {col!r} has no runs")
        if len(runs) >= 2:
            agg = aggregate_runs(runs)
            summary[col] = (agg.mean, agg.stddev)
            for s, v in agg.per_subject.items():
                cells[(s, col)] = v
                subjects.add(s)
        else:
            r = runs[0]
            summary[col] = (r.subject_mean, float("nan"))
            for s, v in r.per_subject.items():
                cells[(s, col)] = (float(v), float("nan"))
                subjects.add(s)
    return SubjectTable(columns, sorted(subjects), cells, summary, decimals)
