"""Utterance- and system-level MSE, LCC, SRCC and KTAU."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import PredictionSet, UtteranceRecord
from .errors import ValidationError

METRIC_NAMES = ("mse", "lcc", "srcc", "ktau")
LEVELS = ("utt", "sys")


class Correlation(NamedTuple):
    value: float
    degenerate: bool = False


_DEGENERATE = Correlation(0.0, True)


def _pair(x, y):
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    b = np.asarray(y, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def pearson(x, y) -> Correlation:
    """Pearson correlation; a constant input (or n < 2) gives a flagged 0."""
    a, b = _pair(x, y)
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return _DEGENERATE
    da, db = a - a.mean(), b - b.mean()
    r = np.mean(da * db) / np.sqrt(np.mean(da * da) * np.mean(db * db))
    return Correlation(float(np.clip(r, -1.0, 1.0)))


def midrank(x) -> np.ndarray:
    """1-based ranks with ties sharing the average of their positions."""
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_a[1:] != sorted_a[:-1]])
    ends = np.r_[starts[1:], a.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(a.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def spearman(x, y) -> Correlation:
    a, b = _pair(x, y)
    return pearson(midrank(a), midrank(b))


def kendall_tau(x, y) -> Correlation:
    """Kendall tau-b. Pairs tied in both vectors count toward both tie totals."""
    a, b = _pair(x, y)
    n = a.size
    if n < 2:
        return _DEGENERATE
    i, j = np.triu_indices(n, k=1)
    sx = np.sign(a[i] - a[j])
    sy = np.sign(b[i] - b[j])
    n_pairs = n * (n - 1) // 2
    tied_x = int(np.count_nonzero(sx == 0))
    tied_y = int(np.count_nonzero(sy == 0))
    denom = float(n_pairs - tied_x) * float(n_pairs - tied_y)
    if denom <= 0:
        return _DEGENERATE
    s = float(np.sum(sx * sy))
    return Correlation(float(np.clip(s / np.sqrt(denom), -1.0, 1.0)))


def system_aggregate(preds: PredictionSet, truth: list[UtteranceRecord]) -> tuple[dict[str, float], dict[str, float]]:
    """Per-system mean predicted and mean true MOS, keyed in lexicographic system order."""
    by_id = {r.utterance_id: r for r in truth}
    unknown = sorted(set(preds.entries) - set(by_id))
    if unknown:
        raise ValidationError(f"predictions for unknown utterances: {', '.join(unknown)}")
    pred_sum: dict[str, list[float]] = {}
    for uid, score in preds.entries.items():
        pred_sum.setdefault(by_id[uid].system_id, []).append(score)
    true_sum: dict[str, list[float]] = {}
    for r in truth:
        true_sum.setdefault(r.system_id, []).append(r.mos)
    missing = sorted(set(true_sum) - set(pred_sum))
    if missing:
        raise ValidationError(f"systems without predictions: {', '.join(missing)}")
    systems = sorted(true_sum)
    return ({s: float(np.mean(pred_sum[s])) for s in systems},
            {s: float(np.mean(true_sum[s])) for s in systems})


@dataclass
class LevelMetrics:
    mse: float
    lcc: float
    srcc: float
    ktau: float

    def row(self) -> list[float]:
        return [self.mse, self.lcc, self.srcc, self.ktau]


@dataclass
class MetricReport:
    utt: LevelMetrics
    sys: LevelMetrics
    flags: set[str] = field(default_factory=set)

    def level(self, name: str) -> LevelMetrics:
        return {"utt": self.utt, "sys": self.sys}[name]

    def items(self):
        for level in LEVELS:
            for metric, value in zip(METRIC_NAMES, self.level(level).row()):
                yield f"{level}.{metric}", value

    def to_text(self) -> str:
        lines = [f"{key}={round(value, 9)!r}" for key, value in self.items()]
        if self.flags:
            lines.append("degenerate=" + ",".join(sorted(self.flags)))
        return "\n".join(lines) + "\n"

    def table_row(self) -> list[float]:
        """Utterance then system level, each as MSE, LCC, SRCC, KTAU."""
        return self.utt.row() + self.sys.row()


def _level(pred, true, prefix: str, flags: set[str]) -> LevelMetrics:
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    corr = {"lcc": pearson(pred, true), "srcc": spearman(pred, true), "ktau": kendall_tau(pred, true)}
    for name, c in corr.items():
        if c.degenerate:
            flags.add(f"{prefix}.{name}")
    return LevelMetrics(float(np.mean((pred - true) ** 2)), corr["lcc"].value, corr["srcc"].value, corr["ktau"].value)


def full_report(preds: PredictionSet, truth: list[UtteranceRecord], clamp: bool = False) -> MetricReport:
    """Metrics over utterances and over system means. `clamp` limits scores to [1, 5] first."""
    if clamp:
        preds = PredictionSet({k: min(5.0, max(1.0, v)) for k, v in preds.entries.items()}, dict(preds.system_of))
    by_id = {r.utterance_id: r for r in truth}
    ids = sorted(preds.entries)
    missing = [u for u in ids if u not in by_id]
    if missing:
        raise ValidationError(f"predictions for unknown utterances: {', '.join(missing)}")
    scored = [by_id[u] for u in ids]
    flags: set[str] = set()
    utt = _level([preds.entries[u] for u in ids], [r.mos for r in scored], "utt", flags)
    sys_pred, sys_true = system_aggregate(preds, scored)
    sys = _level(list(sys_pred.values()), list(sys_true.values()), "sys", flags)
    return MetricReport(utt, sys, flags)
