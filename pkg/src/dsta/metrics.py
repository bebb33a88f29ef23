"""Correctness and earliness metrics over per-frame score traces.

A video's score is the maximum of its frame scores; it is predicted positive
at threshold ``thr`` when that maximum is ``>= thr``.  Threshold sweeps use the
sorted distinct video scores.  Mean time-to-accident is the unweighted mean,
over those thresholds, of the average TTA of all positive videos where a
missed video contributes 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class ScoreTrace:
    id: str
    label: int
    tau: int | None
    fps: float
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1 or self.scores.size < 1:
            raise MetricError(f"{self.id}: scores must be a non-empty 1-d sequence")
        if np.any(self.scores < 0) or np.any(self.scores > 1) or not np.isfinite(self.scores).all():
            raise MetricError(f"{self.id}: scores must lie in [0, 1]")
        if self.label not in (0, 1):
            raise MetricError(f"{self.id}: label must be 0 or 1")
        if self.label == 1 and (self.tau is None or not 1 <= self.tau <= self.scores.size):
            raise MetricError(f"{self.id}: positive trace needs 1 <= tau <= T")
        if self.label == 0:
            self.tau = None

    @property
    def T(self) -> int:
        return self.scores.size

    @property
    def video_score(self) -> float:
        return float(self.scores.max())


@dataclass
class MetricsReport:
    ap: float
    p80r: float
    mtta: float
    tta80r: float
    threshold80r: float
    # (threshold, precision, recall) sorted by ascending threshold
    pr_points: list[tuple[float, float, float]] = field(default_factory=list)
    # (threshold, mean TTA over positives) sorted by ascending threshold
    tta_table: list[tuple[float, float]] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "AP": self.ap,
            "P80R": self.p80r,
            "mTTA": self.mtta,
            "TTA80R": self.tta80r,
            "threshold80R": self.threshold80r,
        }

    def to_dict(self) -> dict:
        out = self.summary()
        out["pr_points"] = [list(p) for p in self.pr_points]
        out["tta_table"] = [list(p) for p in self.tta_table]
        return out

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write_csv(self, path) -> None:
        tta = dict(self.tta_table)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall", "mean_tta"])
            for thr, p, r in self.pr_points:
                w.writerow([repr(thr), repr(p), repr(r), repr(tta[thr])])


# ---------------------------------------------------------------------------


def _check_traces(traces: Sequence[ScoreTrace]) -> None:
    if len(traces) == 0:
        raise MetricError("empty trace set")


def _positives(traces):
    return [tr for tr in traces if tr.label == 1]


def classify(traces: Sequence[ScoreTrace], threshold: float):
    """Predictions and (precision, recall) at one threshold.

    Precision is 1 when nothing is predicted positive; recall is 0 when
    there are no positive videos.
    """
    _check_traces(traces)
    if not 0 <= threshold <= 1:
        raise MetricError("threshold must lie in [0, 1]")
    preds = np.array([tr.video_score >= threshold for tr in traces])
    labels = np.array([tr.label for tr in traces])
    tp = int(np.sum(preds & (labels == 1)))
    fp = int(np.sum(preds & (labels == 0)))
    n_pos = int(np.sum(labels == 1))
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / n_pos if n_pos else 0.0
    return preds, precision, recall


def tta(trace: ScoreTrace, threshold: float) -> float | None:
    """Seconds from the first crossing (at or before tau) to tau; None if missed."""
    if trace.label != 1:
        raise MetricError(f"{trace.id}: time-to-accident is only defined for positive videos")
    hits = np.flatnonzero(trace.scores[: trace.tau] >= threshold)
    if hits.size == 0:
        return None
    t = int(hits[0]) + 1
    return (trace.tau - t) / trace.fps


def _first_crossing_tta(pos: Sequence[ScoreTrace]):
    """For each positive: running max over frames 1..tau, for vectorised TTA lookup."""
    return [(np.maximum.accumulate(tr.scores[: tr.tau]), tr.tau, tr.fps) for tr in pos]


@dataclass
class _Sweep:
    thresholds: np.ndarray  # ascending distinct video scores
    precision: np.ndarray
    recall: np.ndarray
    mean_tta: np.ndarray


def _pr_arrays(vs: np.ndarray, labels: np.ndarray):
    """Distinct thresholds (ascending) with precision and recall at each."""
    thr = np.unique(vs)
    n_pos = int(labels.sum())
    order = np.sort(vs)
    pos_sorted = np.sort(vs[labels == 1])
    n_pred = vs.size - np.searchsorted(order, thr, side="left")
    tp = pos_sorted.size - np.searchsorted(pos_sorted, thr, side="left")
    precision = np.where(n_pred > 0, tp / np.maximum(n_pred, 1), 1.0)
    recall = tp / n_pos if n_pos else np.zeros_like(thr)
    return thr, precision, recall


def ap_from_scores(vs: np.ndarray, labels: np.ndarray) -> float:
    """Step-rule AP from per-video scores and 0/1 labels."""
    _, precision, recall = _pr_arrays(vs, labels)
    r = recall[::-1]
    return float(np.sum(np.diff(np.concatenate([[0.0], r])) * precision[::-1]))


def precision_at_recall_from_scores(vs: np.ndarray, labels: np.ndarray, target: float = 0.8) -> float:
    _, precision, recall = _pr_arrays(vs, labels)
    ok = np.flatnonzero(recall >= target - 1e-12)
    if ok.size == 0:
        raise MetricError(f"no threshold reaches recall {target}")
    return float(precision[ok[-1]])


def _sweep(traces: Sequence[ScoreTrace]) -> _Sweep:
    vs = np.array([tr.video_score for tr in traces])
    labels = np.array([tr.label for tr in traces])
    n_pos = int(labels.sum())
    thr, precision, recall = _pr_arrays(vs, labels)

    total = np.zeros_like(thr)
    for runmax, tau, fps in _first_crossing_tta(_positives(traces)):
        # first index where the running max reaches thr
        idx = np.searchsorted(runmax, thr, side="left")
        hit = idx < runmax.size
        total += np.where(hit, (tau - (idx + 1)) / fps, 0.0)
    mean_tta = total / n_pos if n_pos else np.zeros_like(thr)
    return _Sweep(thr, precision, recall, mean_tta)


def pr_curve(traces: Sequence[ScoreTrace]) -> list[tuple[float, float, float]]:
    _check_traces(traces)
    sw = _sweep(traces)
    return [(float(t), float(p), float(r)) for t, p, r in zip(sw.thresholds, sw.precision, sw.recall)]


def average_precision(traces: Sequence[ScoreTrace]):
    """Area under the precision-recall step curve; returns ``(ap, pr_points)``."""
    _check_traces(traces)
    labels = {tr.label for tr in traces}
    if labels != {0, 1}:
        raise MetricError("average precision needs both positive and negative videos")
    sw = _sweep(traces)
    # walk from the highest threshold down; recall only grows
    dr = np.diff(np.concatenate([[0.0], sw.recall[::-1]]))
    ap = float(np.sum(dr * sw.precision[::-1]))
    points = [(float(t), float(pp), float(rr)) for t, pp, rr in zip(sw.thresholds, sw.precision, sw.recall)]
    return ap, points


def mtta(traces: Sequence[ScoreTrace]) -> float:
    _check_traces(traces)
    if not _positives(traces):
        raise MetricError("mTTA needs at least one positive video")
    return float(np.mean(_sweep(traces).mean_tta))


def at_recall(traces: Sequence[ScoreTrace], target: float = 0.8):
    """(precision, mean TTA, threshold) at the largest threshold with recall >= target."""
    _check_traces(traces)
    if not _positives(traces):
        raise MetricError("recall is undefined without positive videos")
    sw = _sweep(traces)
    ok = np.flatnonzero(sw.recall >= target - 1e-12)
    if ok.size == 0:
        raise MetricError(f"no threshold reaches recall {target}")
    i = ok[-1]
    return float(sw.precision[i]), float(sw.mean_tta[i]), float(sw.thresholds[i])


def evaluate(traces: Sequence[ScoreTrace], target_recall: float = 0.8) -> MetricsReport:
    ap, points = average_precision(traces)
    sw = _sweep(traces)
    p80, t80, thr80 = at_recall(traces, target_recall)
    return MetricsReport(
        ap=ap,
        p80r=p80,
        mtta=float(np.mean(sw.mean_tta)),
        tta80r=t80,
        threshold80r=thr80,
        pr_points=points,
        tta_table=[(float(t), float(m)) for t, m in zip(sw.thresholds, sw.mean_tta)],
    )


# ---------------------------------------------------------------------------
# score-trace files: one video per line, tab separated
#   id <TAB> label <TAB> tau <TAB> fps <TAB> s1,s2,...,sT
# tau is 0 for negative videos; lines starting with '#' are ignored.


def _fmt(x: float) -> str:
    return repr(float(x))


def write_traces(traces: Iterable[ScoreTrace], path) -> None:
    with open(path, "w") as fh:
        for tr in traces:
            if "\t" in tr.id or "\n" in tr.id:
                raise MetricError(f"trace id {tr.id!r} contains a tab or newline")
            fps = int(tr.fps) if float(tr.fps).is_integer() else tr.fps
            scores = ",".join(_fmt(s) for s in tr.scores)
            fh.write(f"{tr.id}\t{tr.label}\t{tr.tau or 0}\t{fps}\t{scores}\n")


def read_traces(path) -> list[ScoreTrace]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise MetricError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
            ident, label, tau, fps, scores = parts
            try:
                lab = int(label)
                values = [float(x) for x in scores.split(",")]
                out.append(
                    ScoreTrace(
                        id=ident,
                        label=lab,
                        tau=int(tau) if lab == 1 else None,
                        fps=float(fps),
                        scores=np.array(values),
                    )
                )
            except ValueError as exc:
                raise MetricError(f"{path}:{lineno}: {exc}") from exc
    return out
