"""Score-level late fusion of two anticipation models.

Per frame: when both models are at or above their own thresholds take the
larger score, when both are below take the smaller, otherwise average.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dsta.metrics import (
    MetricError,
    ScoreTrace,
    ap_from_scores,
    evaluate,
    precision_at_recall_from_scores,
)


@dataclass(frozen=True)
class FusionConfig:
    thr1: float = 0.5
    thr2: float = 0.5
    objective: str = "AP"
    grid_step: float = 0.01

    def __post_init__(self):
        if not (0 <= self.thr1 <= 1 and 0 <= self.thr2 <= 1):
            raise ValueError("thresholds must lie in [0, 1]")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {sorted(OBJECTIVES)}")
        if not 0 < self.grid_step <= 0.5:
            raise ValueError("grid_step must lie in (0, 0.5]")


def fuse_frame(a1: float, a2: float, thr1: float, thr2: float) -> float:
    up1, up2 = a1 >= thr1, a2 >= thr2
    if up1 and up2:
        return max(a1, a2)
    if not up1 and not up2:
        return min(a1, a2)
    return (a1 + a2) / 2


def fuse_scores(a1: np.ndarray, a2: np.ndarray, thr1: float, thr2: float) -> np.ndarray:
    """Vectorised :func:`fuse_frame` over equally shaped score arrays."""
    up1, up2 = a1 >= thr1, a2 >= thr2
    return np.where(up1 & up2, np.maximum(a1, a2), np.where(~up1 & ~up2, np.minimum(a1, a2), (a1 + a2) / 2))


def _pair(traces1: Sequence[ScoreTrace], traces2: Sequence[ScoreTrace]):
    if len(traces1) == 0:
        raise MetricError("empty trace set")
    by_id = {tr.id: tr for tr in traces2}
    if len(by_id) != len(traces2) or set(by_id) != {tr.id for tr in traces1} or len(traces1) != len(traces2):
        raise MetricError("trace sets must cover the same video ids exactly once")
    pairs = []
    for t1 in traces1:
        t2 = by_id[t1.id]
        if t1.T != t2.T:
            raise MetricError(f"{t1.id}: traces have {t1.T} and {t2.T} frames")
        if (t1.label, t1.tau, t1.fps) != (t2.label, t2.tau, t2.fps):
            raise MetricError(f"{t1.id}: label/tau/fps differ between trace sets")
        pairs.append((t1, t2))
    return pairs


def fuse_traces(traces1, traces2, thr1: float, thr2: float) -> list[ScoreTrace]:
    return [
        ScoreTrace(t1.id, t1.label, t1.tau, t1.fps, fuse_scores(t1.scores, t2.scores, thr1, thr2))
        for t1, t2 in _pair(traces1, traces2)
    ]


OBJECTIVES = {
    "AP": ap_from_scores,
    "P80R": lambda vs, labels: precision_at_recall_from_scores(vs, labels, 0.8),
}


def _padded(pairs):
    """Both models' scores as (V, Tmax) arrays plus a validity mask."""
    T = max(t1.T for t1, _ in pairs)
    s1 = np.zeros((len(pairs), T))
    s2 = np.zeros((len(pairs), T))
    mask = np.zeros((len(pairs), T), dtype=bool)
    for i, (t1, t2) in enumerate(pairs):
        s1[i, : t1.T] = t1.scores
        s2[i, : t2.T] = t2.scores
        mask[i, : t1.T] = True
    return s1, s2, mask


def optimize_thresholds(traces1, traces2, objective: str = "AP", grid_step: float = 0.01):
    """Exhaustive grid search over threshold pairs in [0, 1]^2.

    Returns ``(thr1, thr2, report)`` for the pair with the best objective;
    ties go to the smaller ``thr1``, then the smaller ``thr2``.
    """
    FusionConfig(objective=objective, grid_step=grid_step)
    pairs = _pair(traces1, traces2)
    score = OBJECTIVES[objective]
    n = int(round(1.0 / grid_step))
    grid = [round(i * grid_step, 10) for i in range(n + 1)]
    if grid[-1] < 1.0:
        grid.append(1.0)

    s1, s2, mask = _padded(pairs)
    labels = np.array([t1.label for t1, _ in pairs])
    if objective == "AP" and set(labels.tolist()) != {0, 1}:
        raise MetricError("average precision needs both positive and negative videos")

    best = None
    for thr1 in grid:
        for thr2 in grid:
            fused = np.where(mask, fuse_scores(s1, s2, thr1, thr2), -np.inf)
            value = score(fused.max(axis=1), labels)
            if best is None or value > best[0]:
                best = (value, thr1, thr2)
    _, thr1, thr2 = best
    return thr1, thr2, evaluate(fuse_traces(traces1, traces2, thr1, thr2))
