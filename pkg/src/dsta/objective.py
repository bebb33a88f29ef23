"""Early-anticipation losses.

Positive videos weight each frame's log-likelihood by a coefficient that
grows exponentially toward the accident frame and stays at 1 afterwards;
negative videos use plain binary cross-entropy on every frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dsta import numgrad as ng
from dsta.numgrad import Tensor


@dataclass(frozen=True)
class LossConfig:
    w_a: float = 15.0
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.w_a < 0:
            raise ValueError("w_a must be non-negative")
        if not 0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")


def loss_coefficients(T: int, tau: int, fps: float) -> np.ndarray:
    """exp(-max((tau - t) / fps, 0)) for t = 1..T (tau is a 1-based frame)."""
    # scalar libm exp so values are reproducible across numpy builds
    return np.array([math.exp(-max((tau - t) / fps, 0.0)) for t in range(1, T + 1)])


def _frame_weights(T, labels, taus, fps):
    labels = np.atleast_1d(np.asarray(labels, dtype=np.float64))
    taus = np.broadcast_to(np.asarray(taus, dtype=np.float64), labels.shape)
    fps = np.broadcast_to(np.asarray(fps, dtype=np.float64), labels.shape)
    pos = np.zeros((labels.size, T))
    for i, (lab, tau, f) in enumerate(zip(labels, taus, fps)):
        if lab == 1:
            pos[i] = loss_coefficients(T, int(tau), f)
    neg = (1.0 - labels)[:, None] * np.ones((1, T))
    return pos, neg


def frame_loss(probs, labels, taus, fps, cfg: LossConfig = LossConfig()) -> Tensor:
    """Per-video frame-level loss.

    ``probs`` is ``(T,)`` for one video or ``(B, T)`` for a batch; ``labels``,
    ``taus`` and ``fps`` are scalars or length-B sequences.  Returns a scalar
    for a single video, a ``(B,)`` tensor otherwise.
    """
    probs = ng._as_tensor(probs)
    single = probs.ndim == 1
    if single:
        probs = ng.reshape(probs, (1, probs.shape[0]))
    pos_w, neg_w = _frame_weights(probs.shape[1], labels, taus, fps)
    p = ng.clip(probs, cfg.epsilon, 1.0 - cfg.epsilon)
    per_frame = ng.add(ng.mul(pos_w, ng.log(p)), ng.mul(neg_w, ng.log(ng.sub(1.0, p))))
    loss = ng.mul(ng.sum(per_frame, axis=1), -1.0)
    return ng.reshape(loss, ()) if single else loss


def video_loss(video_probs, labels, cfg: LossConfig = LossConfig()) -> Tensor:
    """Binary cross-entropy of the video-level probability."""
    p = ng.clip(ng._as_tensor(video_probs), cfg.epsilon, 1.0 - cfg.epsilon)
    labels = np.asarray(labels, dtype=np.float64)
    return ng.mul(ng.add(ng.mul(labels, ng.log(p)), ng.mul(1.0 - labels, ng.log(ng.sub(1.0, p)))), -1.0)


def total_loss(frame, video, cfg: LossConfig = LossConfig()) -> Tensor:
    """frame + w_a * video; pass ``video=None`` when the auxiliary head is off."""
    if video is None:
        return ng._as_tensor(frame)
    return ng.add(frame, ng.mul(video, cfg.w_a))


def batch_loss(out, labels, taus, fps, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean over the batch of the per-video total loss."""
    frame = frame_loss(out.probs, labels, taus, fps, cfg)
    video = None if out.video_probs is None else video_loss(out.video_probs, labels, cfg)
    return ng.mean(total_loss(frame, video, cfg))
