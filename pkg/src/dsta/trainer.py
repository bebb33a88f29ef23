"""Training loop: Adam over mini-batches, LR-on-plateau, one checkpoint per epoch."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from dsta import checkpoint as ckpt_io
from dsta import numgrad as ng
from dsta.checkpoint import Checkpoint
from dsta.features import VideoSample, stack_batch
from dsta.metrics import ScoreTrace, evaluate
from dsta.model import ModelDims, ModelParams, forward_batch, init_params
from dsta.objective import LossConfig, batch_loss

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class SchedulerConfig:
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-6
    threshold: float = 1e-4  # relative improvement needed to reset patience


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 10
    epochs: int = 60
    seed: int = 0
    d: int = 64
    M: int | None = None  # None: half a second of frames
    use_dsa: bool = True
    use_dta: bool = True
    use_tsaa: bool = True
    w_a: float = 15.0
    init_std: float = 0.01
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0 < self.scheduler.factor < 1:
            raise ValueError("scheduler factor must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown training config fields: {sorted(unknown)}")
        if isinstance(raw.get("scheduler"), dict):
            raw["scheduler"] = SchedulerConfig(**raw["scheduler"])
        if isinstance(raw.get("adam"), dict):
            raw["adam"] = AdamConfig(**raw["adam"])
        return cls(**raw)

    def model_dims(self, sample: VideoSample) -> ModelDims:
        M = self.M if self.M is not None else max(1, int(round(0.5 * sample.fps)))
        return ModelDims(
            d=self.d,
            N=sample.N,
            M=M,
            T=sample.T,
            feat_dim=None if sample.d == self.d else sample.d,
            use_dsa=self.use_dsa,
            use_dta=self.use_dta,
            use_tsaa=self.use_tsaa,
        )


class Adam:
    def __init__(self, params: ModelParams, cfg: AdamConfig = AdamConfig()):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}

    def step(self, lr: float) -> None:
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        self.step_count += 1
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, t in self.params.tensors.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": a for k, a in self.m.items()}
        out.update({f"adam.v/{k}": a for k, a in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.m:
            self.m[k] = tensors[f"adam.m/{k}"].copy()
            self.v[k] = tensors[f"adam.v/{k}"].copy()
        self.step_count = step_count


class ReduceLROnPlateau:
    """Multiply the LR by ``factor`` once the monitored loss has failed to
    improve (relative threshold) for more than ``patience`` epochs."""

    def __init__(self, lr: float, cfg: SchedulerConfig):
        self.lr = lr
        self.cfg = cfg
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, value: float) -> float:
        if value < self.best * (1.0 - self.cfg.threshold):
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs > self.cfg.patience:
            new_lr = max(self.lr * self.cfg.factor, self.cfg.min_lr)
            if new_lr < self.lr:
                log.info("reducing learning rate %.3g -> %.3g", self.lr, new_lr)
            self.lr = new_lr
            self.bad_epochs = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best if math.isfinite(self.best) else None, "bad_epochs": self.bad_epochs}

    def load_state(self, state: dict) -> None:
        self.lr = state["lr"]
        self.best = math.inf if state["best"] is None else state["best"]
        self.bad_epochs = state["bad_epochs"]


def _batches(samples: Sequence[VideoSample], size: int):
    for i in range(0, len(samples), size):
        yield samples[i : i + size]


def predict(params: ModelParams, samples: Sequence[VideoSample], batch_size: int = 10, loss_cfg=None):
    """Score traces for ``samples``; with ``loss_cfg`` also the mean total loss."""
    traces, total = [], 0.0
    for batch in _batches(list(samples), batch_size):
        frames, objects, labels, taus, fps = stack_batch(batch)
        out = forward_batch(params, frames, objects, training=loss_cfg is not None)
        if loss_cfg is not None:
            total += batch_loss(out, labels, taus, fps, loss_cfg).item() * len(batch)
        for s, a in zip(batch, out.probs.data):
            traces.append(ScoreTrace(s.id, s.label, s.tau, s.fps, a))
    return traces, (total / len(samples) if loss_cfg is not None else None)


def train(
    config: TrainConfig,
    train_set: Sequence[VideoSample],
    val_set: Sequence[VideoSample],
    run_dir=None,
    resume: Checkpoint | None = None,
    on_epoch: Callable[[Checkpoint], None] | None = None,
) -> list[Checkpoint]:
    """Train and return one checkpoint per epoch (from ``resume.epoch + 1`` on)."""
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    dims = config.model_dims(train_set[0])
    for s in list(train_set) + list(val_set):
        if (s.T, s.N, s.d) != (dims.T, dims.N, dims.input_width):
            raise ValueError(f"{s.id}: dims (T={s.T}, N={s.N}, d={s.d}) differ from the first training video")
    if {s.label for s in val_set} != {0, 1}:
        raise ValueError("validation set needs positive and negative videos")
    loss_cfg = LossConfig(w_a=config.w_a)

    if resume is None:
        params = init_params(dims, config.seed, std=config.init_std)
        opt = Adam(params, config.adam)
        sched = ReduceLROnPlateau(config.learning_rate, config.scheduler)
        start = 1
    else:
        if resume.params.dims != dims:
            raise ValueError("checkpoint dims do not match the training data/config")
        params = resume.params.copy()
        opt = Adam(params, config.adam)
        opt.load_state(resume.extra_tensors, resume.state["adam_step"])
        sched = ReduceLROnPlateau(config.learning_rate, config.scheduler)
        sched.load_state(resume.state["scheduler"])
        start = resume.epoch + 1

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")

    out: list[Checkpoint] = []
    train_list = list(train_set)
    for epoch in range(start, config.epochs + 1):
        lr = sched.lr
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_list))
        shuffled = [train_list[i] for i in order]
        running = 0.0
        for bi, batch in enumerate(_batches(shuffled, config.batch_size)):
            frames, objects, labels, taus, fps = stack_batch(batch)
            params.zero_grad()
            try:
                with ng.Graph() as graph:
                    res = forward_batch(params, frames, objects, training=True)
                    loss = batch_loss(res, labels, taus, fps, loss_cfg)
                graph.backward(loss)
            except ng.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch} batch {bi}: {exc}") from exc
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"epoch {epoch} batch {bi}: loss is {loss.item()}")
            running += loss.item() * len(batch)
            opt.step(lr)

        traces, val_loss = predict(params, val_set, config.batch_size, loss_cfg)
        report = evaluate(traces)
        new_lr = sched.step(val_loss)
        metrics = {
            "epoch": epoch,
            "train_loss": running / len(train_list),
            "val_loss": val_loss,
            "AP": report.ap,
            "mTTA": report.mtta,
            "P80R": report.p80r,
            "TTA80R": report.tta80r,
            "lr": lr,
        }
        log.info("epoch %d  train %.4f  val %.4f  AP %.4f  mTTA %.3f  lr %.2g", epoch, metrics["train_loss"], val_loss, report.ap, report.mtta, lr)
        ck = Checkpoint(
            epoch=epoch,
            params=params.copy(),
            metrics=metrics,
            state={"adam_step": opt.step_count, "scheduler": sched.state(), "next_lr": new_lr},
            extra_tensors={k: v.copy() for k, v in opt.state_tensors().items()},
        )
        out.append(ck)
        if run_dir is not None:
            ckpt_io.save(ck, run_dir / f"epoch_{epoch:03d}.ckpt")
            _append_metrics(run_dir / "metrics.csv", metrics)
        if on_epoch is not None:
            on_epoch(ck)
    return out


METRIC_COLUMNS = ["epoch", "train_loss", "val_loss", "AP", "mTTA", "lr"]


def _append_metrics(path: Path, metrics: dict) -> None:
    rows = []
    if path.exists():
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) < metrics["epoch"]]
    rows.append({k: metrics[k] for k in METRIC_COLUMNS})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------------------


def _ap_mtta(item) -> tuple[float, float]:
    if isinstance(item, Checkpoint):
        return item.ap, item.mtta
    if isinstance(item, dict):
        return item["AP"], item["mTTA"]
    ap, mtta = item
    return ap, mtta


def pareto_frontier(items: Sequence, min_mtta: float = 1.0, min_ap: float = 0.5) -> list:
    """Items not dominated in (AP, mTTA), both maximised, after the floors.

    Accepts checkpoints, metric dicts or ``(ap, mtta)`` pairs; input order is
    kept.  Identical points are all retained.
    """
    if len(items) == 0:
        raise ValueError("pareto_frontier needs at least one item")
    kept = [it for it in items if _ap_mtta(it)[0] >= min_ap and _ap_mtta(it)[1] >= min_mtta]
    pts = [_ap_mtta(it) for it in kept]
    front = []
    for i, (ap, mt) in enumerate(pts):
        dominated = any(
            (ap2 >= ap and mt2 >= mt) and (ap2 > ap or mt2 > mt) for j, (ap2, mt2) in enumerate(pts) if j != i
        )
        if not dominated:
            front.append(kept[i])
    return front
