"""Central finite-difference check of the full training loss gradient."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from dsta import numgrad as ng
from dsta.features import DatasetSpec, TauRule, VideoSample, stack_batch, synthesize
from dsta.model import ModelDims, ModelParams, forward_batch, init_params
from dsta.objective import LossConfig, batch_loss

# absolute floor under the relative-error denominator, so entries whose true
# gradient is ~0 are judged on absolute error instead
GRAD_FLOOR = 1e-5


@dataclass
class TensorCheck:
    name: str
    max_rel_err: float
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def loss_fn(params: ModelParams, samples: Sequence[VideoSample], cfg: LossConfig = LossConfig()):
    frames, objects, labels, taus, fps = stack_batch(samples)
    out = forward_batch(params, frames, objects, training=True)
    return batch_loss(out, labels, taus, fps, cfg)


def analytic_grads(params: ModelParams, samples, cfg: LossConfig = LossConfig()) -> dict[str, np.ndarray]:
    params.zero_grad()
    with ng.Graph() as g:
        loss = loss_fn(params, samples, cfg)
    g.backward(loss)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.tensors.items()}


def numeric_grad(params: ModelParams, name: str, f: Callable[[], float], eps: float = 1e-5) -> np.ndarray:
    t = params[name]
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return grad


def check_params(
    params: ModelParams,
    samples,
    cfg: LossConfig = LossConfig(),
    tol: float = 1e-4,
    eps: float = 1e-5,
    corrupt: str | None = None,
) -> list[TensorCheck]:
    """Compare analytic and numeric gradients for every parameter tensor.

    ``corrupt`` names a tensor whose analytic gradient is deliberately
    perturbed (used to prove that the check can fail).
    """
    analytic = analytic_grads(params, samples, cfg)
    if corrupt is not None:
        analytic[corrupt] = analytic[corrupt] * 1.5 + 1e-3

    def f():
        return loss_fn(params, samples, cfg).item()

    results = []
    for name in params.tensors:
        numeric = numeric_grad(params, name, f, eps)
        err = relative_error(analytic[name], numeric)
        results.append(TensorCheck(name, err, err < tol))
    return results


def tiny_problem(d=8, N=3, M=4, T=10, seed=0, fps=5, init_std=0.3, **flags):
    """One positive and one negative video plus randomly initialised params."""
    spec = DatasetSpec(
        train_pos=1,
        train_neg=1,
        test_pos=0,
        test_neg=0,
        T=T,
        fps=fps,
        N=N,
        d=d,
        tau_rule=TauRule("fixed", frame=max(1, T - 2)),
        seed=seed,
        signal=1.0,
        ramp_seconds=1.0,
        risky_objects=min(2, N),
    )
    samples = synthesize(spec)["train"]
    dims = ModelDims(d=d, N=N, M=M, T=T, **flags)
    params = init_params(dims, seed, std=init_std)
    return params, samples
