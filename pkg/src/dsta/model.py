"""DSTA network: spatial attention, temporal attention, gated recurrence, heads.

Layout convention: vectors are rows.  A batch of hidden states is ``(B, d)``,
the objects of one frame are ``(B, N, d)`` (one row per object, matching the
on-disk ``T x N x d`` order) and a temporal history window is ``(B, M, d)``
with the most recent state first.  A weight ``W`` of declared shape
``(out, in)`` acting on a column vector ``x`` is applied as ``x @ W.T``.

Every layer function also accepts unbatched input (leading axes are optional).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dsta import numgrad as ng
from dsta.numgrad import Tensor

INIT_STD = 0.01


@dataclass(frozen=True)
class ModelDims:
    d: int = 64
    N: int = 19
    M: int = 10
    T: int = 100
    feat_dim: int | None = None  # raw input width; None means already d
    use_dsa: bool = True
    use_dta: bool = True
    use_tsaa: bool = True

    def __post_init__(self):
        if min(self.d, self.N, self.M, self.T) < 1:
            raise ValueError(f"dimensions must be positive: {self}")
        if self.T < self.M:
            raise ValueError(f"T ({self.T}) must be >= M ({self.M})")
        if self.feat_dim is not None and self.feat_dim < 1:
            raise ValueError("feat_dim must be positive")

    @property
    def input_width(self) -> int:
        return self.d if self.feat_dim is None else self.feat_dim

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, T = self.d, self.T
        shapes = {
            # spatial attention
            "W_sa": (d,),
            "W_g": (d, d),
            "W_theta": (d, d),
            "B_theta": (d,),
            # temporal attention
            "W_ta": (d, d),
            # gated recurrence; B_* multiply the aggregated history
            "W_gr": (d, 2 * d),
            "B_gr": (d, d),
            "W_r": (d, 2 * d),
            "B_r": (d, d),
            "W_gu": (d, 2 * d),
            "B_gu": (d, d),
            # frame head
            "W_0": (d, d),
            "B_0": (d,),
            "W_1": (2, d),
            "B_1": (2,),
            # self-attention aggregation head (training only)
            "W_saa": (T,),
            "W_v0": (d, d),
            "B_v0": (d,),
            "W_v1": (2, d),
            "B_v1": (2,),
        }
        if self.feat_dim is not None and self.feat_dim != d:
            shapes["W_emb_f"] = (d, self.feat_dim)
            shapes["W_emb_o"] = (d, self.feat_dim)
        return shapes

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "N": self.N,
            "M": self.M,
            "T": self.T,
            "feat_dim": self.feat_dim,
            "use_dsa": self.use_dsa,
            "use_dta": self.use_dta,
            "use_tsaa": self.use_tsaa,
        }


@dataclass
class ModelParams:
    dims: ModelDims
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.dims,
            {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()},
        )

    @classmethod
    def from_arrays(cls, dims: ModelDims, arrays: dict[str, np.ndarray]) -> "ModelParams":
        expected = dims.param_shapes()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ValueError(f"parameter set mismatch; missing={missing} extra={extra}")
        tensors = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            tensors[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        return cls(dims, tensors)


def init_params(dims: ModelDims, seed: int, std: float = INIT_STD) -> ModelParams:
    """Draw every entry from Normal(0, std**2), deterministically per seed."""
    rng = np.random.default_rng(seed)
    arrays = {name: rng.normal(0.0, std, size=shape) for name, shape in dims.param_shapes().items()}
    return ModelParams.from_arrays(dims, arrays)


# ---------------------------------------------------------------------------
# layers


class _Bound:
    """Parameters bound to one forward pass; transposed weights are memoised."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.dims = params.dims
        self.tensors = params.tensors
        self._t: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def transposed(self, name: str) -> Tensor:
        t = self._t.get(name)
        if t is None:
            t = self._t[name] = ng.transpose(self.params[name])
        return t


def _lin(x, params, name: str) -> Tensor:
    if isinstance(params, _Bound):
        return ng.matmul(x, params.transposed(name))
    return ng.matmul(x, ng.transpose(params[name]))


def spatial_attention(params: ModelParams, h_agg, objects):
    """Softmax attention over the N objects of a frame.

    ``h_agg`` is the aggregated history ``(..., d)`` and ``objects`` is
    ``(..., N, d)``.  Returns ``(alpha, o_agg)`` with shapes ``(..., N)`` and
    ``(..., d)``.
    """
    objects = ng._as_tensor(objects)
    proj = ng.add(_lin(objects, params, "W_theta"), params["B_theta"])
    return _spatial_from_proj(params, h_agg, objects, proj)


def _spatial_from_proj(params, h_agg, objects, proj):
    hist = ng.expand_dims(_lin(h_agg, params, "W_g"), -2)
    scores = ng.matmul(ng.tanh(ng.add(proj, hist)), params["W_sa"])
    alpha = ng.softmax(scores, axis=-1)
    o_agg = ng.matmul(ng.expand_dims(alpha, -2), objects)
    return alpha, ng.reshape(o_agg, o_agg.shape[:-2] + o_agg.shape[-1:])


def temporal_attention(params: ModelParams, history):
    """Per-feature softmax over the M most recent hidden states.

    ``history`` is ``(..., M, d)``, most recent first.  Returns ``(beta,
    h_agg)``: ``beta`` has the history's shape and sums to one over M for
    every feature; ``h_agg`` is ``(..., d)``.
    """
    history = ng._as_tensor(history)
    scores = _lin(ng.tanh(history), params, "W_ta")
    return _temporal_from_scores(history, scores)


def _temporal_from_scores(history, scores):
    beta = ng.softmax(scores, axis=-2)
    return beta, ng.rowwise_inner(beta, history, axis=-2)


def gru_cell(params: ModelParams, x, h_agg) -> Tensor:
    """Gated update with the history matrices applied to ``h_agg``.

    ``x`` is ``(..., 2d)``, ``h_agg`` is ``(..., d)``.
    """
    g_r = ng.sigmoid(ng.add(_lin(x, params, "W_gr"), _lin(h_agg, params, "B_gr")))
    r = ng.tanh(ng.add(_lin(x, params, "W_r"), _lin(ng.mul(g_r, h_agg), params, "B_r")))
    g_u = ng.sigmoid(ng.add(_lin(x, params, "W_gu"), _lin(h_agg, params, "B_gu")))
    return ng.add(ng.mul(ng.sub(1.0, g_u), r), ng.mul(g_u, h_agg))


def _two_layer_prob(z, params, W0, B0, W1, B1) -> Tensor:
    hidden = ng.tanh(ng.add(_lin(z, params, W0), params[B0]))
    logits = ng.add(_lin(hidden, params, W1), params[B1])
    return ng.index(ng.softmax(logits, axis=-1), (..., 1))


def frame_head(params: ModelParams, h) -> Tensor:
    """Positive-class probability for each hidden state ``(..., d)``."""
    return _two_layer_prob(h, params, "W_0", "B_0", "W_1", "B_1")


def tsaa_head(params: ModelParams, H) -> Tensor:
    """Video-level probability from all T hidden states ``(..., T, d)``."""
    H = ng._as_tensor(H)
    T = params.dims.T
    if H.shape[-2] != T:
        raise ng.ShapeError(f"tsaa_head expects {T} hidden states, got {H.shape[-2]}")
    gram = ng.matmul(H, ng.transpose(H))
    # column-normalised: each column of the T x T matrix sums to one
    attn = ng.softmax(gram, axis=-2)
    weights = ng.matmul(attn, params["W_saa"])
    z = ng.matmul(ng.expand_dims(weights, -2), H)
    z = ng.reshape(z, z.shape[:-2] + z.shape[-1:])
    return _two_layer_prob(z, params, "W_v0", "B_v0", "W_v1", "B_v1")


# ---------------------------------------------------------------------------
# full forward


@dataclass
class ForwardTrace:
    """Per-frame record for one video (plain arrays, no graph)."""

    h: np.ndarray  # (T, d)
    alpha: np.ndarray  # (T, N)
    beta: np.ndarray  # (T, M, d), history slot 0 is the most recent state
    a: np.ndarray  # (T,)
    a_v: float | None = None

    @property
    def H_v(self) -> np.ndarray:
        """Hidden states as a d x T matrix (one column per frame)."""
        return self.h.T


@dataclass
class BatchOutput:
    probs: Tensor  # (B, T)
    video_probs: Tensor | None  # (B,)
    hidden: Tensor  # (B, T, d)
    alpha: np.ndarray  # (B, T, N)
    beta: np.ndarray  # (B, T, M, d)

    def trace(self, b: int) -> ForwardTrace:
        a_v = None if self.video_probs is None else float(self.video_probs.data[b])
        return ForwardTrace(
            h=self.hidden.data[b],
            alpha=self.alpha[b],
            beta=self.beta[b],
            a=self.probs.data[b],
            a_v=a_v,
        )


def forward_batch(params: ModelParams, frames, objects, training: bool = False) -> BatchOutput:
    """Run the network over a batch of equally long videos.

    ``frames`` is ``(B, T, D)`` and ``objects`` ``(B, T, N, D)``.  When
    ``training`` is set the video-level head is evaluated too (requires the
    clip length to equal ``dims.T``).
    """
    dims = params.dims
    frames = np.asarray(frames, dtype=np.float64)
    objects = np.asarray(objects, dtype=np.float64)
    if frames.ndim != 3 or objects.ndim != 4:
        raise ng.ShapeError("expected frames (B, T, D) and objects (B, T, N, D)")
    B, T, D = frames.shape
    if objects.shape[:2] != (B, T) or objects.shape[3] != D:
        raise ng.ShapeError(f"frame/object shapes disagree: {frames.shape} vs {objects.shape}")
    if D != dims.input_width:
        raise ng.ShapeError(f"feature width {D} != expected {dims.input_width}")
    N = objects.shape[2]
    if N != dims.N:
        raise ng.ShapeError(f"video has {N} object slots, model expects {dims.N}")
    if training and dims.use_tsaa and T != dims.T:
        raise ng.ShapeError(f"training clips must have T={dims.T} frames, got {T}")
    d, M = dims.d, dims.M
    params = _Bound(params)

    if "W_emb_f" in params.tensors:
        F = _lin(frames, params, "W_emb_f")
        O = _lin(objects, params, "W_emb_o")
    else:
        F, O = Tensor(frames), Tensor(objects)

    # the object projection does not depend on the recurrence, do it once
    if dims.use_dsa:
        proj_all = ng.add(_lin(O, params, "W_theta"), params["B_theta"])
    else:
        o_mean = ng.mean(O, axis=2)

    zero = Tensor(np.zeros((B, d)))
    # history slots hold (h, W_ta . tanh(h)); padding slots are zero states
    hist_h = [zero] * M
    hist_s = [zero] * M
    h_prev = zero
    hs = []
    alphas = np.empty((B, T, N))
    betas = np.empty((B, T, M, d))
    uniform_alpha = np.full((B, N), 1.0 / N)

    for t in range(T):
        if dims.use_dta:
            beta, h_agg = _temporal_from_scores(ng.stack(hist_h, axis=1), ng.stack(hist_s, axis=1))
            betas[:, t] = beta.data
        else:
            h_agg = h_prev
            betas[:, t] = 0.0
            betas[:, t, 0] = 1.0

        O_t = ng.index(O, (slice(None), t))
        if dims.use_dsa:
            alpha, o_agg = _spatial_from_proj(params, h_agg, O_t, ng.index(proj_all, (slice(None), t)))
            alphas[:, t] = alpha.data
        else:
            o_agg = ng.index(o_mean, (slice(None), t))
            alphas[:, t] = uniform_alpha

        x = ng.concat(o_agg, ng.index(F, (slice(None), t)))
        h = gru_cell(params, x, h_agg)
        hs.append(h)
        h_prev = h
        if dims.use_dta:
            hist_h = [h] + hist_h[:-1]
            hist_s = [_lin(ng.tanh(h), params, "W_ta")] + hist_s[:-1]

    hidden = ng.stack(hs, axis=1)
    probs = frame_head(params, hidden)
    video_probs = tsaa_head(params, hidden) if (training and dims.use_tsaa) else None
    return BatchOutput(probs=probs, video_probs=video_probs, hidden=hidden, alpha=alphas, beta=betas)


def forward_video(params: ModelParams, sample, training: bool = False) -> ForwardTrace:
    out = forward_batch(params, sample.frame_feats[None], sample.object_feats[None], training)
    return out.trace(0)
