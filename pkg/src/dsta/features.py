"""Per-frame feature samples, their binary file format, and a synthetic generator.

File layout (all little-endian)::

    b"DSTA"  version:u16  count:u32
    count x record:
        id_len:u16  id:utf-8  label:u8  tau:u32  fps:u16  T:u32  N:u16  d:u32
        payload_bytes:u64
        frame_feats  f32[T*d]      (row-major T x d)
        object_feats f32[T*N*d]    (row-major T x N x d)

``tau`` is a 1-based frame index and is written as 0 for negative videos.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"DSTA"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sHI")
_REC = struct.Struct("<BIHIHIQ")


class FeatureFileError(ValueError):
    pass


class CorruptHeaderError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class DimensionMismatchError(FeatureFileError):
    pass


@dataclass(eq=False)
class VideoSample:
    id: str
    label: int
    tau: int | None
    fps: int
    frame_feats: np.ndarray  # (T, d) float32
    object_feats: np.ndarray  # (T, N, d) float32

    def __post_init__(self):
        self.frame_feats = np.ascontiguousarray(self.frame_feats, dtype=np.float32)
        self.object_feats = np.ascontiguousarray(self.object_feats, dtype=np.float32)
        if self.label not in (0, 1):
            raise ValueError(f"{self.id}: label must be 0 or 1")
        if self.frame_feats.ndim != 2 or self.object_feats.ndim != 3:
            raise ValueError(f"{self.id}: expected (T, d) frame and (T, N, d) object features")
        T, d = self.frame_feats.shape
        if self.object_feats.shape[0] != T or self.object_feats.shape[2] != d:
            raise ValueError(f"{self.id}: object features {self.object_feats.shape} vs frames {self.frame_feats.shape}")
        if self.label == 1:
            if self.tau is None or not 1 <= self.tau <= T:
                raise ValueError(f"{self.id}: positive video needs 1 <= tau <= {T}, got {self.tau}")
        else:
            self.tau = None
        if self.fps < 1:
            raise ValueError(f"{self.id}: fps must be positive")
        if not (np.isfinite(self.frame_feats).all() and np.isfinite(self.object_feats).all()):
            raise ValueError(f"{self.id}: non-finite feature values")

    @property
    def T(self) -> int:
        return self.frame_feats.shape[0]

    @property
    def N(self) -> int:
        return self.object_feats.shape[1]

    @property
    def d(self) -> int:
        return self.frame_feats.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, VideoSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.tau == other.tau
            and self.fps == other.fps
            and self.frame_feats.shape == other.frame_feats.shape
            and self.object_feats.shape == other.object_feats.shape
            and self.frame_feats.tobytes() == other.frame_feats.tobytes()
            and self.object_feats.tobytes() == other.object_feats.tobytes()
        )


# ---------------------------------------------------------------------------
# serialisation


def dumps(samples: Iterable[VideoSample]) -> bytes:
    samples = list(samples)
    parts = [_HEAD.pack(MAGIC, FORMAT_VERSION, len(samples))]
    for s in samples:
        ident = s.id.encode("utf-8")
        payload = s.frame_feats.astype("<f4").tobytes() + s.object_feats.astype("<f4").tobytes()
        parts.append(struct.pack("<H", len(ident)))
        parts.append(ident)
        parts.append(_REC.pack(s.label, s.tau or 0, s.fps, s.T, s.N, s.d, len(payload)))
        parts.append(payload)
    return b"".join(parts)


def loads(buf: bytes) -> list[VideoSample]:
    if len(buf) < _HEAD.size:
        raise TruncatedFileError("file shorter than its header")
    magic, version, count = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CorruptHeaderError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptHeaderError(f"unsupported format version {version}")
    pos = _HEAD.size
    out = []
    for i in range(count):
        if pos + 2 > len(buf):
            raise TruncatedFileError(f"record {i}: missing id length")
        (n_id,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + n_id + _REC.size > len(buf):
            raise TruncatedFileError(f"record {i}: header cut short")
        try:
            ident = buf[pos : pos + n_id].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptHeaderError(f"record {i}: id is not UTF-8") from exc
        pos += n_id
        label, tau, fps, T, N, d, nbytes = _REC.unpack_from(buf, pos)
        pos += _REC.size
        if label not in (0, 1):
            raise CorruptHeaderError(f"record {ident!r}: label byte {label}")
        expected = 4 * (T * d + T * N * d)
        if nbytes != expected:
            raise DimensionMismatchError(
                f"record {ident!r}: header dims T={T} N={N} d={d} imply {expected} bytes, payload has {nbytes}"
            )
        if pos + nbytes > len(buf):
            raise TruncatedFileError(f"record {ident!r}: payload cut short")
        frames = np.frombuffer(buf, dtype="<f4", count=T * d, offset=pos).reshape(T, d)
        objects = np.frombuffer(buf, dtype="<f4", count=T * N * d, offset=pos + 4 * T * d).reshape(T, N, d)
        pos += nbytes
        out.append(
            VideoSample(
                id=ident,
                label=label,
                tau=tau if label == 1 else None,
                fps=fps,
                frame_feats=frames.astype(np.float32),
                object_feats=objects.astype(np.float32),
            )
        )
    if pos != len(buf):
        raise DimensionMismatchError(f"{len(buf) - pos} trailing bytes after {count} records")
    return out


def write(samples: Iterable[VideoSample], path) -> None:
    Path(path).write_bytes(dumps(samples))


def read(path) -> list[VideoSample]:
    return loads(Path(path).read_bytes())


def write_splits(path, splits: dict[str, Sequence[str]]) -> None:
    Path(path).write_text(json.dumps({k: list(v) for k, v in splits.items()}, indent=2, sort_keys=True) + "\n")


def read_splits(path) -> dict[str, list[str]]:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class TauRule:
    """Where the accident starts in a positive clip.

    ``fixed``: always ``frame``.  ``uniform_last``: uniform over the frames
    of the last ``seconds`` seconds, i.e. ``[T - seconds*fps + 1, T]``.
    """

    kind: str = "fixed"
    frame: int | None = None
    seconds: float | None = None

    def bounds(self, T: int, fps: int) -> tuple[int, int]:
        if self.kind == "fixed":
            if self.frame is None:
                raise ValueError("fixed tau rule needs a frame")
            lo = hi = self.frame
        elif self.kind == "uniform_last":
            if self.seconds is None or self.seconds <= 0:
                raise ValueError("uniform_last tau rule needs positive seconds")
            lo, hi = T - int(round(self.seconds * fps)) + 1, T
        else:
            raise ValueError(f"unknown tau rule {self.kind!r}")
        if not 1 <= lo <= hi <= T:
            raise ValueError(f"tau range [{lo}, {hi}] outside [1, {T}]")
        return lo, hi


@dataclass(frozen=True)
class DatasetSpec:
    train_pos: int = 67
    train_neg: int = 133
    test_pos: int = 20
    test_neg: int = 40
    T: int = 100
    fps: int = 20
    N: int = 19
    d: int = 64
    tau_rule: TauRule = field(default_factory=lambda: TauRule("fixed", frame=91))
    seed: int = 0
    signal: float = 1.0
    ramp_seconds: float = 2.0
    risky_objects: int = 2
    # share of the risk cue that also shows in the frame-level feature
    frame_signal: float = 1.0
    # per-frame probability that a risky object shows the cue
    visibility: float = 1.0

    def __post_init__(self):
        counts = (self.train_pos, self.train_neg, self.test_pos, self.test_neg)
        if min(counts) < 0 or sum(counts) == 0:
            raise ValueError("video counts must be non-negative and not all zero")
        if min(self.T, self.fps, self.N, self.d) < 1:
            raise ValueError("T, fps, N and d must be positive")
        if self.signal < 0 or self.ramp_seconds <= 0:
            raise ValueError("signal must be >= 0 and ramp_seconds > 0")
        if not 1 <= self.risky_objects <= self.N:
            raise ValueError("risky_objects must lie in [1, N]")
        if self.frame_signal < 0 or not 0 < self.visibility <= 1:
            raise ValueError("frame_signal must be >= 0 and visibility in (0, 1]")
        self.tau_rule.bounds(self.T, self.fps)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetSpec":
        raw = dict(raw)
        if "tau_rule" in raw and isinstance(raw["tau_rule"], dict):
            raw["tau_rule"] = TauRule(**raw["tau_rule"])
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown dataset fields: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def dad_like(cls, **overrides) -> "DatasetSpec":
        """100 frames at 20 fps, accident at the start of the last 0.5 s."""
        base = dict(T=100, fps=20, N=19, d=64, tau_rule=TauRule("fixed", frame=91))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def ccd_like(cls, **overrides) -> "DatasetSpec":
        """50 frames at 10 fps, accident uniformly placed in the last 2 s."""
        base = dict(T=50, fps=10, N=19, d=64, tau_rule=TauRule("uniform_last", seconds=2.0))
        base.update(overrides)
        return cls(**base)


def signal_ramp(T: int, tau: int, fps: float, strength: float, ramp_seconds: float) -> np.ndarray:
    """Risk-signal magnitude for frames t = 1..T."""
    t = np.arange(1, T + 1, dtype=np.float64)
    return strength * np.maximum(0.0, 1.0 - (tau - t) / (fps * ramp_seconds))


def synthesize(spec: DatasetSpec) -> dict[str, list[VideoSample]]:
    """Generate ``{"train": [...], "test": [...]}`` deterministically from ``spec``.

    Background features are i.i.d. standard normal.  Positive videos add a
    fixed risk direction, scaled by :func:`signal_ramp`, to the frame feature
    and to ``risky_objects`` randomly chosen object slots.  ``frame_signal``
    scales the frame-level copy; with ``visibility < 1`` each risky object
    shows the cue only on a random subset of frames.
    """
    root = np.random.SeedSequence(spec.seed)
    dir_seq, *video_seqs = root.spawn(1 + spec.train_pos + spec.train_neg + spec.test_pos + spec.test_neg)
    drng = np.random.default_rng(dir_seq)
    direction = drng.standard_normal(spec.d)
    direction *= np.sqrt(spec.d) / np.linalg.norm(direction)
    lo, hi = spec.tau_rule.bounds(spec.T, spec.fps)

    plan = [
        ("train", 1, spec.train_pos),
        ("train", 0, spec.train_neg),
        ("test", 1, spec.test_pos),
        ("test", 0, spec.test_neg),
    ]
    splits: dict[str, list[VideoSample]] = {"train": [], "test": []}
    k = 0
    for split, label, count in plan:
        for i in range(count):
            rng = np.random.default_rng(video_seqs[k])
            k += 1
            frames = rng.standard_normal((spec.T, spec.d))
            objects = rng.standard_normal((spec.T, spec.N, spec.d))
            tau = None
            if label == 1:
                tau = int(rng.integers(lo, hi + 1))
                slots = rng.choice(spec.N, size=spec.risky_objects, replace=False)
                ramp = signal_ramp(spec.T, tau, spec.fps, spec.signal, spec.ramp_seconds)
                bump = ramp[:, None] * direction[None, :]
                frames += spec.frame_signal * bump
                shown = np.ones((spec.T, spec.risky_objects))
                if spec.visibility < 1:
                    shown = (rng.random((spec.T, spec.risky_objects)) < spec.visibility).astype(np.float64)
                objects[:, slots, :] += shown[:, :, None] * bump[:, None, :]
            tag = "pos" if label else "neg"
            splits[split].append(
                VideoSample(
                    id=f"{split}_{tag}_{i:04d}",
                    label=label,
                    tau=tau,
                    fps=spec.fps,
                    frame_feats=frames.astype(np.float32),
                    object_feats=objects.astype(np.float32),
                )
            )
    return splits


def stack_batch(samples: Sequence[VideoSample]):
    """Arrays for a batch of equally long videos: frames, objects, labels, taus, fps."""
    T = samples[0].T
    if any(s.T != T for s in samples):
        raise ValueError("all videos in a batch must have the same number of frames")
    frames = np.stack([s.frame_feats for s in samples]).astype(np.float64)
    objects = np.stack([s.object_feats for s in samples]).astype(np.float64)
    labels = np.array([s.label for s in samples], dtype=np.float64)
    taus = np.array([s.tau or 0 for s in samples], dtype=np.float64)
    fps = np.array([s.fps for s in samples], dtype=np.float64)
    return frames, objects, labels, taus, fps
