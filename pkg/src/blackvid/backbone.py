"""Temporal backbone over precomputed frame features.

A k-frame video yields one clip feature per relation order r in [2, k]: each
order has its own integration MLP applied to a few fixed, seeded subsets of r
time-ordered frames, summed.  Clips are aggregated (optionally weighted by
prediction certainty) into the temporal feature consumed by the classifier
head.  The head is shared between clip-level and temporal-level prediction.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Tensor, no_grad
from .errors import ConfigError, DataError, DimensionError, FormatError
from .rng import RngState

DEFAULT_CLIP_DIM = 256
DEFAULT_HIDDEN = 256
DEFAULT_SUBSETS = 3

CHECKPOINT_MAGIC = b"BVCK"
CHECKPOINT_VERSION = 1


@dataclass
class FrameFeatureSequence:
    """One video: k ordered frame feature vectors of dimension D."""

    video_id: str
    frames: np.ndarray  # (k, D) float32
    label: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 3:
            raise DataError(
                f"video {self.video_id!r}: frames must be (k>=3, D), got {self.frames.shape}"
            )

    @property
    def k(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class ClipFeatureSet:
    """The k-1 clip features of one video, ordered by relation order r=2..k."""

    clips: list[np.ndarray]
    weights: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.clips)


def _draw_subsets(k: int, r: int, count: int, rng: RngState) -> list[tuple[int, ...]]:
    """Distinct strictly-increasing index subsets of size r from range(k)."""
    n_avail = math.comb(k, r)
    take = min(count, n_avail)
    if n_avail <= 10000:
        pool = list(combinations(range(k), r))
        idx = rng.choice(len(pool), size=take, replace=False)
        return [pool[i] for i in sorted(int(i) for i in idx)]
    chosen: list[tuple[int, ...]] = []
    seen = set()
    while len(chosen) < take:
        cand = tuple(sorted(int(i) for i in rng.choice(k, size=r, replace=False)))
        if cand not in seen:
            seen.add(cand)
            chosen.append(cand)
    return sorted(chosen)


class RelationModuleBank:
    """Per-order integration MLPs plus their frozen frame-subset index lists."""

    def __init__(self, k: int, frame_dim: int, clip_dim: int, hidden: int,
                 modules: dict[int, MLP], subsets: dict[int, list[tuple[int, ...]]]):
        self.k = k
        self.frame_dim = frame_dim
        self.clip_dim = clip_dim
        self.hidden = hidden
        self.modules = modules
        self.subsets = subsets

    @classmethod
    def build(cls, k: int, frame_dim: int, rng: RngState,
              clip_dim: int = DEFAULT_CLIP_DIM, hidden: int = DEFAULT_HIDDEN,
              subsets_per_order: int = DEFAULT_SUBSETS, dtype=np.float32) -> "RelationModuleBank":
        if k < 3:
            raise ConfigError(f"relation bank needs k >= 3 frames, got {k}")
        if subsets_per_order < 1:
            raise ConfigError(f"subsets_per_order must be >= 1, got {subsets_per_order}")
        modules, subsets = {}, {}
        for r in range(2, k + 1):
            subsets[r] = _draw_subsets(k, r, subsets_per_order, rng)
            modules[r] = MLP([r * frame_dim, hidden, clip_dim], rng, dtype=dtype)
        return cls(k, frame_dim, clip_dim, hidden, modules, subsets)

    @property
    def orders(self) -> list[int]:
        return list(range(2, self.k + 1))

    def params(self):
        return [p for r in self.orders for p in self.modules[r].params()]


@dataclass
class ModelDims:
    """Architecture hyper-parameters for one model build."""

    frames: int
    frame_dim: int
    num_classes: int
    clip_dim: int = DEFAULT_CLIP_DIM
    hidden: int = DEFAULT_HIDDEN
    subsets_per_order: int = DEFAULT_SUBSETS


class TargetModel:
    """Relation bank plus a shared classifier head (clip and temporal level)."""

    def __init__(self, bank: RelationModuleBank, head: MLP, num_classes: int):
        self.bank = bank
        self.head = head
        self.num_classes = num_classes

    @classmethod
    def build(cls, dims: ModelDims, rng: RngState, dtype=np.float32) -> "TargetModel":
        bank = RelationModuleBank.build(
            dims.frames, dims.frame_dim, rng, clip_dim=dims.clip_dim,
            hidden=dims.hidden, subsets_per_order=dims.subsets_per_order, dtype=dtype)
        head = MLP([dims.clip_dim, dims.hidden, dims.num_classes], rng, dtype=dtype)
        return cls(bank, head, dims.num_classes)

    @property
    def k(self) -> int:
        return self.bank.k

    @property
    def frame_dim(self) -> int:
        return self.bank.frame_dim

    def params(self):
        return self.bank.params() + self.head.params()

    def zero_grad(self) -> None:
        ad.zero_grads(self.params())

    def dims(self) -> ModelDims:
        return ModelDims(
            frames=self.k, frame_dim=self.frame_dim, num_classes=self.num_classes,
            clip_dim=self.bank.clip_dim, hidden=self.bank.hidden,
            subsets_per_order=max(len(s) for s in self.bank.subsets.values()))


# ---------------------------------------------------------------------------
# batched forward path (the training/eval workhorse)


def clip_feature_batch(frames: np.ndarray, bank: RelationModuleBank) -> list[Tensor]:
    """Clip features for a batch: (B, k, D) -> one (B, clip_dim) tensor per order.

    For each order, the stored subsets' frames are concatenated per video,
    stacked across subsets, pushed through that order's MLP in one shot, and
    summed over subsets.
    """
    frames = np.asarray(frames, dtype=None)
    if frames.ndim != 3:
        raise DimensionError(f"clip_feature_batch expects (B, k, D), got {frames.shape}")
    b, k, d = frames.shape
    if k != bank.k or d != bank.frame_dim:
        raise ConfigError(
            f"sequence shape (k={k}, D={d}) does not match bank (k={bank.k}, D={bank.frame_dim})"
        )
    clips = []
    for r in bank.orders:
        subs = bank.subsets[r]
        blocks = [frames[:, list(sub), :].reshape(b, r * d) for sub in subs]
        stacked = np.concatenate(blocks, axis=0)  # (s*B, r*D), constant input
        out = bank.modules[r](Tensor(stacked))
        clips.append(ad.block_sum(out, len(subs)))
    return clips


def clip_weight_batch(clips: list[Tensor], head: MLP, num_classes: int) -> np.ndarray:
    """Certainty weight per clip: 1 - H(head(clip))/ln(C), in [0, 1].

    Computed without recording: within a step the weights act as constants so
    the model cannot game them by minimizing clip entropy.
    Returns (B, k-1) float.
    """
    with no_grad():
        stacked = np.concatenate([c.data for c in clips], axis=0)
        probs = ad.softmax(head(Tensor(stacked))).data
        ent = -(probs * np.log(np.maximum(probs, ad.EPS))).sum(axis=-1)
    w = 1.0 - ent / math.log(num_classes)
    b = clips[0].data.shape[0]
    return np.clip(w.reshape(len(clips), b).T, 0.0, 1.0)


def temporal_feature_batch(clips: list[Tensor], weights: np.ndarray | None = None) -> Tensor:
    """Mean-aggregate clips into (B, clip_dim); weighted when weights given.

    Weights do not carry gradient; clips do.
    """
    n = len(clips)
    if weights is None:
        acc = clips[0]
        for c in clips[1:]:
            acc = ad.add(acc, c)
        return ad.scale(acc, 1.0 / n)
    weights = np.asarray(weights)
    if weights.shape != (clips[0].data.shape[0], n):
        raise DimensionError(
            f"weights shape {weights.shape} does not match batch x {n} clips")
    acc = ad.mul(clips[0], Tensor(weights[:, :1]))
    for i, c in enumerate(clips[1:], start=1):
        acc = ad.add(acc, ad.mul(c, Tensor(weights[:, i:i + 1])))
    return ad.scale(acc, 1.0 / n)


def predict_batch(features: Tensor, head: MLP) -> Tensor:
    """Class distribution rows from features: softmax(head(features))."""
    features = ad.as_tensor(features)
    width = features.data.shape[-1]
    if width != head.dims[0]:
        raise DimensionError(
            f"feature width {width} does not match head input {head.dims[0]}")
    return ad.softmax(head(features))


def forward_probs(model: TargetModel, frames: np.ndarray, weighted: bool,
                  chunk: int = 256) -> np.ndarray:
    """Evaluation-mode class probabilities for (N, k, D) inputs -> (N, C)."""
    frames = np.asarray(frames, dtype=np.float32)
    outs = []
    with no_grad():
        for start in range(0, frames.shape[0], chunk):
            fb = frames[start:start + chunk]
            clips = clip_feature_batch(fb, model.bank)
            w = clip_weight_batch(clips, model.head, model.num_classes) if weighted else None
            t = temporal_feature_batch(clips, w)
            outs.append(predict_batch(t, model.head).data)
    if not outs:
        return np.zeros((0, model.num_classes), dtype=np.float32)
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# per-video surface


def clip_features(video: FrameFeatureSequence, bank: RelationModuleBank) -> ClipFeatureSet:
    """Clip features of one video (weights unset)."""
    tensors = clip_feature_batch(video.frames[None, :, :], bank)
    return ClipFeatureSet(clips=[t.data[0] for t in tensors])


def clip_weights(clip_set: ClipFeatureSet, head: MLP, num_classes: int) -> ClipFeatureSet:
    """Fill in the per-clip certainty weights."""
    if not clip_set.clips:
        raise ConfigError("clip_weights needs a nonempty clip set")
    tensors = [Tensor(c[None, :]) for c in clip_set.clips]
    clip_set.weights = clip_weight_batch(tensors, head, num_classes)[0]
    return clip_set


def temporal_feature(clip_set: ClipFeatureSet, weighted: bool = False) -> np.ndarray:
    """Aggregate one video's clips into its temporal feature."""
    if weighted and clip_set.weights is None:
        raise ValueError("weighted aggregation requested but clip weights are unset")
    tensors = [Tensor(c[None, :]) for c in clip_set.clips]
    w = clip_set.weights[None, :] if weighted else None
    return temporal_feature_batch(tensors, w).data[0]


def predict(feature: np.ndarray, head: MLP) -> np.ndarray:
    """Class distribution for one clip or temporal feature vector."""
    return predict_batch(Tensor(np.asarray(feature)[None, :]), head).data[0]


# ---------------------------------------------------------------------------
# checkpoint file ("BVCK")


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _named_tensors(model: TargetModel) -> list[tuple[str, Tensor]]:
    named = []
    for r in model.bank.orders:
        for i, layer in enumerate(model.bank.modules[r].layers):
            named.append((f"g{r}.w{i}", layer.w))
            named.append((f"g{r}.b{i}", layer.b))
    for i, layer in enumerate(model.head.layers):
        named.append((f"head.w{i}", layer.w))
        named.append((f"head.b{i}", layer.b))
    return named


def save_checkpoint(model: TargetModel, path) -> None:
    """Write model weights, shapes, and frozen subset indices; byte-stable."""
    out = bytearray()
    out += CHECKPOINT_MAGIC
    dims = model.dims()
    out += struct.pack("<7I", CHECKPOINT_VERSION, dims.frames, dims.frame_dim,
                       dims.clip_dim, dims.num_classes, dims.hidden,
                       dims.subsets_per_order)
    for r in model.bank.orders:
        subs = model.bank.subsets[r]
        out += struct.pack("<I", len(subs))
        for sub in subs:
            out += struct.pack(f"<{r}I", *sub)
    named = _named_tensors(model)
    out += struct.pack("<I", len(named))
    for name, tensor in named:
        out += _pack_str(name)
        arr = tensor.data
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def string(self) -> str:
        (n,) = struct.unpack("<H", self.take(2))
        return self.take(n).decode("utf-8")

    def f32_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        raw = self.take(4 * n)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def load_checkpoint(path) -> TargetModel:
    from .audit import note_open

    note_open(path)
    with open(path, "rb") as f:
        buf = f.read()
    rd = _Reader(buf, path)
    if rd.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0, expected BVCK")
    version = rd.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} at byte 4")
    k, frame_dim, clip_dim, num_classes, hidden, subsets_per_order = rd.u32(6)
    subsets = {}
    for r in range(2, k + 1):
        count = rd.u32()
        subs = []
        for _ in range(count):
            vals = rd.u32(r)
            subs.append(tuple(vals) if r > 1 else (vals,))
        subsets[r] = subs
    n_tensors = rd.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name = rd.string()
        ndim = rd.u32()
        shape = rd.u32(ndim)
        if ndim == 1:
            shape = (shape,)
        tensors[name] = rd.f32_array(shape)
    if rd.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - rd.pos} trailing bytes at byte {rd.pos}")

    dims = ModelDims(frames=k, frame_dim=frame_dim, num_classes=num_classes,
                     clip_dim=clip_dim, hidden=hidden,
                     subsets_per_order=subsets_per_order)
    model = TargetModel.build(dims, RngState(0))
    model.bank.subsets = subsets
    for name, tensor in _named_tensors(model):
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name!r}")
        loaded = tensors[name]
        if loaded.shape != tensor.data.shape:
            raise FormatError(
                f"{path}: tensor {name!r} has shape {loaded.shape}, expected {tensor.data.shape}")
        tensor.data = loaded
    return model
