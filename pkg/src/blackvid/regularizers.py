"""Consistency regularization over clip and temporal features.

Two families of terms, both built on convex mixing with Beta-sampled weights:

* within a video ("endo"): mask all but two clips, mix the survivors into a
  virtual temporal feature, then (a) pull its prediction toward the full
  temporal prediction (KL) and (b) pull it toward the mix of the two clip
  predictions (soft cross-entropy, interpolation-consistency style);
* across videos ("exo"): the prediction of a mixed pair of temporal features
  should match the mix of the pair's predictions.

Targets are treated as constants by default (consistency-training
convention); pass stop_gradient=False to train both sides symmetrically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Tensor
from .errors import ConfigError
from .rng import RngState, beta_sample

# Orders are the public clip labels (r=2..k); index i in a clip list is order i+2.


@dataclass
class RegConfig:
    """Beta concentrations for the two mixing weights."""

    alpha_v: float = 0.3
    alpha_t: float = 0.3

    def __post_init__(self):
        if not (self.alpha_v > 0 and self.alpha_t > 0):
            raise ConfigError(
                f"Beta parameters must be positive, got alpha_v={self.alpha_v}, alpha_t={self.alpha_t}")


@dataclass
class MaskDraw:
    """The two surviving clip orders after masking, plus their mixing weight."""

    r1: int
    r2: int
    lam: float


def draw_mask(k: int, rng: RngState, cfg: RegConfig) -> MaskDraw:
    """Mask all but two of the k-1 clips, uniformly over unordered pairs.

    Fresh draw per video per step; lam ~ Beta(alpha_v, alpha_v).
    """
    if k < 3:
        raise ConfigError(f"mask-to-mix undefined below two clips (k={k})")
    pair = rng.choice(k - 1, size=2, replace=False)
    lam = beta_sample(cfg.alpha_v, rng)
    return MaskDraw(r1=int(pair[0]) + 2, r2=int(pair[1]) + 2, lam=lam)


def draw_mask_batch(k: int, batch: int, rng: RngState, cfg: RegConfig) -> list[MaskDraw]:
    return [draw_mask(k, rng, cfg) for _ in range(batch)]


def _check_orders(draw: MaskDraw, n_clips: int) -> tuple[int, int]:
    k = n_clips + 1
    for r in (draw.r1, draw.r2):
        if not (2 <= r <= k):
            raise ValueError(f"clip order {r} outside [2, {k}]")
    if draw.r1 == draw.r2:
        raise ValueError(f"mask draw must keep two distinct clips, got r1=r2={draw.r1}")
    return draw.r1 - 2, draw.r2 - 2


def select_clip_pairs(clips: list[Tensor], draws: list[MaskDraw]) -> tuple[Tensor, Tensor, np.ndarray]:
    """Per-video unmasked clip pair: two (B, clip_dim) tensors plus the lam column."""
    b = clips[0].data.shape[0]
    if len(draws) != b:
        raise ValueError(f"need one mask draw per video, got {len(draws)} for batch {b}")
    i1 = np.empty(b, dtype=np.intp)
    i2 = np.empty(b, dtype=np.intp)
    for v, draw in enumerate(draws):
        a, c = _check_orders(draw, len(clips))
        i1[v], i2[v] = a, c
    stacked = ad.vconcat(clips)  # rows grouped by order: order i occupies [i*b, (i+1)*b)
    rows = np.arange(b)
    first = ad.take_rows(stacked, i1 * b + rows)
    second = ad.take_rows(stacked, i2 * b + rows)
    lam = np.array([d.lam for d in draws], dtype=np.float64).reshape(b, 1)
    return first, second, lam


def virtual_temporal_batch(clips: list[Tensor], draws: list[MaskDraw]) -> Tensor:
    """Mix each video's surviving clip pair into its virtual temporal feature."""
    first, second, lam = select_clip_pairs(clips, draws)
    return ad.mixup(first, second, lam)


def virtual_temporal(clip_set, draw: MaskDraw) -> np.ndarray:
    """Single-video virtual temporal feature (value only)."""
    clips = [Tensor(np.asarray(c)[None, :]) for c in clip_set.clips]
    return virtual_temporal_batch(clips, [draw]).data[0]


def mixed_clip_prediction_batch(clips: list[Tensor], head: MLP, draws: list[MaskDraw]) -> Tensor:
    """Convex mix of the two surviving clips' predictions, per video."""
    first, second, lam = select_clip_pairs(clips, draws)
    p1 = ad.softmax(head(first))
    p2 = ad.softmax(head(second))
    return ad.mixup(p1, p2, lam)


def mixed_clip_prediction(clip_set, head: MLP, draw: MaskDraw) -> np.ndarray:
    clips = [Tensor(np.asarray(c)[None, :]) for c in clip_set.clips]
    return mixed_clip_prediction_batch(clips, head, [draw]).data[0]


def loss_pre(virtual_pred: Tensor, temporal_pred: Tensor, stop_gradient: bool = True) -> Tensor:
    """KL(virtual prediction || temporal prediction), per row.

    The temporal prediction is the consistency target and carries no gradient
    unless stop_gradient=False.
    """
    virtual_pred = ad.as_tensor(virtual_pred)
    temporal_pred = ad.as_tensor(temporal_pred)
    if stop_gradient:
        temporal_pred = temporal_pred.detach()
    return ad.kl_div(virtual_pred, temporal_pred)


def loss_vir(virtual_pred: Tensor, mixed_pred: Tensor, stop_gradient: bool = True) -> Tensor:
    """Soft cross-entropy of the virtual prediction against the mixed clip
    prediction (the target side), per row."""
    virtual_pred = ad.as_tensor(virtual_pred)
    mixed_pred = ad.as_tensor(mixed_pred)
    if stop_gradient:
        mixed_pred = mixed_pred.detach()
    return ad.cross_entropy_soft(mixed_pred, virtual_pred)


def loss_endo(vir_terms: Tensor | None, pre_terms: Tensor | None) -> Tensor:
    """Batch mean of the enabled per-video endo terms."""
    parts = [t for t in (vir_terms, pre_terms) if t is not None]
    if not parts:
        raise ValueError("loss_endo needs at least one enabled term")
    if any(p.data.size == 0 for p in parts):
        raise ValueError("loss_endo got an empty batch")
    acc = parts[0]
    for p in parts[1:]:
        acc = ad.add(acc, p)
    return ad.tmean(acc)


def exo_pairing(batch: int, rng: RngState) -> np.ndarray:
    """Partner index per element: a random cyclic shift of the batch.

    A batch of one pairs the element with itself.
    """
    if batch <= 1:
        return np.zeros(batch, dtype=np.intp)
    shift = int(rng.integers(1, batch))
    return (np.arange(batch) + shift) % batch


def loss_exo_batch(temporal: Tensor, head: MLP, partners: np.ndarray,
                   lam: np.ndarray, stop_gradient: bool = True) -> Tensor:
    """Cross-video interpolation consistency, per row.

    pred  = head(mix(t_i, t_j, lam)) through softmax,
    target = mix(head(t_i), head(t_j), lam), constant by default.
    """
    temporal = ad.as_tensor(temporal)
    b = temporal.data.shape[0]
    lam_col = np.asarray(lam, dtype=np.float64).reshape(b, 1)
    partner_t = ad.take_rows(temporal, partners)
    mixed_feat = ad.mixup(temporal, partner_t, lam_col)
    pred = ad.softmax(head(mixed_feat))
    y_self = ad.softmax(head(temporal))
    y_partner = ad.take_rows(y_self, partners)
    target = ad.mixup(y_self, y_partner, lam_col)
    if stop_gradient:
        target = target.detach()
    return ad.cross_entropy_soft(target, pred)


def loss_exo(t_i: np.ndarray, t_j: np.ndarray, head: MLP, rng: RngState,
             cfg: RegConfig, stop_gradient: bool = True) -> float:
    """Single-pair exo term with a fresh Beta(alpha_t, alpha_t) weight."""
    lam = beta_sample(cfg.alpha_t, rng)
    t = Tensor(np.stack([np.asarray(t_i), np.asarray(t_j)]))
    partners = np.array([1, 0], dtype=np.intp)
    vals = loss_exo_batch(t, head, partners, np.array([lam, lam]), stop_gradient)
    return float(vals.data[0])
