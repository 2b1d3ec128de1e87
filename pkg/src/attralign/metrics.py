"""Alignment between explanations and binary ground-truth masks: scalar
metrics (mass / rank accuracy, hit, IoU) and the differentiable losses that
pull explanations toward a mask or toward its complement.

Scalar metrics are pure numpy functions. Losses operate on tensors; the
min-max normalizer inside a loss is treated as a constant per step
(stop-gradient), which keeps the squared-residual objective well behaved.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .explainers import ExplainerConfig, Explanation, explanation_maps

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

def minmax_scale_array(e: np.ndarray) -> np.ndarray:
    """(e - min) / (max - min); a constant map scales to all zeros."""
    e = np.asarray(e, dtype=np.float64)
    lo, hi = e.min(), e.max()
    if hi == lo:
        return np.zeros_like(e)
    return (e - lo) / (hi - lo)


def minmax_scale(e):
    """Min-max scale an Explanation, Tensor, or array into [0, 1].

    For tensors the normalizer is detached, so gradients flow only through
    the numerator.
    """
    if isinstance(e, Explanation):
        scaled = minmax_scale(e.attributions)
        return Explanation(attributions=scaled, raw=e.raw, label=e.label,
                           method=e.method, differentiable=e.differentiable)
    if isinstance(e, Tensor):
        lo = float(e.data.min())
        hi = float(e.data.max())
        if hi == lo:
            return ad.zeros(e.shape)
        return ad.mul(ad.sub(e, lo), 1.0 / (hi - lo))
    return minmax_scale_array(e)


def minmax_scale_batch(maps: Tensor, stats=None) -> Tensor:
    """Per-sample min-max scaling of (B, H, W) maps; normalizers detached.

    ``stats`` optionally fixes the (lo, hi) normalizers, which is how the
    finite-difference oracle evaluates the same function the stop-gradient
    defines.
    """
    if stats is None:
        data = maps.data
        lo = data.min(axis=(1, 2), keepdims=True)
        hi = data.max(axis=(1, 2), keepdims=True)
    else:
        lo, hi = stats
    span = hi - lo
    inv = np.where(span == 0, 0.0, 1.0 / np.where(span == 0, 1.0, span))
    return ad.mul(ad.sub(maps, Tensor(lo)), Tensor(inv))


# ---------------------------------------------------------------------------
# scalar alignment metrics
# ---------------------------------------------------------------------------

@dataclass
class AlignmentScores:
    mass: Optional[float]  # None when the explanation sums to zero
    rank: float
    hit: bool
    iou: float


def _check_pair(e: np.ndarray, m: np.ndarray):
    if e.shape != m.shape:
        raise ValueError(f"explanation shape {e.shape} != mask shape {m.shape}")
    vals = np.unique(m)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError(f"mask must be binary, found values {vals[:5]}")


def mass_accuracy(e: np.ndarray, m: np.ndarray) -> Optional[float]:
    """Fraction of total attribution mass inside the mask; None if e sums to 0."""
    e = np.asarray(e, dtype=np.float64)
    m = np.asarray(m)
    _check_pair(e, m)
    total = e.sum()
    if total == 0:
        return None
    return float(e[m == 1].sum() / total)


def _topk_indices(e: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -e: ties resolved by ascending flat index
    return np.argsort(-e.reshape(-1), kind="stable")[:k]


def rank_accuracy(e: np.ndarray, m: np.ndarray) -> float:
    """Fraction of the top-k attributed pixels inside the mask, k = |mask|."""
    e = np.asarray(e, dtype=np.float64)
    m = np.asarray(m)
    _check_pair(e, m)
    k = int(m.sum())
    if k == 0:
        raise ValueError("rank accuracy undefined for an empty mask")
    top = _topk_indices(e, k)
    inside = np.flatnonzero(m.reshape(-1) == 1)
    return float(len(np.intersect1d(top, inside, assume_unique=True)) / k)


def hit_rate_single(e: np.ndarray, m: np.ndarray) -> bool:
    """True iff the single maximally attributed pixel lies inside the mask."""
    e = np.asarray(e, dtype=np.float64)
    m = np.asarray(m)
    _check_pair(e, m)
    if m.sum() == 0:
        raise ValueError("hit rate undefined for an empty mask")
    return bool(m.reshape(-1)[np.argmax(e.reshape(-1))] == 1)


def miou_single(e: np.ndarray, m: np.ndarray) -> float:
    """IoU between the top-k binarization of e (k = |mask|) and the mask."""
    e = np.asarray(e, dtype=np.float64)
    m = np.asarray(m)
    _check_pair(e, m)
    k = int(m.sum())
    if k == 0:
        raise ValueError("IoU undefined for an empty mask")
    b = np.zeros(e.size, dtype=bool)
    b[_topk_indices(e, k)] = True
    inside = m.reshape(-1) == 1
    return float(np.logical_and(b, inside).sum() / np.logical_or(b, inside).sum())


def alignment_scores(e: np.ndarray, m: np.ndarray) -> AlignmentScores:
    return AlignmentScores(
        mass=mass_accuracy(e, m),
        rank=rank_accuracy(e, m),
        hit=hit_rate_single(e, m),
        iou=miou_single(e, m),
    )


# ---------------------------------------------------------------------------
# differentiable (mis)alignment losses
# ---------------------------------------------------------------------------

def _collect(samples: Sequence, label: int):
    """Split a batch into (usable samples, skipped count) for a target label."""
    usable = [s for s in samples if label in s.masks]
    skipped = len(samples) - len(usable)
    if skipped:
        logger.warning("skipping %d sample(s) without a mask for label %d",
                       skipped, label)
    return usable, skipped


def _alignment_residual(model, config: ExplainerConfig, samples, label: int,
                        invert: bool, seed_offset: int, scale_stats=None) -> Tensor:
    usable, _ = _collect(samples, label)
    if not usable:
        raise ValueError(f"no sample in the batch carries a mask for label {label}")
    images = np.stack([s.image for s in usable])
    masks = np.stack([s.masks[label] for s in usable]).astype(np.float64)
    if invert:
        masks = 1.0 - masks
    maps = explanation_maps(model, images, label, config, record=True,
                            seed_offset=seed_offset)
    scaled = minmax_scale_batch(maps, stats=scale_stats)
    diff = ad.sub(scaled, Tensor(masks))
    return ad.mul(ad.tsum(ad.mul(diff, diff)), 1.0 / len(usable))


def alignment_scale_stats(model, config: ExplainerConfig, samples, label: int,
                          seed_offset: int = 0):
    """Current per-sample (lo, hi) normalizers; lets an oracle freeze them."""
    usable, _ = _collect(samples, label)
    images = np.stack([s.image for s in usable])
    maps = explanation_maps(model, images, label, config, record=False,
                            seed_offset=seed_offset).data
    return (maps.min(axis=(1, 2), keepdims=True), maps.max(axis=(1, 2), keepdims=True))


def loss_align(model, config: ExplainerConfig, samples, label: int,
               seed_offset: int = 0, scale_stats=None) -> Tensor:
    """Mean over samples of ||scaled explanation - mask||^2, differentiable
    with respect to model parameters."""
    return _alignment_residual(model, config, samples, label, False, seed_offset,
                               scale_stats)


def loss_misalign(model, config: ExplainerConfig, samples, label: int,
                  seed_offset: int = 0, scale_stats=None) -> Tensor:
    """As loss_align with the inverted mask (1 - M) as target."""
    return _alignment_residual(model, config, samples, label, True, seed_offset,
                               scale_stats)


def loss_align_sum(model, config: ExplainerConfig, samples, labels: Sequence[int],
                   seed_offset: int = 0) -> Tensor:
    """Multi-label extension: sum of per-label alignment losses."""
    total = None
    for lab in labels:
        term = loss_align(model, config, samples, lab, seed_offset)
        total = term if total is None else ad.add(total, term)
    return total


def classification_loss(model, samples) -> Tensor:
    """Mean per-label binary cross-entropy with logits over the batch."""
    images = np.stack([s.image for s in samples])
    targets = np.stack([s.labels for s in samples]).astype(np.float64)
    logits = model.forward(Tensor(images))
    return ad.bce_with_logits(logits, Tensor(targets))


def loss_total(model, config: ExplainerConfig, samples, label: int,
               alpha: float = 1.0, scenario: str = "align",
               seed_offset: int = 0) -> Tensor:
    """Classification loss plus alpha times the (mis)alignment loss."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    ce = classification_loss(model, samples)
    if alpha == 0:
        return ce
    if scenario == "align":
        extra = loss_align(model, config, samples, label, seed_offset)
    elif scenario == "misalign":
        extra = loss_misalign(model, config, samples, label, seed_offset)
    else:
        raise ValueError(f"scenario must be align or misalign, got {scenario!r}")
    return ad.add(ce, ad.mul(extra, alpha))
