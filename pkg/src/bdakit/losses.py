"""Training objectives for the two output heads.

The damage head (5 channels: background + four damage levels) trains with a
sum of three terms:

* plain cross-entropy over all pixels and all 5 classes,
* a focusing loss evaluated only on ground-truth building pixels over the
  four damage channels (renormalized among themselves, which equals a
  softmax over those four logits):

      -(1/N) * sum_i sum_c alpha_c * y_ic * (1 - p_ic)**gamma * log(p_ic)

  with N the number of evaluated (building) pixels, y one-hot over the four
  damage classes, gamma >= 0 the focusing exponent and alpha_c per-class
  weights,
* a Jaccard surrogate (Lovasz extension of the IoU) over all 5 classes.

The building head (2 channels) keeps cross-entropy + the Jaccard surrogate;
the focusing term never applies to it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor


@dataclass
class FocalConfig:
    """Per-class weights and focusing exponent for the damage-head focal term.

    ``alpha`` weights the four damage classes (index 0 -> level 1). The
    defaults were tuned for heavily skewed damage distributions. ``alpha_bg``
    is carried in configs/checkpoints for completeness but the focal term is
    only ever evaluated on building pixels, so it takes no part in training.
    """

    alpha: tuple[float, float, float, float] = (0.6, 1.6, 1.1, 1.1)
    gamma: float = 1.5
    alpha_bg: float = 0.6

    def validate(self) -> None:
        if len(self.alpha) != 4 or any(a <= 0 for a in self.alpha):
            raise ad.ConfigError("focal alpha must be 4 positive weights")
        if self.gamma < 0:
            raise ad.ConfigError("focal gamma must be >= 0")
        if self.alpha_bg <= 0:
            raise ad.ConfigError("focal alpha_bg must be positive")


@dataclass
class LossWeights:
    """Mixing weights for the loss terms; all three default to 1."""

    w_ce: float = 1.0
    w_focal: float = 1.0
    w_lovasz: float = 1.0

    def validate(self) -> None:
        if min(self.w_ce, self.w_focal, self.w_lovasz) < 0:
            raise ad.ConfigError("loss weights must be nonnegative")
        if self.w_ce == self.w_focal == self.w_lovasz == 0:
            raise ad.ConfigError("at least one loss weight must be nonzero")


_PROB_FLOOR = 1e-12  # clamp before logarithms; keeps saturated predictions finite


def cross_entropy(logits: Tensor, target: np.ndarray, ignore_value: int | None = None) -> Tensor:
    """Mean negative log-likelihood over non-ignored pixels.

    ``logits`` is (B, C, H, W); ``target`` is (B, H, W) integers in
    [0, C) or equal to ``ignore_value``.
    """
    target = np.asarray(target)
    b, c, h, w = logits.data.shape
    if target.shape != (b, h, w):
        raise ContractError(f"target shape {target.shape} does not match logits {(b, h, w)}")
    keep = np.ones(target.shape, dtype=bool) if ignore_value is None else target != ignore_value
    labels = target[keep]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError("target labels out of range for logit channels")
    if not keep.any():
        warnings.warn("cross_entropy: every pixel ignored, returning 0", stacklevel=2)
        return Tensor(0.0)

    logp = ad.log_softmax(logits, axis=1)
    bi, yi, xi = np.nonzero(keep)
    flat = ((bi * c + labels) * h + yi) * w + xi
    picked = ad.take_flat(logp, flat)
    return -(picked.sum()) / labels.size


def focal_loss(probs: Tensor, target: np.ndarray, cfg: FocalConfig) -> Tensor:
    """Focusing loss over the four damage channels at building pixels.

    ``probs`` is (B, 4, H, W) with channel sums of 1; channel k corresponds
    to damage level k+1. Background pixels (target 0) are excluded, and N in
    the averaging counts only the evaluated pixels.
    """
    cfg.validate()
    target = np.asarray(target)
    b, c, h, w = probs.data.shape
    if c != 4:
        raise ContractError("focal_loss expects exactly 4 damage channels")
    if target.shape != (b, h, w):
        raise ContractError("target shape does not match probability map")
    keep = target >= 1
    if not keep.any():
        warnings.warn("focal_loss: no building pixels to evaluate, returning 0", stacklevel=2)
        return Tensor(0.0)
    labels = target[keep] - 1
    if labels.max() > 3:
        raise ContractError("damage target values must lie in {0..4}")

    bi, yi, xi = np.nonzero(keep)
    flat = ((bi * 4 + labels) * h + yi) * w + xi
    p_true = ad.clip_min(ad.take_flat(probs, flat), _PROB_FLOOR)
    alpha = np.asarray(cfg.alpha, dtype=np.float64)[labels]
    modulation = (Tensor(1.0) - p_true) ** cfg.gamma
    terms = Tensor(alpha) * modulation * ad.tlog(p_true)
    return -(terms.sum()) / labels.size


def _jaccard_weights(fg_sorted: np.ndarray) -> np.ndarray:
    """Discrete gradient of the Jaccard extension for a sorted 0/1 vector."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    if fg_sorted.size > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs: Tensor, target: np.ndarray, ignore_value: int | None = None) -> Tensor:
    """Lovasz extension of the Jaccard loss, averaged over classes present
    in the target. Ignored pixels are excluded from every class."""
    target = np.asarray(target)
    b, c, h, w = probs.data.shape
    if target.shape != (b, h, w):
        raise ContractError("target shape does not match probability map")
    keep = np.ones(target.shape, dtype=bool) if ignore_value is None else target != ignore_value
    if not keep.any():
        warnings.warn("lovasz_softmax: every pixel ignored, returning 0", stacklevel=2)
        return Tensor(0.0)

    bi, yi, xi = np.nonzero(keep)
    labels = target[keep]
    present = np.unique(labels)
    total = Tensor(0.0)
    for cls in present:
        flat = ((bi * c + cls) * h + yi) * w + xi
        p_cls = ad.take_flat(probs, flat)
        fg = (labels == cls).astype(np.float64)
        # |fg - p| written without abs(): fg + p - 2*fg*p, exact for p in [0,1]
        errors = Tensor(fg) + p_cls - Tensor(2.0 * fg) * p_cls
        order = np.argsort(-errors.data, kind="stable")
        weights = _jaccard_weights(fg[order])
        total = total + (ad.take_flat(errors, order) * Tensor(weights)).sum()
    return total / len(present)


def _damage_terms(
    logits: Tensor, dmg: np.ndarray, cfg: FocalConfig, with_focal: bool = True
) -> dict[str, Tensor]:
    dmg = np.asarray(dmg)
    if logits.data.shape[1] != 5:
        raise ContractError("damage head emits 5 channels (background + 4 levels)")
    if dmg.size and (dmg.min() < 0 or dmg.max() > 4):
        raise ContractError("damage mask values must lie in {0..4}")
    ce = cross_entropy(logits, dmg)
    if with_focal:
        # renormalizing softmax(5)[1:5] over the damage channels equals a
        # softmax over those four logits alone
        damage_probs = ad.softmax(ad.slice_channels(logits, 1, 5), axis=1)
        focal = focal_loss(damage_probs, dmg, cfg)
    else:
        focal = Tensor(0.0)
    lovasz = lovasz_softmax(ad.softmax(logits, axis=1), dmg)
    return {"ce": ce, "focal": focal, "lovasz": lovasz}


def damage_head_loss(
    logits: Tensor, dmg: np.ndarray, cfg: FocalConfig, w: LossWeights
) -> Tensor:
    """Weighted CE + focal + Jaccard-surrogate combination for the damage head."""
    w.validate()
    t = _damage_terms(logits, dmg, cfg)
    return Tensor(w.w_ce) * t["ce"] + Tensor(w.w_focal) * t["focal"] + Tensor(w.w_lovasz) * t["lovasz"]


def building_head_loss(logits: Tensor, loc: np.ndarray, w: LossWeights) -> Tensor:
    """CE + Jaccard surrogate for the localization head; no focal term."""
    w.validate()
    loc = np.asarray(loc)
    if logits.data.shape[1] != 2:
        raise ContractError("building head emits 2 channels")
    if loc.size and (loc.min() < 0 or loc.max() > 1):
        raise ContractError("localization mask values must lie in {0, 1}")
    ce = cross_entropy(logits, loc)
    lovasz = lovasz_softmax(ad.softmax(logits, axis=1), loc)
    return Tensor(w.w_ce) * ce + Tensor(w.w_lovasz) * lovasz


def head_loss_terms(
    loc_logits: Tensor,
    dmg_logits: Tensor,
    loc: np.ndarray,
    dmg: np.ndarray,
    cfg: FocalConfig,
    w: LossWeights,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Total training loss plus the individual terms (for logging)."""
    w.validate()
    loc = np.asarray(loc)
    b_ce = cross_entropy(loc_logits, loc)
    b_lovasz = lovasz_softmax(ad.softmax(loc_logits, axis=1), loc)
    d = _damage_terms(dmg_logits, dmg, cfg, with_focal=w.w_focal != 0.0)
    terms = {"b_ce": b_ce, "b_lovasz": b_lovasz, "d_ce": d["ce"], "d_focal": d["focal"],
             "d_lovasz": d["lovasz"]}
    total = (
        Tensor(w.w_ce) * b_ce
        + Tensor(w.w_lovasz) * b_lovasz
        + Tensor(w.w_ce) * d["ce"]
        + Tensor(w.w_focal) * d["focal"]
        + Tensor(w.w_lovasz) * d["lovasz"]
    )
    return total, terms
