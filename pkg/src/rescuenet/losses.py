"""Training objectives: plain 5-way cross-entropy, the localization-aware loss,
Dice loss, and the foreground-only change-head loss.

Every reduction is a mean over the pixels that contribute to that term,
computed with an order-independent exact sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_EPS = 1e-7
DICE_SMOOTH = 1.0
IGNORE = 255


class EmptyLossError(ValueError):
    """Raised when a loss has no contributing pixels and no defined value."""


@dataclass
class LossTargets:
    """Per-pixel supervision for a batch.

    loc_label:    N×H×W, 1.0 on building pixels, 0.0 elsewhere
    damage_onehot: N×C×H×W one-hot over damage classes, all-zero off buildings
    ignore_mask:  N×H×W bool, True where the pixel is excluded from every loss
    combined:     N×H×W uint8 labels {0..4, 255} the above were derived from
    """

    loc_label: np.ndarray
    damage_onehot: np.ndarray
    ignore_mask: np.ndarray
    combined: np.ndarray | None = None

    def __post_init__(self):
        fg = self.loc_label > 0.5
        rows = self.damage_onehot.sum(axis=1)
        if np.any(rows[~fg] != 0):
            raise ValueError("damage target present on a background pixel")
        if np.any(rows[fg & ~self.ignore_mask] != 1):
            raise ValueError("damage target must be one-hot on building pixels")

    @property
    def foreground(self) -> np.ndarray:
        return (self.loc_label > 0.5) & ~self.ignore_mask

    @classmethod
    def from_mask(cls, mask: np.ndarray, num_classes: int = 4) -> "LossTargets":
        """Build targets from combined N×H×W (or H×W) labels {0..C, 255}."""
        mask = np.asarray(mask)
        if mask.ndim == 2:
            mask = mask[None]
        bad = (mask > num_classes) & (mask != IGNORE)
        if np.any(bad):
            raise ValueError(f"label value {int(mask[bad][0])} out of range")
        ignore = mask == IGNORE
        fg = (mask >= 1) & (mask <= num_classes)
        onehot = np.zeros((mask.shape[0], num_classes) + mask.shape[1:], dtype=np.float64)
        for k in range(num_classes):
            onehot[:, k] = mask == k + 1
        return cls(fg.astype(np.float64), onehot, ignore, mask.astype(np.uint8))


@dataclass
class LossBreakdown:
    total: Tensor
    loc_term: float = 0.0
    damage_term: float = 0.0
    dice_term: float = 0.0
    change_term: float = 0.0
    ce_term: float = 0.0
    pixel_counts: dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "loc": self.loc_term,
            "damage": self.damage_term,
            "dice": self.dice_term,
            "change": self.change_term,
            "ce": self.ce_term,
        }


def _const(arr, like: Tensor) -> Tensor:
    return Tensor(np.asarray(arr, dtype=like.dtype), dtype=like.dtype)


def _zero(like: Tensor) -> Tensor:
    return _const(0.0, like)


def _as_map(prob: Tensor) -> Tensor:
    """Accept N×1×H×W or N×H×W and return N×H×W."""
    if prob.ndim == 4:
        if prob.shape[1] != 1:
            raise T.ShapeError(f"expected a single-channel map, got {prob.shape}")
        return T.reshape(prob, (prob.shape[0],) + prob.shape[2:])
    return prob


def _masked_mean(values: Tensor, weight: np.ndarray) -> tuple[Tensor, int]:
    count = int(weight.sum())
    if count == 0:
        return _zero(values), 0
    total = T.exact_sum(T.mul(values, _const(weight, values)))
    return T.mul(total, 1.0 / count), count


def bce_loss(loc_prob: Tensor, targets: LossTargets) -> tuple[Tensor, int]:
    """Binary cross-entropy of the building map, mean over non-ignored pixels."""
    p = _as_map(loc_prob)
    if p.shape != targets.loc_label.shape:
        raise T.ShapeError(f"prediction {p.shape} vs label {targets.loc_label.shape}")
    p = T.clip(p, PROB_EPS, 1 - PROB_EPS)
    y = _const(targets.loc_label, p)
    per_pixel = T.neg(T.add(T.mul(y, T.log(p)), T.mul(T.sub(1.0, y), T.log(T.sub(1.0, p)))))
    loss, count = _masked_mean(per_pixel, (~targets.ignore_mask).astype(np.float64))
    if count == 0:
        raise EmptyLossError("every pixel is ignored")
    return loss, count


def damage_ce(damage_prob: Tensor, targets: LossTargets) -> tuple[Tensor, int]:
    """Categorical cross-entropy on building pixels only, from probabilities."""
    if damage_prob.shape != targets.damage_onehot.shape:
        raise T.ShapeError(f"prediction {damage_prob.shape} vs label {targets.damage_onehot.shape}")
    p = T.clip(damage_prob, PROB_EPS, 1 - PROB_EPS)
    per_pixel = T.neg(T.sum_(T.mul(_const(targets.damage_onehot, p), T.log(p)), axis=1))
    return _masked_mean(per_pixel, targets.foreground.astype(np.float64))


def locaware_loss(loc_prob: Tensor, damage_prob: Tensor, targets: LossTargets) -> LossBreakdown:
    """Building BCE everywhere plus damage cross-entropy on building pixels."""
    loc, n_loc = bce_loss(loc_prob, targets)
    dmg, n_fg = damage_ce(damage_prob, targets)
    total = T.add(loc, dmg) if n_fg else loc
    return LossBreakdown(
        total=total,
        loc_term=loc.item(),
        damage_term=dmg.item(),
        pixel_counts={"loc": n_loc, "damage": n_fg},
    )


def dice_loss(loc_prob: Tensor, loc_label, smooth: float = DICE_SMOOTH, ignore_mask=None) -> Tensor:
    """1 - (2·Σ y·p + s) / (Σ y + Σ p + s)."""
    if smooth < 0:
        raise ValueError("smooth must be >= 0")
    p = _as_map(loc_prob) if loc_prob.ndim == 4 else loc_prob
    y = np.asarray(loc_label, dtype=np.float64)
    if p.shape != y.shape:
        raise T.ShapeError(f"prediction {p.shape} vs label {y.shape}")
    if ignore_mask is not None:
        keep = (~np.asarray(ignore_mask)).astype(np.float64)
        y = y * keep
        p = T.mul(p, _const(keep, p))
    inter = T.exact_sum(T.mul(p, _const(y, p)))
    psum = T.exact_sum(p)
    ysum = float(np.sum(y))
    denom = T.add(psum, ysum + smooth)
    if denom.item() == 0:
        raise EmptyLossError("dice loss undefined: both masks empty and smooth = 0")
    return T.sub(1.0, T.div(T.add(T.mul(inter, 2.0), smooth), denom))


def plain_ce_loss(logits5: Tensor, combined_label) -> Tensor:
    """Mean softmax cross-entropy over {background, 4 damage classes}; 255 is ignored."""
    label = np.asarray(combined_label)
    if label.ndim == logits5.ndim - 1 and label.shape != (logits5.shape[0],) + logits5.shape[2:]:
        raise T.ShapeError(f"logits {logits5.shape} vs labels {label.shape}")
    k = logits5.shape[1]
    bad = (label >= k) & (label != IGNORE)
    if np.any(bad):
        raise ValueError(f"label value {int(label[bad][0])} out of range for {k} classes")
    keep = label != IGNORE
    if not keep.any():
        raise EmptyLossError("every pixel is ignored")
    onehot = np.zeros(logits5.shape, dtype=np.float64)
    for c in range(k):
        onehot[:, c] = (label == c) & keep
    logp = T.log_softmax(logits5, axis=1)
    per_pixel = T.neg(T.sum_(T.mul(_const(onehot, logp), logp), axis=1))
    loss, _ = _masked_mean(per_pixel, keep.astype(np.float64))
    return loss


def change_head_loss(change_logits: Tensor, targets: LossTargets) -> tuple[Tensor, int]:
    """Cross-entropy on building pixels only; background contributes nothing.

    Returns (loss, number of contributing pixels); the loss is 0 when no
    building pixel is present.
    """
    if change_logits.shape != targets.damage_onehot.shape:
        raise T.ShapeError(f"prediction {change_logits.shape} vs label {targets.damage_onehot.shape}")
    logp = T.log_softmax(change_logits, axis=1)
    per_pixel = T.neg(T.sum_(T.mul(_const(targets.damage_onehot, logp), logp), axis=1))
    return _masked_mean(per_pixel, targets.foreground.astype(np.float64))


def ce_logits(outputs) -> Tensor:
    """5-way logits for the plain cross-entropy objective.

    The building logit acts as the negated background score so that a
    confident building prediction at inference (logit > 0) is the same
    decision the 5-way softmax learns.
    """
    return T.concat([T.neg(outputs.loc_logits_post), outputs.damage_logits_seg], axis=1)


def total_loss(
    outputs,
    targets: LossTargets,
    loss_mode: str,
    dice_weight: float = 1.0,
    change_weight: float = 1.0,
    smooth: float = DICE_SMOOTH,
) -> LossBreakdown:
    """Combine the per-head objectives according to ``loss_mode``.

    ce:            plain 5-way CE on the post-image segmentation head only
    locaware:      localization-aware loss on the post image, building BCE on
                   the pre image, and the change-head loss
    locaware_dice: the above plus Dice on both building maps
    """
    counts: dict[str, int] = {}
    if loss_mode == "ce":
        if targets.combined is None:
            raise ValueError("plain cross-entropy needs combined labels")
        ce = plain_ce_loss(ce_logits(outputs), targets.combined)
        counts["ce"] = int((targets.combined != IGNORE).sum())
        return LossBreakdown(total=ce, ce_term=ce.item(), pixel_counts=counts)
    if loss_mode not in ("locaware", "locaware_dice"):
        raise ValueError(f"unknown loss mode {loss_mode!r}")

    prob_post = T.sigmoid(outputs.loc_logits_post)
    prob_pre = T.sigmoid(outputs.loc_logits_pre)
    post = locaware_loss(prob_post, T.softmax(outputs.damage_logits_seg, axis=1), targets)
    pre_bce, _ = bce_loss(prob_pre, targets)
    counts.update(post.pixel_counts)
    terms = [post.total, pre_bce]
    loc_term = post.loc_term + pre_bce.item()

    dice_term = 0.0
    if loss_mode == "locaware_dice":
        dice = T.add(
            dice_loss(prob_pre, targets.loc_label, smooth, targets.ignore_mask),
            dice_loss(prob_post, targets.loc_label, smooth, targets.ignore_mask),
        )
        dice_term = dice.item()
        terms.append(T.mul(dice, dice_weight))

    change_term = 0.0
    if outputs.damage_logits_change is not None:
        change, n = change_head_loss(outputs.damage_logits_change, targets)
        counts["change"] = n
        change_term = change.item()
        if n:
            terms.append(T.mul(change, change_weight))

    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return LossBreakdown(
        total=total,
        loc_term=loc_term,
        damage_term=post.damage_term,
        dice_term=dice_term,
        change_term=change_term,
        pixel_counts=counts,
    )
