"""Mask-quality scoring loss and the three-stage proposal filter.

Proposals are kept when (a) their predicted quality score clears the beta
threshold, (b) binarizing their soft values at tau-alpha and tau+alpha gives
two masks whose IoU clears the stability threshold, and (c) they contain at
least n_min points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .scene_io import InstanceMask, MaskSet


@dataclass
class FilterConfig:
    beta: float = 0.5          # predicted-quality threshold
    alpha: float = 0.05        # stability binarization offset
    stability_iou: float = 0.8
    n_min: int = 50
    tau: float = 0.5           # base binarization level
    gamma: float = 0.1         # weight on unmatched terms in the scoring loss

    def __post_init__(self):
        if not 0 <= self.beta <= 1:
            raise DomainError("beta must lie in [0, 1]")
        if not 0 < self.alpha < 0.5:
            raise DomainError("alpha must lie in (0, 0.5)")
        if self.tau - self.alpha <= 0 or self.tau + self.alpha >= 1:
            raise DomainError("tau +/- alpha must stay inside (0, 1)")
        if not 0 <= self.stability_iou <= 1:
            raise DomainError("stability_iou must lie in [0, 1]")
        if self.n_min < 0:
            raise DomainError("n_min must be >= 0")
        if self.gamma < 0:
            raise DomainError("gamma must be >= 0")


def mask_scoring_loss(matched, unmatched, gamma: float) -> float:
    """Quality-prediction training loss.

    matched: (predicted_iou, target_iou) pairs for proposals matched to a
    ground-truth mask; unmatched: predicted ious of unmatched proposals,
    supervised toward zero and down-weighted by gamma.
    """
    if gamma < 0:
        raise DomainError("gamma must be >= 0")
    total = 0.0
    for u in unmatched:
        if not 0 <= u <= 1:
            raise DomainError(f"predicted IoU {u} outside [0, 1]")
        total += gamma * u * u
    for pred, gt in matched:
        if not 0 <= pred <= 1 or not 0 <= gt <= 1:
            raise DomainError(f"IoU pair ({pred}, {gt}) outside [0, 1]")
        total += (pred - gt) ** 2
    return total


def stability_filter(mask: InstanceMask, alpha: float, tau: float = 0.5,
                     stability_iou: float = 0.8) -> bool:
    """Accept a soft mask iff its tau-alpha and tau+alpha binarizations agree.

    Masks without soft values are hard masks (soft value 1 everywhere) and
    pass trivially. An empty upper binarization is unstable.
    """
    if mask.soft_values is None:
        return True
    lower = mask.soft_values >= tau - alpha
    upper = mask.soft_values >= tau + alpha
    n_upper = int(np.count_nonzero(upper))
    if n_upper == 0:
        return False
    # upper is a subset of lower, so the intersection is upper itself
    iou = n_upper / int(np.count_nonzero(lower))
    return iou >= stability_iou


def filter_flags(masks: MaskSet, config: FilterConfig) -> list[bool]:
    """Per-mask keep decision: score gate AND stability AND point count."""
    flags = []
    for m in masks:
        score_ok = m.quality_score is None or m.quality_score >= config.beta
        stable = stability_filter(m, config.alpha, config.tau, config.stability_iou)
        flags.append(score_ok and stable and len(m) >= config.n_min)
    return flags


def filter_masks(masks: MaskSet, config: FilterConfig) -> MaskSet:
    flags = filter_flags(masks, config)
    return MaskSet([m for m, keep in zip(masks, flags) if keep],
                   source=masks.source + "+filtered")
