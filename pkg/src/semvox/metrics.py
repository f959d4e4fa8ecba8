"""Voxel-overlap metrics under top-k% retention, plus query-corruption masking.

Retention keeps exactly round(k*N) of the highest-valued voxels (round half
away from zero), with ties at the cutoff broken by ascending linear index in
the canonical x-fastest order. Dice and IoU compare two retained masks; AUC
ranks raw predicted intensities against a binary label mask.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from semvox.corpus import MASK_TOKEN
from semvox.volgrid import BrainVolume

# 100% down to 10% retention.
CANONICAL_SWEEP = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1)


class DegenerateMaskError(ValueError):
    """AUC is undefined when the label mask is all-positive or all-negative."""


def _as_array(volume) -> np.ndarray:
    if isinstance(volume, BrainVolume):
        return volume.data
    return np.asarray(volume)


def retained_count(k: float, n_voxels: int) -> int:
    """round(k*N), rounding half away from zero."""
    if not (0.0 < k <= 1.0):
        raise ValueError(f"retention fraction must be in (0, 1], got {k}")
    return int(math.floor(k * n_voxels + 0.5))


def topk_mask(volume, k: float) -> np.ndarray:
    """Boolean mask retaining the round(k*N) highest-valued voxels."""
    data = _as_array(volume)
    flat = data.ravel(order="F")
    n = retained_count(k, flat.size)
    # Stable sort on the negated values keeps ties in ascending linear order.
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:n]] = True
    return mask.reshape(data.shape, order="F")


def _check_masks(mask_a: np.ndarray, mask_b: np.ndarray):
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice(mask_a, mask_b) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks score 1.0."""
    a, b = _check_masks(mask_a, mask_b)
    na = int(a.sum())
    nb = int(b.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def iou(mask_a, mask_b) -> float:
    """|A∩B| / |A∪B|; two empty masks score 1.0."""
    a, b = _check_masks(mask_a, mask_b)
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return inter / union


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their run."""
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    boundaries = np.nonzero(np.diff(sorted_vals))[0] + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(values)]))
    # Ranks start+1 .. end average to (start + end + 1) / 2.
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(len(values), dtype=np.float64)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(pred_volume, target_mask) -> float:
    """Rank-based (Mann-Whitney) AUC of predicted intensities vs mask labels."""
    pred = _as_array(pred_volume).ravel(order="F").astype(np.float64)
    labels = np.asarray(target_mask, dtype=bool).ravel(order="F")
    if pred.shape != labels.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {labels.shape}")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateMaskError(
            f"mask has {n_pos} positive and {n_neg} negative voxels; AUC undefined"
        )
    ranks = _average_ranks(pred)
    pos_rank_sum = float(ranks[labels].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def mask_tokens(tokens: Sequence[str], rate: float, seed: int) -> list[str]:
    """Replace each token by the literal 'mask' with the given probability.

    Seeded PCG64 stream; length is preserved.
    """
    if not (0.0 <= rate <= 1.0):
        raise ValueError(f"mask rate must be in [0, 1], got {rate}")
    rng = np.random.Generator(np.random.PCG64(seed))
    draws = rng.random(len(tokens))
    return [MASK_TOKEN if d < rate else t for t, d in zip(tokens, draws)]
