import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semvox.metrics import (
    CANONICAL_SWEEP,
    DegenerateMaskError,
    auc,
    dice,
    iou,
    mask_tokens,
    retained_count,
    topk_mask,
)
from semvox.volgrid import BrainVolume, GridSpec


def oracle_dice(mask_a, mask_b):
    """Set-arithmetic reference implementation."""
    a = {i for i, v in enumerate(np.asarray(mask_a).ravel(order="F")) if v}
    b = {i for i, v in enumerate(np.asarray(mask_b).ravel(order="F")) if v}
    if not a and not b:
        return 1.0
    return 2 * len(a & b) / (len(a) + len(b))


def oracle_iou(mask_a, mask_b):
    a = {i for i, v in enumerate(np.asarray(mask_a).ravel(order="F")) if v}
    b = {i for i, v in enumerate(np.asarray(mask_b).ravel(order="F")) if v}
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def oracle_auc(scores, labels):
    """Pairwise concordance count: ties contribute half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    pos = scores[labels]
    neg = scores[~labels]
    wins = 0.0
    for p in pos:
        wins += float(np.sum(p > neg)) + 0.5 * float(np.sum(p == neg))
    return wins / (len(pos) * len(neg))


class TestTopkMask:
    def test_two_largest_of_ten(self):
        values = np.array([5, 1, 9, 3, 7, 2, 8, 0, 4, 6], dtype=float).reshape(10, 1, 1)
        mask = topk_mask(values, 0.2)
        assert mask.sum() == 2
        assert mask[2, 0, 0] and mask[6, 0, 0]

    def test_k_one_keeps_everything(self):
        rng = np.random.default_rng(0)
        values = rng.random((4, 5, 6))
        assert topk_mask(values, 1.0).all()

    def test_all_equal_tie_break_by_linear_index(self):
        values = np.ones((2, 2, 2))
        mask = topk_mask(values, 0.5)
        flat = mask.ravel(order="F")
        assert list(flat) == [True] * 4 + [False] * 4

    def test_retained_count_rounds_half_away_from_zero(self):
        assert retained_count(0.5, 5) == 3  # 2.5 -> 3
        assert retained_count(0.25, 10) == 3  # 2.5 -> 3
        assert retained_count(0.1, 4) == 0  # 0.4 -> 0
        assert retained_count(1.0, 7) == 7

    def test_canonical_sweep_counts(self):
        rng = np.random.default_rng(1)
        values = rng.random((6, 5, 4))
        n = values.size
        for k in CANONICAL_SWEEP:
            assert topk_mask(values, k).sum() == retained_count(k, n)

    def test_k_validation(self):
        values = np.zeros((2, 2, 2))
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                topk_mask(values, bad)

    def test_accepts_brain_volume(self):
        grid = GridSpec(dims=(3, 3, 3), voxel_size_mm=(1, 1, 1), origin_mm=(0, 0, 0))
        vol = BrainVolume(grid=grid, data=np.arange(27, dtype=np.float32).reshape((3, 3, 3), order="F"))
        mask = topk_mask(vol, 0.1)
        assert mask.sum() == 3
        assert mask.ravel(order="F")[-3:].all()


class TestDiceIou:
    def test_identical_nonempty(self):
        m = np.zeros((2, 2, 2), dtype=bool)
        m[0, 1, 0] = True
        assert dice(m, m) == 1.0
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((2, 2, 2), dtype=bool)
        b = np.zeros((2, 2, 2), dtype=bool)
        a[0, 0, 0] = True
        b[1, 1, 1] = True
        assert dice(a, b) == 0.0
        assert iou(a, b) == 0.0

    def test_hand_counts(self):
        a = np.zeros((2, 2, 2), dtype=bool)
        b = np.zeros((2, 2, 2), dtype=bool)
        a[0, 0, 0] = a[1, 0, 0] = True  # |A| = 2
        b[0, 0, 0] = True  # |B| = 1, intersection 1
        assert dice(a, b) == pytest.approx(2 / 3)
        assert iou(a, b) == pytest.approx(0.5)

    def test_both_empty_convention(self):
        z = np.zeros((2, 2, 2), dtype=bool)
        assert dice(z, z) == 1.0
        assert iou(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros((2, 2, 2), dtype=bool), np.zeros((2, 2, 3), dtype=bool))
        with pytest.raises(ValueError):
            iou(np.zeros((2, 2, 2), dtype=bool), np.zeros((2, 2, 3), dtype=bool))

    def test_exhaustive_2x2x2_oracle(self):
        # All 256x256 mask pairs, exact equality against set arithmetic.
        masks = [
            np.array([(m >> i) & 1 for i in range(8)], dtype=bool).reshape((2, 2, 2), order="F")
            for m in range(256)
        ]
        for a, b in itertools.product(masks, repeat=2):
            assert dice(a, b) == oracle_dice(a, b)
            assert iou(a, b) == oracle_iou(a, b)

    @given(st.integers(0, 255), st.integers(0, 255))
    @settings(max_examples=80, deadline=None)
    def test_symmetry_and_identity(self, ma, mb):
        a = np.array([(ma >> i) & 1 for i in range(8)], dtype=bool).reshape(2, 2, 2)
        b = np.array([(mb >> i) & 1 for i in range(8)], dtype=bool).reshape(2, 2, 2)
        assert dice(a, b) == dice(b, a)
        assert iou(a, b) == iou(b, a)
        # dice = 2*iou / (1 + iou) for every mask pair.
        j = iou(a, b)
        assert dice(a, b) == pytest.approx(2 * j / (1 + j), abs=1e-12)


class TestAuc:
    def test_perfect_ranking(self):
        scores = np.array([0.9, 0.8, 0.2, 0.1]).reshape(4, 1, 1)
        labels = np.array([True, True, False, False]).reshape(4, 1, 1)
        assert auc(scores, labels) == 1.0

    def test_all_ties_half(self):
        scores = np.full((3, 3, 3), 0.7)
        labels = np.zeros((3, 3, 3), dtype=bool)
        labels[0, 0, 0] = True
        assert auc(scores, labels) == 0.5

    def test_hand_derived(self):
        # Pairs: (0.9 vs 0.8) and (0.9 vs 0.1) concordant, (0.4 vs 0.8)
        # discordant, (0.4 vs 0.1) concordant -> 3/4.
        scores = np.array([0.9, 0.8, 0.4, 0.1]).reshape(4, 1, 1)
        labels = np.array([True, False, True, False]).reshape(4, 1, 1)
        assert auc(scores, labels) == pytest.approx(0.75)

    def test_degenerate_masks_error(self):
        scores = np.zeros((2, 2, 2))
        with pytest.raises(DegenerateMaskError):
            auc(scores, np.ones((2, 2, 2), dtype=bool))
        with pytest.raises(DegenerateMaskError):
            auc(scores, np.zeros((2, 2, 2), dtype=bool))

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(150):
            scores = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], size=(4, 4, 4))
            labels = rng.random((4, 4, 4)) < 0.4
            if labels.all() or not labels.any():
                continue
            assert auc(scores, labels) == pytest.approx(
                oracle_auc(scores.ravel(order="F"), labels.ravel(order="F")), abs=1e-12
            )

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(11)
        scores = rng.random((5, 5, 5))
        labels = rng.random((5, 5, 5)) < 0.3
        labels[0, 0, 0] = True
        labels[1, 0, 0] = False
        base = auc(scores, labels)
        for transform in (
            lambda x: 3 * x + 1,
            np.exp,
            lambda x: x ** 3 + x,
            lambda x: np.arctan(x) * 2,
        ):
            assert auc(transform(scores), labels) == pytest.approx(base, abs=1e-12)


class TestMaskTokens:
    def test_rate_zero_identity(self):
        tokens = ["alpha", "beta", "gamma"]
        assert mask_tokens(tokens, 0.0, seed=1) == tokens

    def test_rate_one_all_masked(self):
        tokens = ["alpha", "beta", "gamma"]
        assert mask_tokens(tokens, 1.0, seed=1) == ["mask", "mask", "mask"]

    def test_determinism(self):
        tokens = [f"t{i}" for i in range(50)]
        assert mask_tokens(tokens, 0.5, seed=9) == mask_tokens(tokens, 0.5, seed=9)

    def test_seed_changes_pattern(self):
        tokens = [f"t{i}" for i in range(50)]
        assert mask_tokens(tokens, 0.5, seed=1) != mask_tokens(tokens, 0.5, seed=2)

    def test_length_preserved(self):
        tokens = [f"t{i}" for i in range(17)]
        assert len(mask_tokens(tokens, 0.7, seed=0)) == 17

    def test_rate_validation(self):
        with pytest.raises(ValueError):
            mask_tokens(["a"], 1.5, seed=0)

    def test_approximate_rate(self):
        tokens = [f"t{i}" for i in range(4000)]
        masked = mask_tokens(tokens, 0.3, seed=5)
        frac = sum(1 for t in masked if t == "mask") / len(masked)
        assert 0.25 < frac < 0.35
